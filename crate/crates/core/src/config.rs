//! Run configuration: one JSON document, strict keys, dotted overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::wavelet::WaveletFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Per-image learnable feature grid and visibility logits.
    #[default]
    Grid,
    /// Shared strided-conv encoder with two upsampling decoders.
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HrfnWidths {
    pub m1: Vec<usize>,
    pub m2: Vec<usize>,
    pub m3: Vec<usize>,
    pub m4: Vec<usize>,
}

impl Default for HrfnWidths {
    fn default() -> Self {
        Self { m1: vec![128, 96], m2: vec![96, 64], m3: vec![48, 48], m4: vec![48] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    /// Feature-map size is image size divided by this.
    pub map_downsample: usize,
    /// Conv-mode encoder widths for the three stride-2 stages.
    pub conv_channels: [usize; 3],
    /// Standard deviation of the grid-mode feature initialisation.
    pub grid_init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { mode: EncoderMode::Grid, map_downsample: 2, conv_channels: [16, 32, 32], grid_init_std: 0.1 }
    }
}

/// Everything that fixes the shape of the learnable model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Gaussians per anchor.
    pub k: usize,
    pub n_v: usize,
    pub n_r: usize,
    pub n_g: usize,
    /// Highest wavelet level `M`.
    pub levels: usize,
    /// Samples per frustum cross-section `k_s`.
    pub samples: usize,
    pub pe_bands: usize,
    pub wavelet: WaveletFamily,
    /// Narrow frustum radius, feature-map pixels.
    pub narrow_radius: f64,
    /// Broad radius numerator, feature-map pixels × world units.
    pub broad_radius_max: f64,
    /// Broad radius floor, feature-map pixels.
    pub broad_radius_min: f64,
    pub hrfn: HrfnWidths,
    pub encoder: EncoderConfig,
    /// Anchor voxel size used when initialising from a point cloud.
    pub voxel_size: f64,
    /// Initial offsets are uniform in ±this (units of the anchor extent).
    pub init_offset: f64,
    /// Initial Gaussian scale as a fraction of the voxel size.
    pub init_scale: f64,
    pub init_opacity: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 10,
            n_v: 48,
            n_r: 32,
            n_g: 16,
            levels: 1,
            samples: 1,
            pe_bands: 4,
            wavelet: WaveletFamily::Haar,
            narrow_radius: 1.5,
            broad_radius_max: 32.0,
            broad_radius_min: 2.0,
            hrfn: HrfnWidths::default(),
            encoder: EncoderConfig::default(),
            voxel_size: 0.2,
            init_offset: 1.0,
            init_scale: 0.5,
            init_opacity: 0.5,
        }
    }
}

impl ModelConfig {
    /// Channel width of each of the `2M + 2` feature-map chunks.
    pub fn chunk_channels(&self) -> usize {
        self.n_r / (2 * self.levels + 2)
    }

    /// Feature-map `(height, width)` for an image of the given size.
    pub fn map_size(&self, width: usize, height: usize) -> (usize, usize) {
        let d = self.encoder.map_downsample.max(1);
        (height / d, width / d)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.k == 0 || self.samples == 0 || self.n_r == 0 || self.n_g == 0 {
            return fail("k, samples, n_r and n_g must be positive".into());
        }
        let pieces = 2 * self.levels + 2;
        if self.n_r % pieces != 0 {
            return fail(format!("n_r = {} is not divisible by 2M+2 = {pieces}", self.n_r));
        }
        if !(self.narrow_radius > 0.0 && self.broad_radius_max > 0.0 && self.broad_radius_min > 0.0) {
            return fail("frustum radii must be positive".into());
        }
        if self.encoder.map_downsample == 0 {
            return fail("encoder.map_downsample must be ≥ 1".into());
        }
        for (name, w) in [("m1", &self.hrfn.m1), ("m2", &self.hrfn.m2), ("m3", &self.hrfn.m3), ("m4", &self.hrfn.m4)] {
            if w.is_empty() || w.contains(&0) {
                return fail(format!("hrfn.{name} needs at least one non-zero width"));
            }
        }
        if !(self.voxel_size > 0.0) || !(self.init_opacity > 0.0 && self.init_opacity < 1.0) || !(self.init_scale > 0.0) {
            return fail("voxel_size, init_scale must be positive and init_opacity in (0, 1)".into());
        }
        Ok(())
    }

    /// Checks the image size against the map/wavelet/encoder divisibility rules.
    pub fn validate_image_size(&self, width: usize, height: usize) -> Result<()> {
        let d = self.encoder.map_downsample;
        if width % d != 0 || height % d != 0 {
            return Err(Error::InvalidConfig(format!("{width}×{height} image is not divisible by map_downsample {d}")));
        }
        let (mh, mw) = self.map_size(width, height);
        let div = 1usize << self.levels;
        if mh % div != 0 || mw % div != 0 || mh == 0 || mw == 0 {
            return Err(Error::InvalidConfig(format!("feature map {mh}×{mw} is not divisible by 2^M = {div}")));
        }
        if self.encoder.mode == EncoderMode::Conv {
            if width % 8 != 0 || height % 8 != 0 {
                return Err(Error::InvalidConfig("conv encoder needs image sides divisible by 8".into()));
            }
            if d != 2 {
                return Err(Error::InvalidConfig("conv encoder emits maps at half resolution; map_downsample must be 2".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub tile_size: usize,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { tile_size: 16, background: [0.0; 3] }
    }
}

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub ssim: f64,
    pub l1: f64,
    pub vm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ssim: 0.2, l1: 0.8, vm: 0.15 }
    }
}

/// Exponentially decaying learning rate from `start` to `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrRange {
    pub start: f64,
    pub end: f64,
}

impl LrRange {
    pub const fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub means: LrRange,
    pub offsets: LrRange,
    pub scaling: LrRange,
    pub rotation: LrRange,
    pub opacity: LrRange,
    pub intrinsic: LrRange,
    pub jitter: LrRange,
    pub fusion: LrRange,
    pub encoder: LrRange,
    pub hrfn: LrRange,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            means: LrRange::new(1.6e-4, 1.6e-6),
            offsets: LrRange::new(1.6e-4, 1.6e-6),
            scaling: LrRange::new(5e-3, 5e-3),
            rotation: LrRange::new(1e-3, 1e-3),
            opacity: LrRange::new(5e-2, 5e-2),
            intrinsic: LrRange::new(7.5e-3, 7.5e-3),
            jitter: LrRange::new(1e-4, 1e-5),
            fusion: LrRange::new(1e-4, 1e-5),
            encoder: LrRange::new(1e-4, 1e-6),
            hrfn: LrRange::new(5e-4, 5e-5),
        }
    }
}

impl LearningRates {
    pub fn get(&self, g: ParamGroup) -> LrRange {
        match g {
            ParamGroup::Means => self.means,
            ParamGroup::Offsets => self.offsets,
            ParamGroup::Scaling => self.scaling,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Intrinsic => self.intrinsic,
            ParamGroup::Jitter => self.jitter,
            ParamGroup::Fusion => self.fusion,
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Hrfn => self.hrfn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: LearningRates,
    /// Groups excluded from updates.
    pub frozen: Vec<ParamGroup>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: LearningRates::default(), frozen: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    /// Steps between checkpoints (0 = only at the end).
    pub checkpoint_every: usize,
    /// 0 = rayon default.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, seed: 0, checkpoint_every: 0, threads: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// The whole run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Loads `path` (or defaults) and applies `key=value` overrides, where
    /// keys are dotted paths such as `model.levels` and values are JSON
    /// (bare words fall back to strings).
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => serde_json::from_str::<Value>(&std::fs::read_to_string(p)?)?,
            None => serde_json::to_value(Self::default())?,
        };
        for kv in overrides {
            apply_override(&mut value, kv)?;
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.render.tile_size == 0 {
            return Err(Error::InvalidConfig("render.tile_size must be ≥ 1".into()));
        }
        let w = self.loss;
        if !(w.ssim >= 0.0 && w.l1 >= 0.0 && w.vm >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Every dotted key with its default value, for `--help`.
    pub fn documented_keys() -> Vec<(String, String)> {
        let mut out = Vec::new();
        let v = serde_json::to_value(Self::default()).expect("default config serialises");
        flatten_keys("", &v, &mut out);
        out
    }
}

fn flatten_keys(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_keys(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn apply_override(root: &mut Value, kv: &str) -> Result<()> {
    let (key, raw) = kv.split_once('=').ok_or_else(|| Error::InvalidConfig(format!("override `{kv}` is not key=value")))?;
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Error::InvalidConfig(format!("`{key}` descends into a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_match_hyperparameters() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!((c.model.k, c.model.samples, c.model.levels), (10, 1, 1));
        assert_eq!((c.model.n_v, c.model.n_r, c.model.n_g), (48, 32, 16));
        assert_eq!((c.loss.ssim, c.loss.l1, c.loss.vm), (0.2, 0.8, 0.15));
        assert_eq!(c.model.chunk_channels(), 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json_str(r#"{"model": {"kk": 3}}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::load_with_overrides(None, &["model.nope=1".into()]).is_err());
    }

    #[test]
    fn divisibility_is_checked() {
        let err = RunConfig::load_with_overrides(None, &["model.levels=2".into()]).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        let ok = RunConfig::load_with_overrides(None, &["model.levels=2".into(), "model.n_r=48".into()]).unwrap();
        assert_eq!(ok.model.chunk_channels(), 8);
        assert!(ok.model.validate_image_size(64, 64).is_ok());
        assert!(ok.model.validate_image_size(68, 68).is_err());
    }

    #[test]
    fn overrides_parse_json_and_strings() {
        let c =
            RunConfig::load_with_overrides(None, &["model.wavelet=db2".into(), "render.background=[1,1,1]".into(), "optim.frozen=[\"hrfn\"]".into()]).unwrap();
        assert_eq!(c.model.wavelet, WaveletFamily::Db2);
        assert_eq!(c.render.background, [1.0; 3]);
        assert_eq!(c.optim.frozen, vec![ParamGroup::Hrfn]);
    }

    #[test]
    fn documented_keys_cover_nested_fields() {
        let keys = RunConfig::documented_keys();
        assert!(keys.iter().any(|(k, v)| k == "model.levels" && v == "1"));
        assert!(keys.iter().any(|(k, _)| k == "optim.lr.hrfn.start"));
    }

    #[test]
    fn json_roundtrip() {
        let c = RunConfig::default();
        let back = RunConfig::from_json_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
