//! Appearance encoder: per reference image it yields the global code `f_g`,
//! the refined-feature source map and the visibility map.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{EncoderMode, ModelConfig};
use crate::error::{Error, Result};
use crate::image::{write_raw_f64, Image};
use crate::map::FeatureMap;
use crate::nn::{relu_map, relu_map_backward, upsample2, upsample2_backward, Conv2d, Mlp, MlpTrace};
use crate::params::{join, ParamGroup, ParamInfo, Parameterized, Visitor};
use crate::scene::sigmoid;

/// Appearance codes extracted from one reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceBundle {
    pub global: Vec<f64>,
    /// `n_r × H_F × W_F`.
    pub map: FeatureMap,
    /// `1 × H × W`, strictly inside (0, 1).
    pub visibility: FeatureMap,
}

impl AppearanceBundle {
    /// Gradient accumulator with the same shapes.
    pub fn zeros_like(&self) -> Self {
        Self { global: vec![0.0; self.global.len()], map: self.map.zeros_like(), visibility: self.visibility.zeros_like() }
    }

    /// Writes `global.json`, `map.f64` and `vm.f64` (each raw dump with a shape sidecar) into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("global.json"), serde_json::to_vec(&self.global)?)?;
        write_raw_f64(dir.join("map.f64"), &self.map.shape(), &self.map.data)?;
        write_raw_f64(dir.join("vm.f64"), &self.visibility.shape(), &self.visibility.data)?;
        Ok(())
    }
}

/// Learnable tensors of one image in grid mode.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub map: FeatureMap,
    pub vm_logits: FeatureMap,
}

/// Conv-mode network: strided encoder, map decoder and visibility decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub encoder: Vec<Conv2d>,
    pub map_decoder: Vec<Conv2d>,
    pub vm_decoder: Vec<Conv2d>,
}

impl ConvNet {
    fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let [c1, c2, c3] = cfg.encoder.conv_channels;
        Self {
            encoder: vec![Conv2d::new(3, c1, 2, rng), Conv2d::new(c1, c2, 2, rng), Conv2d::new(c2, c3, 2, rng)],
            map_decoder: vec![Conv2d::new(c3, c2, 1, rng), Conv2d::new(c2, cfg.n_r, 1, rng)],
            vm_decoder: vec![Conv2d::new(c3, c2, 1, rng), Conv2d::new(c2, c1, 1, rng), Conv2d::new(c1, 1, 1, rng)],
        }
    }
}

/// Intermediates of one conv-mode pass.
#[derive(Debug, Clone)]
struct ConvTrace {
    /// Inputs to each encoder conv, then the bottleneck.
    enc: Vec<FeatureMap>,
    /// Per decoder stage: the upsampled input and the stage output.
    map_dec: Vec<(FeatureMap, FeatureMap)>,
    vm_dec: Vec<(FeatureMap, FeatureMap)>,
}

/// What [`Encoder::encode`] keeps for the reverse pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    image_id: Option<usize>,
    global: MlpTrace,
    pooled_from: [usize; 3],
    conv: Option<ConvTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub mode: EncoderMode,
    pub width: usize,
    pub height: usize,
    /// Pooled features → hidden `2 n_g` → `n_g`.
    pub global_mlp: Mlp,
    pub grids: Vec<GridEntry>,
    pub conv: Option<ConvNet>,
}

impl Encoder {
    /// An encoder for `num_images` training images of `width × height`.
    pub fn new(cfg: &ModelConfig, num_images: usize, width: usize, height: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate_image_size(width, height)?;
        let (mh, mw) = cfg.map_size(width, height);
        let pooled = match cfg.encoder.mode {
            EncoderMode::Grid => cfg.n_r,
            EncoderMode::Conv => cfg.encoder.conv_channels[2],
        };
        let global_mlp = Mlp::new(pooled, &[2 * cfg.n_g, cfg.n_g], false, ParamGroup::Encoder, rng);
        let (grids, conv) = match cfg.encoder.mode {
            EncoderMode::Grid => {
                let normal = Normal::new(0.0, cfg.encoder.grid_init_std).map_err(|e| Error::InvalidConfig(format!("grid_init_std: {e}")))?;
                let grids = (0..num_images)
                    .map(|_| GridEntry {
                        map: FeatureMap::from_fn(cfg.n_r, mh, mw, |_, _, _| normal.sample(rng)),
                        vm_logits: FeatureMap::zeros(1, height, width),
                    })
                    .collect();
                (grids, None)
            }
            EncoderMode::Conv => (Vec::new(), Some(ConvNet::new(cfg, rng))),
        };
        Ok(Self { mode: cfg.encoder.mode, width, height, global_mlp, grids, conv })
    }

    pub fn num_images(&self) -> usize {
        self.grids.len()
    }

    /// Gradient accumulator of identical layout.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// Encodes a reference image. Grid mode needs a registered `image_id`
    /// and ignores the pixels; conv mode reads the pixels only.
    pub fn encode(&self, image_id: Option<usize>, image: &Image) -> Result<(AppearanceBundle, EncoderTrace)> {
        match self.mode {
            EncoderMode::Grid => {
                let id = image_id.ok_or_else(|| Error::Missing("grid-mode encoder only knows registered training images".into()))?;
                let entry = self.grids.get(id).ok_or_else(|| Error::Missing(format!("image id {id} is not registered with the encoder")))?;
                let (global, trace) = self.global_feature(&entry.map);
                let mut visibility = entry.vm_logits.clone();
                visibility.data.iter_mut().for_each(|v| *v = sigmoid(*v));
                let bundle = AppearanceBundle { global, map: entry.map.clone(), visibility };
                Ok((bundle, EncoderTrace { image_id: Some(id), global: trace, pooled_from: entry.map.shape(), conv: None }))
            }
            EncoderMode::Conv => {
                if image.width != self.width || image.height != self.height {
                    return Err(Error::InvalidShape(format!("encoder expects {}×{} images, got {}×{}", self.width, self.height, image.width, image.height)));
                }
                let net = self.conv.as_ref().ok_or_else(|| Error::InvalidState("conv network missing".into()))?;
                let mut enc = vec![image_to_map(image)];
                for conv in &net.encoder {
                    let y = relu_map(&conv.forward(enc.last().unwrap()));
                    enc.push(y);
                }
                let bottleneck = enc.last().unwrap().clone();
                let (global, gtrace) = self.global_feature(&bottleneck);
                let map_dec = run_decoder(&net.map_decoder, &bottleneck);
                let vm_dec = run_decoder(&net.vm_decoder, &bottleneck);
                let map = map_dec.last().unwrap().1.clone();
                let mut visibility = vm_dec.last().unwrap().1.clone();
                visibility.data.iter_mut().for_each(|v| *v = sigmoid(*v));
                let bundle = AppearanceBundle { global, map, visibility };
                let trace = EncoderTrace { image_id, global: gtrace, pooled_from: bottleneck.shape(), conv: Some(ConvTrace { enc, map_dec, vm_dec }) };
                Ok((bundle, trace))
            }
        }
    }

    /// Spatial mean of `features` followed by the global MLP.
    pub fn global_feature(&self, features: &FeatureMap) -> (Vec<f64>, MlpTrace) {
        let pooled = features.channel_means();
        let trace = self.global_mlp.forward(&pooled);
        (trace.output().to_vec(), trace)
    }

    /// Accumulates parameter gradients for one encode call into `grad`.
    pub fn backward(&self, bundle: &AppearanceBundle, trace: &EncoderTrace, upstream: &AppearanceBundle, grad: &mut Encoder) -> Result<()> {
        let d_pooled = self.global_mlp.backward(&trace.global, &upstream.global, &mut grad.global_mlp);
        let [c, h, w] = trace.pooled_from;
        let inv = 1.0 / (h * w) as f64;
        let d_pool_map = FeatureMap::from_fn(c, h, w, |ch, _, _| d_pooled[ch] * inv);
        let mut d_vm_logits = upstream.visibility.clone();
        for (g, &v) in d_vm_logits.data.iter_mut().zip(&bundle.visibility.data) {
            *g *= v * (1.0 - v);
        }
        match self.mode {
            EncoderMode::Grid => {
                let id = trace.image_id.ok_or_else(|| Error::InvalidState("grid trace without image id".into()))?;
                let g = grad.grids.get_mut(id).ok_or_else(|| Error::Missing(format!("image id {id}")))?;
                g.map.add_assign(&upstream.map);
                g.map.add_assign(&d_pool_map);
                g.vm_logits.add_assign(&d_vm_logits);
            }
            EncoderMode::Conv => {
                let net = self.conv.as_ref().ok_or_else(|| Error::InvalidState("conv network missing".into()))?;
                let gnet = grad.conv.as_mut().ok_or_else(|| Error::InvalidState("conv gradient missing".into()))?;
                let ct = trace.conv.as_ref().ok_or_else(|| Error::InvalidState("conv trace missing".into()))?;
                let mut d_bottleneck = d_pool_map;
                d_bottleneck.add_assign(&decoder_backward(&net.map_decoder, &ct.map_dec, &upstream.map, &mut gnet.map_decoder));
                d_bottleneck.add_assign(&decoder_backward(&net.vm_decoder, &ct.vm_dec, &d_vm_logits, &mut gnet.vm_decoder));
                let mut d = d_bottleneck;
                for i in (0..net.encoder.len()).rev() {
                    let d_pre = relu_map_backward(&ct.enc[i + 1], &d);
                    d = net.encoder[i].backward(&ct.enc[i], &d_pre, &mut gnet.encoder[i]);
                }
            }
        }
        Ok(())
    }
}

fn image_to_map(image: &Image) -> FeatureMap {
    FeatureMap::from_fn(3, image.height, image.width, |c, y, x| image.data[(y * image.width + x) * 3 + c])
}

/// Upsample + conv per stage, ReLU on every stage but the last.
fn run_decoder(convs: &[Conv2d], input: &FeatureMap) -> Vec<(FeatureMap, FeatureMap)> {
    let mut out: Vec<(FeatureMap, FeatureMap)> = Vec::with_capacity(convs.len());
    let mut x = input.clone();
    for (i, conv) in convs.iter().enumerate() {
        let up = upsample2(&x);
        let mut y = conv.forward(&up);
        if i + 1 < convs.len() {
            y = relu_map(&y);
        }
        x = y.clone();
        out.push((up, y));
    }
    out
}

fn decoder_backward(convs: &[Conv2d], trace: &[(FeatureMap, FeatureMap)], upstream: &FeatureMap, grads: &mut [Conv2d]) -> FeatureMap {
    let mut d = upstream.clone();
    for i in (0..convs.len()).rev() {
        if i + 1 < convs.len() {
            d = relu_map_backward(&trace[i].1, &d);
        }
        let d_up = convs[i].backward(&trace[i].0, &d, &mut grads[i]);
        d = upsample2_backward(&d_up);
    }
    d
}

impl Parameterized for Encoder {
    fn visit_params(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.global_mlp.visit_params(&join(prefix, "global_mlp"), f);
        for (i, g) in self.grids.iter_mut().enumerate() {
            let shape = g.map.shape();
            let name = join(prefix, &format!("grid{i}.map"));
            f(ParamInfo { name: &name, group: ParamGroup::Encoder, shape: &shape }, &mut g.map.data);
            let shape = g.vm_logits.shape();
            let name = join(prefix, &format!("grid{i}.vm_logits"));
            f(ParamInfo { name: &name, group: ParamGroup::Encoder, shape: &shape }, &mut g.vm_logits.data);
        }
        if let Some(net) = &mut self.conv {
            for (i, c) in net.encoder.iter_mut().enumerate() {
                c.visit_params(&join(prefix, &format!("conv.encoder{i}")), f);
            }
            for (i, c) in net.map_decoder.iter_mut().enumerate() {
                c.visit_params(&join(prefix, &format!("conv.map_decoder{i}")), f);
            }
            for (i, c) in net.vm_decoder.iter_mut().enumerate() {
                c.visit_params(&join(prefix, &format!("conv.vm_decoder{i}")), f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(mode: EncoderMode) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.encoder.mode = mode;
        cfg.encoder.conv_channels = [3, 4, 4];
        cfg.n_r = 4;
        cfg.n_g = 3;
        cfg
    }

    fn test_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn grid_vm_starts_at_half_and_ids_are_checked() {
        let cfg = small_cfg(EncoderMode::Grid);
        let enc = Encoder::new(&cfg, 2, 8, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = Image::new(8, 8);
        let (b, _) = enc.encode(Some(1), &img).unwrap();
        assert!(b.visibility.data.iter().all(|&v| v == 0.5));
        assert_eq!(b.map.shape(), [4, 4, 4]);
        assert_eq!(b.global.len(), 3);
        assert!(matches!(enc.encode(Some(2), &img), Err(Error::Missing(_))));
        assert!(matches!(enc.encode(None, &img), Err(Error::Missing(_))));
    }

    #[test]
    fn grid_images_are_disjoint() {
        let cfg = small_cfg(EncoderMode::Grid);
        let mut enc = Encoder::new(&cfg, 2, 8, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let img = Image::new(8, 8);
        let before = enc.encode(Some(0), &img).unwrap().0;
        enc.grids[1].map.data.iter_mut().for_each(|v| *v += 1.0);
        enc.grids[1].vm_logits.data[3] = 4.0;
        assert_eq!(enc.encode(Some(0), &img).unwrap().0, before);
    }

    #[test]
    fn global_feature_pools_spatially() {
        let cfg = small_cfg(EncoderMode::Grid);
        let enc = Encoder::new(&cfg, 1, 8, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let f = FeatureMap::from_fn(4, 3, 5, |c, y, x| (c * 31 + y * 7 + x) as f64 * 0.1);
        let permuted = FeatureMap::from_fn(4, 3, 5, |c, y, x| {
            let i = (y * 5 + x + 7) % 15;
            f.at(c, i / 5, i % 5)
        });
        assert_eq!(enc.global_feature(&f).0, enc.global_feature(&permuted).0);
        let constant = FeatureMap::from_fn(4, 2, 2, |c, _, _| c as f64);
        assert_eq!(constant.channel_means(), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(enc.global_mlp.layers[0].outputs, 6);
    }

    fn bundle_loss(b: &AppearanceBundle, up: &AppearanceBundle) -> f64 {
        b.global.iter().zip(&up.global).map(|(a, c)| a * c).sum::<f64>() + b.map.dot(&up.map) + b.visibility.dot(&up.visibility)
    }

    fn random_upstream(b: &AppearanceBundle, seed: u64) -> AppearanceBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut up = b.zeros_like();
        up.global.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        up.map.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        up.visibility.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        up
    }

    fn check_fd(mode: EncoderMode, seed: u64) {
        let cfg = small_cfg(mode);
        let mut enc = Encoder::new(&cfg, 2, 8, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        if let Some(net) = &mut enc.conv {
            // non-zero biases keep ReLUs away from exact kinks
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            for c in net.encoder.iter_mut().chain(&mut net.map_decoder).chain(&mut net.vm_decoder) {
                c.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
            }
        }
        let img = test_image(8, 8, seed + 2);
        let (b, trace) = enc.encode(Some(1), &img).unwrap();
        let up = random_upstream(&b, seed + 3);
        let mut grad = enc.zeros_like();
        enc.backward(&b, &trace, &up, &mut grad).unwrap();
        let flat = enc.flatten();
        let g = grad.flatten();
        let h = 1e-6;
        let mut probe = enc.clone();
        let stride = (flat.len() / 150).max(1);
        for i in (0..flat.len()).step_by(stride) {
            let mut f = flat.clone();
            f[i] += h;
            probe.load_flat(&f).unwrap();
            let lp = bundle_loss(&probe.encode(Some(1), &img).unwrap().0, &up);
            f[i] -= 2.0 * h;
            probe.load_flat(&f).unwrap();
            let lm = bundle_loss(&probe.encode(Some(1), &img).unwrap().0, &up);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn grid_backward_matches_finite_differences() {
        check_fd(EncoderMode::Grid, 10);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        check_fd(EncoderMode::Conv, 20);
    }

    #[test]
    fn conv_mode_shapes() {
        let cfg = small_cfg(EncoderMode::Conv);
        let enc = Encoder::new(&cfg, 0, 16, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (b, _) = enc.encode(None, &test_image(16, 8, 5)).unwrap();
        assert_eq!(b.map.shape(), [4, 4, 8]);
        assert_eq!(b.visibility.shape(), [1, 8, 16]);
        assert!(b.visibility.data.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(enc.encode(None, &test_image(8, 8, 5)).is_err());
    }
}
