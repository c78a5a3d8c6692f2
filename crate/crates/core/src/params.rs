//! Parameter traversal, optimiser groups, and the binary checkpoint format
//! (little-endian f64 blob + JSON manifest of names, shapes and offsets).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{decode_f64_le, encode_f64_le};

/// Optimiser parameter groups; each has its own learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Means,
    Offsets,
    Scaling,
    Rotation,
    Opacity,
    Intrinsic,
    Jitter,
    Fusion,
    Encoder,
    Hrfn,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::Means,
        ParamGroup::Offsets,
        ParamGroup::Scaling,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Intrinsic,
        ParamGroup::Jitter,
        ParamGroup::Fusion,
        ParamGroup::Encoder,
        ParamGroup::Hrfn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Means => "means",
            ParamGroup::Offsets => "offsets",
            ParamGroup::Scaling => "scaling",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Intrinsic => "intrinsic",
            ParamGroup::Jitter => "jitter",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Hrfn => "hrfn",
        }
    }
}

/// Describes one tensor handed to a visitor.
#[derive(Debug, Clone, Copy)]
pub struct ParamInfo<'a> {
    pub name: &'a str,
    pub group: ParamGroup,
    pub shape: &'a [usize],
}

pub type Visitor<'v> = dyn FnMut(ParamInfo<'_>, &mut [f64]) + 'v;

/// Anything holding learnable tensors. The visiting order must be stable:
/// optimiser state and gradients are matched to parameters by position.
pub trait Parameterized {
    fn visit_params(&mut self, prefix: &str, f: &mut Visitor<'_>);

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, d| n += d.len());
        n
    }

    fn flatten(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params("", &mut |_, d| out.extend_from_slice(d));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let need = self.param_count();
        if need != flat.len() {
            return Err(Error::InvalidShape(format!("expected {need} values, got {}", flat.len())));
        }
        let mut at = 0;
        self.visit_params("", &mut |_, d| {
            d.copy_from_slice(&flat[at..at + d.len()]);
            at += d.len();
        });
        Ok(())
    }

    fn fill(&mut self, value: f64) {
        self.visit_params("", &mut |_, d| d.iter_mut().for_each(|v| *v = value));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub total_bytes: usize,
    pub entries: Vec<ManifestEntry>,
    /// Free-form metadata (step counter, config, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub const BLOB_FORMAT: &str = "mwgs-f64le-v1";

/// Writes `<stem>.bin` and `<stem>.json` for every tensor of `model`.
pub fn save_blob(model: &mut dyn Parameterized, stem: &Path, extra: serde_json::Value) -> Result<()> {
    let mut entries = Vec::new();
    let mut values = Vec::new();
    model.visit_params("", &mut |info, d| {
        entries.push(ManifestEntry { name: info.name.to_string(), group: info.group, shape: info.shape.to_vec(), offset: values.len() * 8 });
        values.extend_from_slice(d);
    });
    let manifest = Manifest { format: BLOB_FORMAT.into(), total_bytes: values.len() * 8, entries, extra };
    fs::write(stem.with_extension("bin"), encode_f64_le(&values))?;
    fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(stem: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?)
}

/// Loads tensors by name into `model`; every tensor of the model must be present
/// with a matching shape.
pub fn load_blob(model: &mut dyn Parameterized, stem: &Path) -> Result<Manifest> {
    let manifest = read_manifest(stem)?;
    if manifest.format != BLOB_FORMAT {
        return Err(Error::InvalidParameter(format!("unknown checkpoint format {}", manifest.format)));
    }
    let values = decode_f64_le(&fs::read(stem.with_extension("bin"))?)?;
    if values.len() * 8 != manifest.total_bytes {
        return Err(Error::InvalidShape("blob size disagrees with manifest".into()));
    }
    let by_name: BTreeMap<&str, &ManifestEntry> = manifest.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut err = None;
    model.visit_params("", &mut |info, d| {
        if err.is_some() {
            return;
        }
        match by_name.get(info.name) {
            Some(e) if e.shape == info.shape => {
                let start = e.offset / 8;
                d.copy_from_slice(&values[start..start + d.len()]);
            }
            Some(e) => err = Some(Error::InvalidShape(format!("{}: shape {:?} vs {:?}", info.name, e.shape, info.shape))),
            None => err = Some(Error::Missing(format!("tensor {} not in checkpoint", info.name))),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Toy {
        a: Vec<f64>,
        b: Vec<f64>,
    }

    impl Parameterized for Toy {
        fn visit_params(&mut self, prefix: &str, f: &mut Visitor<'_>) {
            let n = join(prefix, "a");
            f(ParamInfo { name: &n, group: ParamGroup::Hrfn, shape: &[2, 2] }, &mut self.a);
            let n = join(prefix, "b");
            f(ParamInfo { name: &n, group: ParamGroup::Encoder, shape: &[3] }, &mut self.b);
        }
    }

    #[test]
    fn blob_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let mut t = Toy { a: vec![0.1, -1e-300, 3.5e12, std::f64::consts::PI], b: vec![1.0 / 3.0, -0.0, 7.0] };
        save_blob(&mut t, &stem, serde_json::json!({"step": 4})).unwrap();
        let mut u = Toy { a: vec![0.0; 4], b: vec![0.0; 3] };
        let m = load_blob(&mut u, &stem).unwrap();
        assert_eq!(m.extra["step"], 4);
        assert_eq!(u.flatten(), t.flatten());
        assert_eq!(m.entries[1].offset, 32);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        save_blob(&mut Toy { a: vec![0.0; 4], b: vec![0.0; 3] }, &stem, serde_json::Value::Null).unwrap();
        struct Other(Vec<f64>);
        impl Parameterized for Other {
            fn visit_params(&mut self, _: &str, f: &mut Visitor<'_>) {
                f(ParamInfo { name: "a", group: ParamGroup::Hrfn, shape: &[4] }, &mut self.0);
            }
        }
        assert!(load_blob(&mut Other(vec![0.0; 4]), &stem).is_err());
    }

    #[test]
    fn flatten_and_load_flat() {
        let mut t = Toy { a: vec![1.0, 2.0, 3.0, 4.0], b: vec![5.0, 6.0, 7.0] };
        assert_eq!(t.param_count(), 7);
        let mut flat = t.flatten();
        flat.reverse();
        t.load_flat(&flat).unwrap();
        assert_eq!(t.a, vec![7.0, 6.0, 5.0, 4.0]);
        assert!(t.load_flat(&[1.0]).is_err());
    }
}
