//! Synthetic multi-appearance datasets: known Gaussian blobs rendered from a
//! camera ring, recoloured per appearance condition, with optional
//! rectangular occluders whose masks are kept for evaluation only.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::map::FeatureMap;
use crate::par;
use crate::raster::{project_all, render};
use crate::scene::{build_covariance, Camera, GaussianPrimitive};

/// Everything that determines a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub blobs: usize,
    /// Blob centres are uniform in `[-extent, extent]³`.
    pub blob_extent: f64,
    pub blob_scale: [f64; 2],
    /// Training cameras on the ring.
    pub cameras: usize,
    /// Held-out cameras, placed between training cameras.
    pub test_cameras: usize,
    pub radius: f64,
    /// Camera height above the ring plane.
    pub elevation: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Number of appearance conditions; image `i` uses condition `i mod conditions`.
    pub conditions: usize,
    pub gain: [f64; 2],
    pub gamma: [f64; 2],
    /// Per-channel tint drawn from `[0, tint]`.
    pub tint: f64,
    pub occluder_probability: f64,
    /// Occluder side as a fraction of the image side.
    pub occluder_size: [f64; 2],
    /// Fixed occluder colour; random per occluder when absent.
    pub occluder_color: Option<[f64; 3]>,
    /// Points drawn per blob for the initial point cloud (the first is the blob centre).
    pub points_per_blob: usize,
    pub background: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            blobs: 20,
            blob_extent: 0.8,
            blob_scale: [0.08, 0.25],
            cameras: 8,
            test_cameras: 2,
            radius: 4.0,
            elevation: 1.2,
            width: 64,
            height: 64,
            focal: 70.0,
            conditions: 2,
            gain: [0.5, 1.5],
            gamma: [0.7, 1.4],
            tint: 0.02,
            occluder_probability: 0.0,
            occluder_size: [0.2, 0.4],
            occluder_color: None,
            points_per_blob: 1,
            background: [0.0; 3],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.blobs == 0 || self.cameras == 0 || self.conditions == 0 || self.points_per_blob == 0 {
            return fail("blobs, cameras, conditions and points_per_blob must be positive");
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) || !(self.radius > 0.0) {
            return fail("image size, focal length and ring radius must be positive");
        }
        if !(self.gain[0] > 0.0 && self.gain[0] <= self.gain[1]) {
            return fail("gain range must be positive and ordered");
        }
        if !(self.gamma[0] > 0.0 && self.gamma[0] <= self.gamma[1]) {
            return fail("gamma range must be positive and ordered");
        }
        if !(self.blob_scale[0] > 0.0 && self.blob_scale[0] <= self.blob_scale[1]) {
            return fail("blob scale range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.occluder_probability) {
            return fail("occluder_probability must lie in [0, 1]");
        }
        if !(self.occluder_size[0] > 0.0 && self.occluder_size[0] <= self.occluder_size[1] && self.occluder_size[1] <= 1.0) {
            return fail("occluder_size must be an ordered range inside (0, 1]");
        }
        if !(self.tint >= 0.0 && self.blob_extent >= 0.0) {
            return fail("tint and blob_extent must be non-negative");
        }
        Ok(())
    }
}

/// Per-condition colour transform `clamp((gain ⊙ x)^γ + tint)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub gain: [f64; 3],
    pub gamma: f64,
    pub tint: [f64; 3],
}

impl Appearance {
    pub const IDENTITY: Appearance = Appearance { gain: [1.0; 3], gamma: 1.0, tint: [0.0; 3] };

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = img.clone();
        for px in out.data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = ((self.gain[c] * px[c]).max(0.0).powf(self.gamma) + self.tint[c]).clamp(0.0, 1.0);
            }
        }
        out
    }

    /// Inverse on unclamped values.
    pub fn invert(&self, img: &Image) -> Image {
        let mut out = img.clone();
        for px in out.data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - self.tint[c]).max(0.0).powf(1.0 / self.gamma) / self.gain[c];
            }
        }
        out
    }
}

/// Images, cameras and the initial point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub train_cameras: Vec<Camera>,
    pub train_images: Vec<Image>,
    /// Occluder masks (white = occluded). Evaluation only.
    pub masks: Vec<Image>,
    pub test_cameras: Vec<Camera>,
    pub test_images: Vec<Image>,
    /// Training image whose bundle is used for each held-out view.
    pub test_reference: Vec<usize>,
    pub conditions: Vec<usize>,
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CamerasFile {
    width: usize,
    height: usize,
    train: Vec<Camera>,
    test: Vec<Camera>,
    test_reference: Vec<usize>,
    conditions: Vec<usize>,
}

/// Identifies a dataset directory; lists every file with its SHA-256.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub spec: SynthSpec,
    pub appearances: Vec<Appearance>,
    pub files: BTreeMap<String, String>,
}

pub const DATASET_FORMAT: &str = "mwgs-dataset-v1";

fn random_quaternion(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

fn ring_camera(spec: &SynthSpec, angle: f64) -> Result<Camera> {
    let eye = [spec.radius * angle.cos(), spec.radius * angle.sin(), spec.elevation];
    Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], spec.width, spec.height, spec.focal)
}

/// Ground-truth blobs of `spec`, drawn in a fixed order from its seed.
pub fn ground_truth_blobs(spec: &SynthSpec, rng: &mut impl Rng) -> Result<Vec<GaussianPrimitive>> {
    (0..spec.blobs)
        .map(|i| {
            let e = spec.blob_extent;
            let mean = Vector3::from_fn(|_, _| rng.random_range(-e..=e));
            let q = random_quaternion(rng);
            let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(spec.blob_scale[0]..=spec.blob_scale[1]));
            let opacity = rng.random_range(0.6..0.95);
            let color = std::array::from_fn(|_| rng.random_range(0.15..0.95));
            Ok(GaussianPrimitive { mean, cov: build_covariance(&q, &s)?, opacity, color, source: (i, 0) })
        })
        .collect()
}

fn stamp_occluder(img: &mut Image, mask: &mut Image, spec: &SynthSpec, rng: &mut impl Rng) {
    let fw = rng.random_range(spec.occluder_size[0]..=spec.occluder_size[1]);
    let fh = rng.random_range(spec.occluder_size[0]..=spec.occluder_size[1]);
    let w = ((fw * img.width as f64).round() as usize).clamp(1, img.width);
    let h = ((fh * img.height as f64).round() as usize).clamp(1, img.height);
    let x0 = rng.random_range(0..=img.width - w);
    let y0 = rng.random_range(0..=img.height - h);
    let color = spec.occluder_color.unwrap_or_else(|| std::array::from_fn(|_| rng.random_range(0.0..1.0)));
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            img.set_pixel(x, y, color);
            mask.set_pixel(x, y, [1.0; 3]);
        }
    }
}

fn quantized(img: &Image) -> Image {
    Image::from_rgb8(img.width, img.height, &img.to_rgb8()).expect("same size")
}

/// Renders the dataset described by `spec`. Images are quantised to 8 bits
/// so the in-memory dataset equals what [`Dataset::load`] reads back.
pub fn synthesize(spec: &SynthSpec) -> Result<(Dataset, Vec<Appearance>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let blobs = ground_truth_blobs(spec, &mut rng)?;
    let appearances: Vec<Appearance> = (0..spec.conditions)
        .map(|_| Appearance {
            gain: std::array::from_fn(|_| rng.random_range(spec.gain[0]..=spec.gain[1])),
            gamma: rng.random_range(spec.gamma[0]..=spec.gamma[1]),
            tint: std::array::from_fn(|_| rng.random_range(0.0..=spec.tint)),
        })
        .collect();
    let mut points = Vec::with_capacity(spec.blobs * spec.points_per_blob);
    for b in &blobs {
        points.push([b.mean.x, b.mean.y, b.mean.z]);
        let l = b.cov.cholesky().map(|c| c.l()).unwrap_or_else(nalgebra::Matrix3::zeros);
        for _ in 1..spec.points_per_blob {
            let z = Vector3::from_fn(|_, _| rng.random_range(-1.5..1.5));
            let p = b.mean + l * z;
            points.push([p.x, p.y, p.z]);
        }
    }
    let step = std::f64::consts::TAU / spec.cameras as f64;
    let train_cameras = (0..spec.cameras).map(|i| ring_camera(spec, step * i as f64)).collect::<Result<Vec<_>>>()?;
    let test_cameras = (0..spec.test_cameras)
        .map(|i| ring_camera(spec, step * (i as f64 + 0.5) * spec.cameras as f64 / spec.test_cameras.max(1) as f64))
        .collect::<Result<Vec<_>>>()?;
    let raw = |cams: &[Camera]| -> Result<Vec<Image>> {
        par::map_indexed(cams.len(), |i| {
            let splats = project_all(&cams[i], &blobs);
            render(spec.width, spec.height, &splats, spec.background, 16).map(|b| b.image)
        })
        .into_iter()
        .collect()
    };
    let conditions: Vec<usize> = (0..spec.cameras).map(|i| i % spec.conditions).collect();
    let mut train_images = Vec::with_capacity(spec.cameras);
    let mut masks = Vec::with_capacity(spec.cameras);
    for (i, img) in raw(&train_cameras)?.into_iter().enumerate() {
        let mut img = appearances[conditions[i]].apply(&img);
        let mut mask = Image::new(spec.width, spec.height);
        if rng.random_bool(spec.occluder_probability) {
            stamp_occluder(&mut img, &mut mask, spec, &mut rng);
        }
        train_images.push(quantized(&img));
        masks.push(mask);
    }
    let test_reference: Vec<usize> = (0..spec.test_cameras).map(|i| i % spec.conditions.min(spec.cameras)).collect();
    let test_images = raw(&test_cameras)?.into_iter().enumerate().map(|(i, img)| quantized(&appearances[conditions[test_reference[i]]].apply(&img))).collect();
    let data =
        Dataset { width: spec.width, height: spec.height, train_cameras, train_images, masks, test_cameras, test_images, test_reference, conditions, points };
    Ok((data, appearances))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Dataset {
    /// Writes the directory layout and a manifest of file hashes, last.
    pub fn write(&self, dir: &Path, spec: &SynthSpec, appearances: &[Appearance]) -> Result<DatasetManifest> {
        let mut files = BTreeMap::new();
        let mut put = |rel: String, bytes: Vec<u8>| -> Result<()> {
            let path = dir.join(&rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            files.insert(rel, sha256_hex(&bytes));
            fs::write(path, bytes)?;
            Ok(())
        };
        for (i, img) in self.train_images.iter().enumerate() {
            put(format!("images/{i:03}.ppm"), img.encode_ppm())?;
        }
        for (i, m) in self.masks.iter().enumerate() {
            put(format!("masks/{i:03}.ppm"), m.encode_ppm())?;
        }
        for (i, img) in self.test_images.iter().enumerate() {
            put(format!("test/{i:03}.ppm"), img.encode_ppm())?;
        }
        let cams = CamerasFile {
            width: self.width,
            height: self.height,
            train: self.train_cameras.clone(),
            test: self.test_cameras.clone(),
            test_reference: self.test_reference.clone(),
            conditions: self.conditions.clone(),
        };
        put("cameras.json".into(), serde_json::to_vec_pretty(&cams)?)?;
        put("points.json".into(), serde_json::to_vec(&self.points)?)?;
        let manifest = DatasetManifest { format: DATASET_FORMAT.into(), spec: spec.clone(), appearances: appearances.to_vec(), files };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Reads a dataset directory. Masks are optional.
    pub fn load(dir: &Path) -> Result<Self> {
        let cams_path = dir.join("cameras.json");
        if !cams_path.exists() {
            return Err(Error::Missing(format!("{} has no cameras.json", dir.display())));
        }
        let cams: CamerasFile = serde_json::from_slice(&fs::read(cams_path)?)?;
        let read_all = |sub: &str, n: usize| -> Result<Vec<Image>> { (0..n).map(|i| Image::read_ppm(dir.join(format!("{sub}/{i:03}.ppm")))).collect() };
        let train_images = read_all("images", cams.train.len())?;
        let masks = if dir.join("masks").is_dir() { read_all("masks", cams.train.len())? } else { Vec::new() };
        let test_images = read_all("test", cams.test.len())?;
        let points: Vec<[f64; 3]> = serde_json::from_slice(&fs::read(dir.join("points.json"))?)?;
        for img in train_images.iter().chain(&test_images) {
            if img.width != cams.width || img.height != cams.height {
                return Err(Error::InvalidShape(format!("image is {}×{}, cameras.json says {}×{}", img.width, img.height, cams.width, cams.height)));
            }
        }
        for c in cams.train.iter().chain(&cams.test) {
            c.validate()?;
        }
        if cams.test_reference.iter().any(|&r| r >= cams.train.len()) || cams.test_reference.len() != cams.test.len() {
            return Err(Error::InvalidConfig("test_reference must name one training image per test view".into()));
        }
        Ok(Self {
            width: cams.width,
            height: cams.height,
            train_cameras: cams.train,
            train_images,
            masks,
            test_cameras: cams.test,
            test_images,
            test_reference: cams.test_reference,
            conditions: cams.conditions,
            points,
        })
    }

    /// Number of training images carrying an occluder.
    pub fn occluded_count(&self) -> usize {
        self.masks.iter().filter(|m| m.data.iter().any(|&v| v > 0.5)).count()
    }
}

/// Mean visibility on occluded and on static pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub occluded_mean: f64,
    pub static_mean: f64,
    /// `static_mean − occluded_mean`.
    pub separation: f64,
}

pub fn eval_vm_separation(vms: &[FeatureMap], masks: &[Image]) -> Result<Separation> {
    if masks.is_empty() || masks.len() != vms.len() {
        return Err(Error::Missing(format!("{} visibility maps but {} occluder masks", vms.len(), masks.len())));
    }
    let (mut occ, mut n_occ, mut stat, mut n_stat) = (0.0, 0usize, 0.0, 0usize);
    for (vm, mask) in vms.iter().zip(masks) {
        if vm.data.len() != mask.width * mask.height {
            return Err(Error::InvalidShape("visibility map and mask sizes differ".into()));
        }
        for (p, &v) in vm.data.iter().enumerate() {
            if mask.data[3 * p] > 0.5 {
                occ += v;
                n_occ += 1;
            } else {
                stat += v;
                n_stat += 1;
            }
        }
    }
    if n_occ == 0 || n_stat == 0 {
        return Err(Error::Missing("masks contain no occluded (or no static) pixels".into()));
    }
    let (o, s) = (occ / n_occ as f64, stat / n_stat as f64);
    Ok(Separation { occluded_mean: o, static_mean: s, separation: s - o })
}

/// Deterministic shuffle used for per-epoch view order.
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}
