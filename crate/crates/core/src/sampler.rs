//! Micro-macro wavelet sampling: the feature map is cut into `2M + 2`
//! channel chunks, chunk pairs are decomposed into wavelet packets per
//! stage, and every anchor reads each sub-band through a narrow and a broad
//! frustum around its projection.

use nalgebra::{Matrix2x3, Vector2, Vector3};

use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::map::FeatureMap;
use crate::scene::{Anchor, Camera, NEAR_PLANE};
use crate::wavelet::{wavelet_packet, wavelet_packet_backward, FilterPair};

/// Frustum radii, in pixels of the level-0 feature map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrustumConfig {
    pub narrow_radius: f64,
    pub broad_radius_max: f64,
    pub broad_radius_min: f64,
}

impl FrustumConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self { narrow_radius: cfg.narrow_radius, broad_radius_max: cfg.broad_radius_max, broad_radius_min: cfg.broad_radius_min }
    }

    /// `max(Ṙ_max / distance, Ṙ_min)`.
    pub fn broad_radius(&self, distance: f64) -> f64 {
        (self.broad_radius_max / distance).max(self.broad_radius_min)
    }
}

/// Contiguous channel slices of equal width.
pub fn split_feature_map(map: &FeatureMap, levels: usize) -> Result<Vec<FeatureMap>> {
    let pieces = 2 * levels + 2;
    if map.channels % pieces != 0 {
        return Err(Error::InvalidConfig(format!("{} channels cannot be split into 2M+2 = {pieces} chunks", map.channels)));
    }
    let w = map.channels / pieces;
    Ok((0..pieces).map(|i| map.channel_slice(i * w, w)).collect())
}

/// Per stage `m`: the packet of chunk `2m` (narrow) and of chunk `2m + 1` (broad).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: usize,
    pub narrow: Vec<Vec<FeatureMap>>,
    pub broad: Vec<Vec<FeatureMap>>,
}

impl FeaturePyramid {
    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<Vec<FeatureMap>>| v.iter().map(|s| s.iter().map(FeatureMap::zeros_like).collect()).collect();
        Self { levels: self.levels, narrow: z(&self.narrow), broad: z(&self.broad) }
    }

    /// Level-0 map `(height, width)`.
    pub fn base_size(&self) -> (usize, usize) {
        (self.narrow[0][0].height, self.narrow[0][0].width)
    }

    pub fn chunk_channels(&self) -> usize {
        self.narrow[0][0].channels
    }
}

pub fn build_pyramid(chunks: &[FeatureMap], levels: usize, filters: &FilterPair) -> Result<FeaturePyramid> {
    if chunks.len() != 2 * levels + 2 {
        return shape_err(format!("expected {} chunks, got {}", 2 * levels + 2, chunks.len()));
    }
    let mut narrow = Vec::with_capacity(levels + 1);
    let mut broad = Vec::with_capacity(levels + 1);
    for m in 0..=levels {
        narrow.push(wavelet_packet(&chunks[2 * m], m, filters)?);
        broad.push(wavelet_packet(&chunks[2 * m + 1], m, filters)?);
    }
    Ok(FeaturePyramid { levels, narrow, broad })
}

/// Splits and decomposes a feature map in one go.
pub fn pyramid_from_map(map: &FeatureMap, levels: usize, filters: &FilterPair) -> Result<FeaturePyramid> {
    build_pyramid(&split_feature_map(map, levels)?, levels, filters)
}

/// Maps sub-band gradients back to the feature map they came from.
pub fn pyramid_backward(grad: &FeaturePyramid, filters: &FilterPair) -> Result<FeatureMap> {
    let mut chunks = Vec::with_capacity(2 * grad.levels + 2);
    for m in 0..=grad.levels {
        chunks.push(wavelet_packet_backward(&grad.narrow[m], m, filters)?);
        chunks.push(wavelet_packet_backward(&grad.broad[m], m, filters)?);
    }
    FeatureMap::concat_channels(&chunks)
}

/// Image-to-map scale factors `(W_F / W, H_F / H)`.
fn map_scale(cam: &Camera, map_size: (usize, usize)) -> (f64, f64) {
    (map_size.1 as f64 / cam.width as f64, map_size.0 as f64 / cam.height as f64)
}

/// Projects `x` into level-`m` feature-map coordinates; `None` behind the camera.
pub fn project_to_map(x: &Vector3<f64>, cam: &Camera, map_size: (usize, usize), level: usize) -> Option<[f64; 2]> {
    let t = cam.world_to_camera(x);
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let (sx, sy) = map_scale(cam, map_size);
    let s = 0.5f64.powi(level as i32);
    Some([s * sx * (cam.fx * t.x / t.z + cam.cx), s * sy * (cam.fy * t.y / t.z + cam.cy)])
}

/// `∂p̂ / ∂x` for level 0.
fn project_to_map_jacobian(x: &Vector3<f64>, cam: &Camera, map_size: (usize, usize)) -> Matrix2x3<f64> {
    let t = cam.world_to_camera(x);
    let (sx, sy) = map_scale(cam, map_size);
    let (z, z2) = (t.z, t.z * t.z);
    let j = Matrix2x3::new(sx * cam.fx / z, 0.0, -sx * cam.fx * t.x / z2, 0.0, sy * cam.fy / z, -sy * cam.fy * t.y / z2);
    j * cam.rotation()
}

/// Narrow-frustum sample position at level 0.
pub fn narrow_position(p: [f64; 2], nc: [f64; 2], radius: f64) -> [f64; 2] {
    [p[0] + radius * nc[0].tanh(), p[1] + radius * nc[1].tanh()]
}

/// Broad-frustum sample position at level 0: the projection is scaled about
/// the map origin so each coordinate moves by at most `radius`.
pub fn broad_position(p: [f64; 2], bc: [f64; 2], radius: f64) -> [f64; 2] {
    let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
    if r == 0.0 {
        return p;
    }
    [p[0] * (1.0 + radius / r * bc[0].tanh()), p[1] * (1.0 + radius / r * bc[1].tanh())]
}

/// Averages bilinear samples of `map` at `positions`.
pub fn sample_average(map: &FeatureMap, positions: &[[f64; 2]]) -> Vec<f64> {
    let mut out = vec![0.0; map.channels];
    for p in positions {
        for (o, v) in out.iter_mut().zip(map.sample_bilinear(p[0], p[1])) {
            *o += v;
        }
    }
    let inv = 1.0 / positions.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// Narrow-frustum read of one sub-band map: `k_s` jittered samples averaged.
pub fn sample_narrow(p: [f64; 2], map: &FeatureMap, nc: &[f64], radius: f64) -> Vec<f64> {
    let pos: Vec<[f64; 2]> = nc.chunks_exact(2).map(|c| narrow_position(p, [c[0], c[1]], radius)).collect();
    sample_average(map, &pos)
}

/// Broad-frustum read of one sub-band map; the radius follows the
/// camera-distance law of `cfg`.
pub fn sample_broad(p: [f64; 2], map: &FeatureMap, bc: &[f64], x: &Vector3<f64>, cam_center: &Vector3<f64>, cfg: &FrustumConfig) -> Result<Vec<f64>> {
    let d = (x - cam_center).norm();
    if !(d > 0.0) {
        return Err(Error::InvalidGeometry("anchor coincides with the camera centre".into()));
    }
    let radius = cfg.broad_radius(d);
    let pos: Vec<[f64; 2]> = bc.chunks_exact(2).map(|c| broad_position(p, [c[0], c[1]], radius)).collect();
    Ok(sample_average(map, &pos))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax-weighted sum of sub-band samples.
pub fn fuse_stage(samples: &[Vec<f64>], logits: &[f64]) -> Result<Vec<f64>> {
    if samples.len() != logits.len() || samples.is_empty() {
        return shape_err(format!("{} samples but {} fusion logits", samples.len(), logits.len()));
    }
    let w = softmax(logits);
    let mut out = vec![0.0; samples[0].len()];
    for (s, wj) in samples.iter().zip(&w) {
        for (o, v) in out.iter_mut().zip(s) {
            *o += wj * v;
        }
    }
    Ok(out)
}

/// Concatenates per-stage `(narrow, broad)` outputs in stage order.
pub fn assemble_refined(stages: &[Option<(Vec<f64>, Vec<f64>)>]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (m, s) in stages.iter().enumerate() {
        let (n, b) = s.as_ref().ok_or_else(|| Error::InvalidState(format!("stage {m} was not computed")))?;
        out.extend_from_slice(n);
        out.extend_from_slice(b);
    }
    Ok(out)
}

fn fusion_offset(m: usize) -> usize {
    (0..m).map(|i| 1usize << (2 * i)).sum()
}

/// Forward intermediates of one anchor's refined feature.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSample {
    pub refined: Vec<f64>,
    /// Level-0 projection.
    pub center: [f64; 2],
    pub broad_radius: f64,
    /// Whether the broad radius came from the distance law (not the floor).
    pub radius_free: bool,
    /// Level-0 sample positions, `k_s` each.
    pub narrow_positions: Vec<[f64; 2]>,
    pub broad_positions: Vec<[f64; 2]>,
    /// `[stage][sub-band]` averaged samples per branch.
    pub narrow_values: Vec<Vec<Vec<f64>>>,
    pub broad_values: Vec<Vec<Vec<f64>>>,
}

/// Refined feature of `anchor` for `cam`; `None` when the anchor is behind
/// the camera (its refined feature is then zero).
pub fn sample_anchor(anchor: &Anchor, cam: &Camera, pyr: &FeaturePyramid, cfg: &FrustumConfig) -> Result<Option<AnchorSample>> {
    let x = Vector3::from(anchor.position);
    let base = pyr.base_size();
    let Some(center) = project_to_map(&x, cam, base, 0) else {
        return Ok(None);
    };
    let dist = (x - cam.center()).norm();
    if !(dist > 0.0) {
        return Err(Error::InvalidGeometry("anchor coincides with the camera centre".into()));
    }
    let ks = anchor.narrow_jitter.len() / 2;
    if ks == 0 || anchor.broad_jitter.len() != 2 * ks {
        return shape_err("anchor jitter must hold k_s × 2 entries per branch");
    }
    let broad_radius = cfg.broad_radius(dist);
    let narrow_positions: Vec<[f64; 2]> = anchor.narrow_jitter.chunks_exact(2).map(|c| narrow_position(center, [c[0], c[1]], cfg.narrow_radius)).collect();
    let broad_positions: Vec<[f64; 2]> = anchor.broad_jitter.chunks_exact(2).map(|c| broad_position(center, [c[0], c[1]], broad_radius)).collect();
    let mut stages = Vec::with_capacity(pyr.levels + 1);
    let mut narrow_values = Vec::with_capacity(pyr.levels + 1);
    let mut broad_values = Vec::with_capacity(pyr.levels + 1);
    for m in 0..=pyr.levels {
        let s = 0.5f64.powi(m as i32);
        let scaled = |ps: &[[f64; 2]]| ps.iter().map(|p| [p[0] * s, p[1] * s]).collect::<Vec<_>>();
        let (np, bp) = (scaled(&narrow_positions), scaled(&broad_positions));
        let nv: Vec<Vec<f64>> = pyr.narrow[m].iter().map(|map| sample_average(map, &np)).collect();
        let bv: Vec<Vec<f64>> = pyr.broad[m].iter().map(|map| sample_average(map, &bp)).collect();
        let (o, n) = (fusion_offset(m), 1usize << (2 * m));
        let fused_n = fuse_stage(&nv, &anchor.narrow_logits[o..o + n])?;
        let fused_b = fuse_stage(&bv, &anchor.broad_logits[o..o + n])?;
        stages.push(Some((fused_n, fused_b)));
        narrow_values.push(nv);
        broad_values.push(bv);
    }
    Ok(Some(AnchorSample {
        refined: assemble_refined(&stages)?,
        center,
        broad_radius,
        radius_free: cfg.broad_radius_max / dist > cfg.broad_radius_min,
        narrow_positions,
        broad_positions,
        narrow_values,
        broad_values,
    }))
}

/// Softmax backward for one stage; returns the sub-band sample gradients.
fn fuse_backward(values: &[Vec<f64>], logits: &[f64], g: &[f64], d_logits: &mut [f64]) -> Vec<Vec<f64>> {
    let w = softmax(logits);
    let dots: Vec<f64> = values.iter().map(|v| v.iter().zip(g).map(|(a, b)| a * b).sum()).collect();
    let mean: f64 = w.iter().zip(&dots).map(|(a, b)| a * b).sum();
    for j in 0..w.len() {
        d_logits[j] += w[j] * (dots[j] - mean);
    }
    w.iter().map(|wj| g.iter().map(|gi| wj * gi).collect()).collect()
}

/// Reverse pass of [`sample_anchor`]: accumulates into the sub-band
/// gradients `grad_pyr` and the anchor gradient `grad_anchor`
/// (jitter, fusion logits and position).
pub fn sampler_backward(
    anchor: &Anchor,
    cam: &Camera,
    pyr: &FeaturePyramid,
    cfg: &FrustumConfig,
    sample: &AnchorSample,
    d_refined: &[f64],
    grad_pyr: &mut FeaturePyramid,
    grad_anchor: &mut Anchor,
) -> Result<()> {
    if d_refined.len() != sample.refined.len() {
        return shape_err(format!("refined gradient has {} entries, expected {}", d_refined.len(), sample.refined.len()));
    }
    let c = pyr.chunk_channels();
    let ks = sample.narrow_positions.len();
    let inv_ks = 1.0 / ks as f64;
    let mut d_np = vec![[0.0; 2]; ks];
    let mut d_bp = vec![[0.0; 2]; ks];
    for m in 0..=pyr.levels {
        let s = 0.5f64.powi(m as i32);
        let (o, n) = (fusion_offset(m), 1usize << (2 * m));
        let gn = &d_refined[2 * m * c..(2 * m + 1) * c];
        let gb = &d_refined[(2 * m + 1) * c..(2 * m + 2) * c];
        let dvn = fuse_backward(&sample.narrow_values[m], &anchor.narrow_logits[o..o + n], gn, &mut grad_anchor.narrow_logits[o..o + n]);
        let dvb = fuse_backward(&sample.broad_values[m], &anchor.broad_logits[o..o + n], gb, &mut grad_anchor.broad_logits[o..o + n]);
        for j in 0..n {
            for si in 0..ks {
                let p = sample.narrow_positions[si];
                let d = grad_pyr.narrow[m][j].sample_bilinear_backward(&pyr.narrow[m][j], p[0] * s, p[1] * s, &dvn[j], inv_ks);
                d_np[si][0] += d[0] * inv_ks * s;
                d_np[si][1] += d[1] * inv_ks * s;
                let p = sample.broad_positions[si];
                let d = grad_pyr.broad[m][j].sample_bilinear_backward(&pyr.broad[m][j], p[0] * s, p[1] * s, &dvb[j], inv_ks);
                d_bp[si][0] += d[0] * inv_ks * s;
                d_bp[si][1] += d[1] * inv_ks * s;
            }
        }
    }
    let p = sample.center;
    let mut d_center = [0.0; 2];
    for si in 0..ks {
        for a in 0..2 {
            let t = anchor.narrow_jitter[2 * si + a].tanh();
            grad_anchor.narrow_jitter[2 * si + a] += d_np[si][a] * cfg.narrow_radius * (1.0 - t * t);
            d_center[a] += d_np[si][a];
        }
    }
    let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
    let big_r = sample.broad_radius;
    let mut d_radius = 0.0;
    for si in 0..ks {
        if r == 0.0 {
            d_center[0] += d_bp[si][0];
            d_center[1] += d_bp[si][1];
            continue;
        }
        let t = [anchor.broad_jitter[2 * si].tanh(), anchor.broad_jitter[2 * si + 1].tanh()];
        let g = d_bp[si];
        let mut radial = 0.0;
        for a in 0..2 {
            grad_anchor.broad_jitter[2 * si + a] += g[a] * p[a] * big_r / r * (1.0 - t[a] * t[a]);
            d_radius += g[a] * p[a] * t[a] / r;
            d_center[a] += g[a] * (1.0 + big_r * t[a] / r);
            radial += g[a] * p[a] * big_r * t[a];
        }
        let r3 = r * r * r;
        for a in 0..2 {
            d_center[a] -= radial * p[a] / r3;
        }
    }
    let x = Vector3::from(anchor.position);
    let mut dx = project_to_map_jacobian(&x, cam, pyr.base_size()).transpose() * Vector2::from(d_center);
    if sample.radius_free {
        let off = x - cam.center();
        let dist = off.norm();
        dx += off * (-d_radius * cfg.broad_radius_max / (dist * dist * dist));
    }
    for i in 0..3 {
        grad_anchor.position[i] += dx[i];
    }
    Ok(())
}

/// Histogram of all sample positions at level-0 feature-map resolution;
/// every sub-band read counts once.
pub fn attention_histogram(anchors: &[Anchor], cam: &Camera, map_size: (usize, usize), levels: usize, cfg: &FrustumConfig) -> Result<FeatureMap> {
    let (h, w) = map_size;
    let mut hist = FeatureMap::zeros(1, h, w);
    let per_sample: f64 = (0..=levels).map(|m| (1usize << (2 * m)) as f64).sum();
    for a in anchors {
        let x = Vector3::from(a.position);
        let Some(center) = project_to_map(&x, cam, map_size, 0) else {
            continue;
        };
        let dist = (x - cam.center()).norm();
        if !(dist > 0.0) {
            return Err(Error::InvalidGeometry("anchor coincides with the camera centre".into()));
        }
        let radius = cfg.broad_radius(dist);
        let narrow = a.narrow_jitter.chunks_exact(2).map(|c| narrow_position(center, [c[0], c[1]], cfg.narrow_radius));
        let broad = a.broad_jitter.chunks_exact(2).map(|c| broad_position(center, [c[0], c[1]], radius));
        for p in narrow.chain(broad) {
            let px = (p[0].floor().max(0.0) as usize).min(w - 1);
            let py = (p[1].floor().max(0.0) as usize).min(h - 1);
            *hist.at_mut(0, py, px) += per_sample;
        }
    }
    Ok(hist)
}

/// Grey-scale rendering of a histogram, normalised by its maximum.
pub fn histogram_image(hist: &FeatureMap) -> Image {
    let max = hist.data.iter().copied().fold(0.0, f64::max);
    let mut img = Image::new(hist.width, hist.height);
    for y in 0..hist.height {
        for x in 0..hist.width {
            let v = if max > 0.0 { hist.at(0, y, x) / max } else { 0.0 };
            img.set_pixel(x, y, [v; 3]);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Camera;
    use crate::wavelet::WaveletFamily;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> Camera {
        Camera::look_at([0.3, -4.0, 0.5], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 16, 16, 18.0).unwrap()
    }

    fn config(levels: usize, samples: usize, n_r: usize) -> ModelConfig {
        ModelConfig { levels, samples, n_r, k: 2, n_v: 4, ..ModelConfig::default() }
    }

    fn anchor(cfg: &ModelConfig, seed: u64) -> Anchor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Anchor::new([0.2, 0.1, -0.15], 0.2, cfg, &mut rng);
        a.narrow_logits.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        a.broad_logits.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        a
    }

    fn random_pyramid(cfg: &ModelConfig, seed: u64, hw: usize) -> (FeatureMap, FeaturePyramid) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = FeatureMap::from_fn(cfg.n_r, hw, hw, |_, _, _| rng.random_range(-1.0..1.0));
        let pyr = pyramid_from_map(&map, cfg.levels, &FilterPair::haar()).unwrap();
        (map, pyr)
    }

    #[test]
    fn split_examples() {
        let map = FeatureMap::from_fn(32, 2, 2, |c, y, x| (c * 4 + y * 2 + x) as f64);
        let chunks = split_feature_map(&map, 1).unwrap();
        assert_eq!(chunks.len(), 4);
        assert!(chunks.iter().all(|c| c.channels == 8));
        assert_eq!(FeatureMap::concat_channels(&chunks).unwrap(), map);
        assert_eq!(split_feature_map(&map, 0).unwrap()[1].channels, 16);
        assert!(matches!(split_feature_map(&map, 2), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn pyramid_shapes() {
        let map = FeatureMap::from_fn(48, 8, 8, |c, y, x| (c + y + x) as f64);
        let p = pyramid_from_map(&map, 2, &FilterPair::haar()).unwrap();
        assert_eq!(p.narrow[1].len(), 4);
        assert_eq!(p.broad[2].len(), 16);
        assert_eq!(p.narrow[1][0].shape(), [8, 4, 4]);
        assert_eq!(p.broad[2][3].shape(), [8, 2, 2]);
        let p0 = pyramid_from_map(&map, 0, &FilterPair::haar()).unwrap();
        assert_eq!(p0.narrow[0][0], map.channel_slice(0, 24));
    }

    #[test]
    fn pyramid_locality() {
        let cfg = config(1, 1, 32);
        let (mut map, pyr) = random_pyramid(&cfg, 1, 8);
        for v in map.plane_mut(9) {
            *v += 1.0;
        }
        let changed = pyramid_from_map(&map, 1, &FilterPair::haar()).unwrap();
        assert_eq!(changed.narrow[0], pyr.narrow[0]);
        assert_eq!(changed.narrow[1], pyr.narrow[1]);
        assert_eq!(changed.broad[1], pyr.broad[1]);
        assert_ne!(changed.broad[0], pyr.broad[0]);
    }

    #[test]
    fn projection_examples() {
        let c = Camera::look_at([0.0, -4.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 16, 16, 18.0).unwrap();
        let p = project_to_map(&Vector3::zeros(), &c, (8, 8), 0).unwrap();
        assert!((p[0] - 4.0).abs() < 1e-12 && (p[1] - 4.0).abs() < 1e-12);
        let p1 = project_to_map(&Vector3::zeros(), &c, (8, 8), 1).unwrap();
        assert!((p1[0] - 2.0).abs() < 1e-12 && (p1[1] - 2.0).abs() < 1e-12);
        assert!(project_to_map(&Vector3::new(0.0, -6.0, 0.0), &c, (8, 8), 0).is_none());
    }

    #[test]
    fn radius_law() {
        let f = FrustumConfig { narrow_radius: 1.0, broad_radius_max: 8.0, broad_radius_min: 0.5 };
        assert_eq!(f.broad_radius(4.0), 2.0);
        assert_eq!(f.broad_radius(1e9), 0.5);
    }

    #[test]
    fn zero_jitter_samples_at_projection() {
        let map = FeatureMap::from_fn(2, 6, 6, |c, y, x| (c * 36 + y * 6 + x) as f64);
        let p = [2.3, 3.1];
        assert_eq!(sample_narrow(p, &map, &[0.0, 0.0], 1.5), map.sample_bilinear(2.3, 3.1));
        let f = FrustumConfig { narrow_radius: 1.0, broad_radius_max: 8.0, broad_radius_min: 0.5 };
        let b = sample_broad(p, &map, &[0.0, 0.0], &Vector3::new(1.0, 0.0, 0.0), &Vector3::zeros(), &f).unwrap();
        assert_eq!(b, map.sample_bilinear(2.3, 3.1));
        assert!(sample_broad(p, &map, &[0.0, 0.0], &Vector3::zeros(), &Vector3::zeros(), &f).is_err());
    }

    #[test]
    fn fusion_examples() {
        let s = vec![vec![1.0, 2.0]];
        assert_eq!(fuse_stage(&s, &[3.0]).unwrap(), vec![1.0, 2.0]);
        let four: Vec<Vec<f64>> = (0..4).map(|j| vec![j as f64]).collect();
        assert!((fuse_stage(&four, &[0.5; 4]).unwrap()[0] - 1.5).abs() < 1e-15);
        let same = vec![vec![0.7, -0.2]; 4];
        let out = fuse_stage(&same, &[0.1, 2.0, -1.0, 0.3]).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-15 && (out[1] + 0.2).abs() < 1e-15);
        assert!(fuse_stage(&same, &[0.0; 3]).is_err());
        assert!(matches!(assemble_refined(&[Some((vec![1.0], vec![2.0])), None]), Err(Error::InvalidState(_))));
    }

    #[test]
    fn refined_dimension_matches_n_r() {
        for (levels, n_r) in [(0, 24), (0, 32), (0, 48), (1, 24), (1, 32), (1, 48), (2, 24), (2, 48)] {
            let cfg = config(levels, 2, n_r);
            let (_, pyr) = random_pyramid(&cfg, 3, 8);
            let s = sample_anchor(&anchor(&cfg, 4), &cam(), &pyr, &FrustumConfig::from_model(&cfg)).unwrap().unwrap();
            assert_eq!(s.refined.len(), n_r);
        }
    }

    #[test]
    fn constant_map_ignores_jitter_and_levels() {
        for levels in 0..=2 {
            let cfg = config(levels, 2, 48);
            let map = FeatureMap::from_fn(48, 8, 8, |c, _, _| 0.1 * c as f64);
            let pyr = pyramid_from_map(&map, levels, &FilterPair::haar()).unwrap();
            let f = FrustumConfig::from_model(&cfg);
            let a = anchor(&cfg, 5);
            let mut b = a.clone();
            b.narrow_jitter.iter_mut().for_each(|v| *v += 0.7);
            b.broad_jitter.iter_mut().for_each(|v| *v -= 0.4);
            let sa = sample_anchor(&a, &cam(), &pyr, &f).unwrap().unwrap();
            let sb = sample_anchor(&b, &cam(), &pyr, &f).unwrap().unwrap();
            for (x, y) in sa.refined.iter().zip(&sb.refined) {
                assert!((x - y).abs() < 1e-12);
            }
            let c = cfg.chunk_channels();
            for ch in 0..2 * c {
                assert!((sa.refined[ch] - 0.1 * ch as f64).abs() < 1e-12);
            }
            let mut g = a.zeros_like();
            let mut gp = pyr.zeros_like();
            sampler_backward(&a, &cam(), &pyr, &f, &sa, &vec![1.0; 48], &mut gp, &mut g).unwrap();
            assert!(g.narrow_jitter.iter().chain(&g.broad_jitter).all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn behind_camera_anchor_is_excluded() {
        let cfg = config(1, 1, 32);
        let (_, pyr) = random_pyramid(&cfg, 6, 8);
        let mut a = anchor(&cfg, 7);
        a.position = [0.0, -8.0, 0.0];
        assert!(sample_anchor(&a, &cam(), &pyr, &FrustumConfig::from_model(&cfg)).unwrap().is_none());
        let h = attention_histogram(&[a], &cam(), (8, 8), 1, &FrustumConfig::from_model(&cfg)).unwrap();
        assert_eq!(h.data.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn histogram_counts() {
        let cfg = config(0, 1, 32);
        let a = anchor(&cfg, 8);
        let f = FrustumConfig::from_model(&cfg);
        let h = attention_histogram(&[a.clone()], &cam(), (8, 8), 0, &f).unwrap();
        assert_eq!(h.data.iter().sum::<f64>(), 2.0);
        let cfg = config(1, 3, 32);
        let anchors: Vec<Anchor> = (0..5).map(|i| anchor(&cfg, 20 + i)).collect();
        let h = attention_histogram(&anchors, &cam(), (8, 8), 1, &f).unwrap();
        assert_eq!(h.data.iter().sum::<f64>(), (5 * 3 * (2 + 8)) as f64);
        assert_eq!(histogram_image(&h).width, 8);
    }

    fn refined_loss(a: &Anchor, map: &FeatureMap, cfg: &ModelConfig, up: &[f64]) -> f64 {
        let pyr = pyramid_from_map(map, cfg.levels, &FilterPair::for_family(WaveletFamily::Haar)).unwrap();
        let s = sample_anchor(a, &cam(), &pyr, &FrustumConfig::from_model(cfg)).unwrap().unwrap();
        s.refined.iter().zip(up).map(|(x, y)| x * y).sum()
    }

    /// Exact gradient vs central differences on a 1-anchor, 8×8, M = 1 setup.
    #[test]
    fn backward_matches_finite_differences() {
        let mut cfg = config(1, 2, 32);
        cfg.broad_radius_max = 12.0;
        cfg.broad_radius_min = 0.5;
        let (map, pyr) = random_pyramid(&cfg, 9, 8);
        let a = anchor(&cfg, 10);
        let f = FrustumConfig::from_model(&cfg);
        let s = sample_anchor(&a, &cam(), &pyr, &f).unwrap().unwrap();
        assert!(s.radius_free);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let up: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut ga = a.zeros_like();
        let mut gp = pyr.zeros_like();
        sampler_backward(&a, &cam(), &pyr, &f, &s, &up, &mut gp, &mut ga).unwrap();
        let gmap = pyramid_backward(&gp, &FilterPair::haar()).unwrap();
        let h = 1e-6;
        let check = |fd: f64, an: f64, what: &str| {
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-2), "{what}: fd {fd} vs {an}");
        };
        for i in (0..map.data.len()).step_by(7) {
            let (mut p, mut m) = (map.clone(), map.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (refined_loss(&a, &p, &cfg, &up) - refined_loss(&a, &m, &cfg, &up)) / (2.0 * h);
            check(fd, gmap.data[i], "map");
        }
        let fields: [(&str, fn(&mut Anchor) -> &mut [f64], fn(&Anchor) -> &[f64]); 5] = [
            ("narrow_jitter", |a| &mut a.narrow_jitter, |a| &a.narrow_jitter),
            ("broad_jitter", |a| &mut a.broad_jitter, |a| &a.broad_jitter),
            ("narrow_logits", |a| &mut a.narrow_logits, |a| &a.narrow_logits),
            ("broad_logits", |a| &mut a.broad_logits, |a| &a.broad_logits),
            ("position", |a| &mut a.position, |a| &a.position),
        ];
        for (name, get_mut, get) in fields {
            for i in 0..get(&a).len() {
                let (mut p, mut m) = (a.clone(), a.clone());
                get_mut(&mut p)[i] += h;
                get_mut(&mut m)[i] -= h;
                let fd = (refined_loss(&p, &map, &cfg, &up) - refined_loss(&m, &map, &cfg, &up)) / (2.0 * h);
                check(fd, get(&ga)[i], name);
            }
        }
    }

    #[test]
    fn identical_samples_give_zero_logit_gradient() {
        let vals = vec![vec![0.3, -0.1]; 4];
        let mut d = vec![0.0; 4];
        fuse_backward(&vals, &[0.2, -0.5, 1.0, 0.0], &[1.0, 2.0], &mut d);
        assert!(d.iter().all(|v| v.abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn jitter_is_bounded(px in -50.0..50.0f64, py in -50.0..50.0f64, a in -20.0..20.0f64, b in -20.0..20.0f64, r in 0.01..10.0f64) {
            let n = narrow_position([px, py], [a, b], r);
            prop_assert!((n[0] - px).abs() <= r + 1e-12 && (n[1] - py).abs() <= r + 1e-12);
            let q = broad_position([px, py], [a, b], r);
            let d = ((q[0] - px).powi(2) + (q[1] - py).powi(2)).sqrt();
            prop_assert!(d <= r * std::f64::consts::SQRT_2 + 1e-9);
            prop_assert!((q[0] - px).abs() <= r + 1e-9 && (q[1] - py).abs() <= r + 1e-9);
        }

        #[test]
        fn fusion_weights_are_a_distribution(l in proptest::collection::vec(-30.0..30.0f64, 1..17)) {
            let w = softmax(&l);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&v| v > 0.0));
        }
    }
}
