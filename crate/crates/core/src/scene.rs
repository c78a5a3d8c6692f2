//! Cameras, anchors and the Gaussian primitives they expand into.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{join, ParamGroup, ParamInfo, Parameterized, Visitor};

/// Culling distance in front of the camera, world units.
pub const NEAR_PLANE: f64 = 0.01;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Pinhole camera. `orientation` is the world→camera rotation as a unit
/// quaternion `[w, x, y, z]`; camera axes are x right, y down, z forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub orientation: [f64; 4],
    pub position: [f64; 3],
}

impl Camera {
    /// Camera at `eye` looking at `target`, with square pixels and the
    /// principal point at the image centre.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], width: usize, height: usize, focal: f64) -> Result<Self> {
        let eye_v = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye_v).try_normalize(1e-12).ok_or_else(|| Error::InvalidGeometry("eye coincides with target".into()))?;
        let right =
            forward.cross(&Vector3::from(up)).try_normalize(1e-12).ok_or_else(|| Error::InvalidGeometry("up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        let cam =
            Self { width, height, fx: focal, fy: focal, cx: width as f64 / 2.0, cy: height as f64 / 2.0, orientation: [q.w, q.i, q.j, q.k], position: eye };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("camera has zero-size image".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        let n: f64 = self.orientation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("camera quaternion norm {n} is not 1")));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_rotation(&self.orientation)
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * (x - self.center())
    }
}

/// Pinhole projection of a world point: `(u, v, depth)`.
pub fn project_point(cam: &Camera, x: &Vector3<f64>) -> Result<(f64, f64, f64)> {
    let t = cam.world_to_camera(x);
    if t.z <= NEAR_PLANE {
        return Err(Error::BehindCamera { depth: t.z });
    }
    Ok((cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy, t.z))
}

/// Rotation matrix of `q` after normalisation.
pub fn quat_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `∂L/∂R` back to the raw (unnormalised) quaternion.
pub fn quat_to_rotation_backward(q: &[f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = |r: usize, c: usize| d_r[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1) - 2.0 * x * g(2, 2));
    let dy = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1) - 2.0 * y * g(2, 2));
    let dz = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
    // through q / |q|
    let d_unit = [dw, dx, dy, dz];
    let unit = [w, x, y, z];
    let dot: f64 = d_unit.iter().zip(&unit).map(|(a, b)| a * b).sum();
    std::array::from_fn(|i| (d_unit[i] - unit[i] * dot) / n)
}

/// `R S Sᵀ Rᵀ` for the rotation of `q` (normalised here) and `S = diag(s)`.
pub fn build_covariance(q: &[f64; 4], s: &[f64; 3]) -> Result<Matrix3<f64>> {
    if q.iter().chain(s.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite rotation or scale".into()));
    }
    if q.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidParameter("zero quaternion".into()));
    }
    if s.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidParameter("scales must be positive".into()));
    }
    let r = quat_to_rotation(q);
    let s2 = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
    let cov = r * s2 * r.transpose();
    Ok((cov + cov.transpose()) * 0.5)
}

/// Gradients of `build_covariance` w.r.t. the raw quaternion and the scales.
pub fn build_covariance_backward(q: &[f64; 4], s: &[f64; 3], d_cov: &Matrix3<f64>) -> ([f64; 4], [f64; 3]) {
    let r = quat_to_rotation(q);
    let s2 = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
    let sym = d_cov + d_cov.transpose();
    let d_r = sym * r * s2;
    let rgr = r.transpose() * d_cov * r;
    let ds = [2.0 * s[0] * rgr[(0, 0)], 2.0 * s[1] * rgr[(1, 1)], 2.0 * s[2] * rgr[(2, 2)]];
    (quat_to_rotation_backward(q, &d_r), ds)
}

/// A renderable Gaussian in world space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    /// (anchor index, offset index); also the depth-sort tie breaker.
    pub source: (usize, usize),
}

/// Unnormalised Gaussian density `exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ))`.
pub fn eval_gaussian(g: &GaussianPrimitive, x: &Vector3<f64>) -> Result<f64> {
    let scale = g.cov.abs().max();
    if !(scale > 0.0) || g.cov.determinant().abs() <= 1e-14 * scale.powi(3) {
        return Err(Error::Degenerate("covariance is singular".into()));
    }
    let inv = g.cov.try_inverse().ok_or_else(|| Error::Degenerate("covariance is singular".into()))?;
    let d = x - g.mean;
    Ok((-0.5 * d.dot(&(inv * d))).exp())
}

/// Voxel-centred anchor owning `k` Gaussians and its sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    /// Anchor centre `x_v`.
    pub position: [f64; 3],
    /// `log l_v`; offsets are measured in units of `l_v`.
    pub log_extent: [f64; 3],
    /// `k × 3` offsets `O_v`.
    pub offsets: Vec<f64>,
    /// Intrinsic feature `f_v`.
    pub intrinsic: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    /// `k × 4` quaternions `[w, x, y, z]`.
    pub rotations: Vec<f64>,
    /// `k × 3` log-scales.
    pub log_scales: Vec<f64>,
    /// `k_s × 2` narrow-frustum jitter `nc`.
    pub narrow_jitter: Vec<f64>,
    /// `k_s × 2` broad-frustum scale factors `bc`.
    pub broad_jitter: Vec<f64>,
    /// Fusion logits for the narrow branch, `Σ_m 4^m` entries, stage-major.
    pub narrow_logits: Vec<f64>,
    pub broad_logits: Vec<f64>,
}

/// Total number of sub-band fusion weights per branch for `levels` = M.
pub fn fusion_weight_count(levels: usize) -> usize {
    (0..=levels).map(|m| 1usize << (2 * m)).sum()
}

impl Anchor {
    /// A fresh anchor at `position` with extent `voxel`.
    pub fn new(position: [f64; 3], voxel: f64, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let k = cfg.k;
        let offsets = (0..k * 3).map(|_| rng.random_range(-cfg.init_offset..=cfg.init_offset)).collect();
        let intrinsic = (0..cfg.n_v).map(|_| rng.random_range(-0.1..0.1)).collect();
        let mut rotations = Vec::with_capacity(k * 4);
        for _ in 0..k {
            rotations.extend_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        }
        let ls = (voxel * cfg.init_scale).ln();
        let nw = fusion_weight_count(cfg.levels);
        Self {
            position,
            log_extent: [voxel.ln(); 3],
            offsets,
            intrinsic,
            opacity_logits: vec![logit(cfg.init_opacity); k],
            rotations,
            log_scales: vec![ls; k * 3],
            narrow_jitter: (0..cfg.samples * 2).map(|_| rng.random_range(-0.5..0.5)).collect(),
            broad_jitter: (0..cfg.samples * 2).map(|_| rng.random_range(-0.5..0.5)).collect(),
            narrow_logits: vec![0.0; nw],
            broad_logits: vec![0.0; nw],
        }
    }

    pub fn k(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn extent(&self) -> [f64; 3] {
        self.log_extent.map(f64::exp)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let k = self.k();
        let bad = |what: &str| Err(Error::InvalidParameter(format!("anchor field {what} has the wrong length")));
        if k == 0 {
            return Err(Error::InvalidParameter("anchor needs k ≥ 1".into()));
        }
        if k != cfg.k || self.offsets.len() != 3 * k || self.rotations.len() != 4 * k || self.log_scales.len() != 3 * k {
            return bad("offsets/rotations/scales");
        }
        if self.intrinsic.len() != cfg.n_v {
            return bad("intrinsic");
        }
        if self.narrow_jitter.len() != 2 * cfg.samples || self.broad_jitter.len() != 2 * cfg.samples {
            return bad("jitter");
        }
        let nw = fusion_weight_count(cfg.levels);
        if self.narrow_logits.len() != nw || self.broad_logits.len() != nw {
            return bad("fusion logits");
        }
        Ok(())
    }

    /// Same layout, all zeros (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        Self {
            position: [0.0; 3],
            log_extent: [0.0; 3],
            offsets: z(&self.offsets),
            intrinsic: z(&self.intrinsic),
            opacity_logits: z(&self.opacity_logits),
            rotations: z(&self.rotations),
            log_scales: z(&self.log_scales),
            narrow_jitter: z(&self.narrow_jitter),
            broad_jitter: z(&self.broad_jitter),
            narrow_logits: z(&self.narrow_logits),
            broad_logits: z(&self.broad_logits),
        }
    }

    fn rotation(&self, j: usize) -> [f64; 4] {
        self.rotations[4 * j..4 * j + 4].try_into().expect("4 entries")
    }

    fn scales(&self, j: usize) -> [f64; 3] {
        std::array::from_fn(|i| self.log_scales[3 * j + i].exp())
    }
}

impl Parameterized for Anchor {
    fn visit_params(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        use ParamGroup as G;
        let k = self.k();
        let ks = self.narrow_jitter.len() / 2;
        let nw = self.narrow_logits.len();
        let nv = self.intrinsic.len();
        let fields: [(&str, G, Vec<usize>, &mut [f64]); 11] = [
            ("position", G::Means, vec![3], &mut self.position),
            ("log_extent", G::Scaling, vec![3], &mut self.log_extent),
            ("offsets", G::Offsets, vec![k, 3], &mut self.offsets),
            ("intrinsic", G::Intrinsic, vec![nv], &mut self.intrinsic),
            ("opacity_logits", G::Opacity, vec![k], &mut self.opacity_logits),
            ("rotations", G::Rotation, vec![k, 4], &mut self.rotations),
            ("log_scales", G::Scaling, vec![k, 3], &mut self.log_scales),
            ("narrow_jitter", G::Jitter, vec![ks, 2], &mut self.narrow_jitter),
            ("broad_jitter", G::Jitter, vec![ks, 2], &mut self.broad_jitter),
            ("narrow_logits", G::Fusion, vec![nw], &mut self.narrow_logits),
            ("broad_logits", G::Fusion, vec![nw], &mut self.broad_logits),
        ];
        for (name, group, shape, data) in fields {
            let name = join(prefix, name);
            f(ParamInfo { name: &name, group, shape: &shape }, data);
        }
    }
}

/// Expands an anchor into its `k` Gaussians; colours are left at zero.
pub fn expand_anchor(a: &Anchor, anchor_id: usize) -> Result<Vec<GaussianPrimitive>> {
    let l = a.extent();
    (0..a.k())
        .map(|j| {
            let mean = Vector3::from_fn(|i, _| a.position[i] + a.offsets[3 * j + i] * l[i]);
            Ok(GaussianPrimitive {
                mean,
                cov: build_covariance(&a.rotation(j), &a.scales(j))?,
                opacity: sigmoid(a.opacity_logits[j]),
                color: [0.0; 3],
                source: (anchor_id, j),
            })
        })
        .collect()
}

/// Per-Gaussian upstream gradients consumed by [`expand_anchor_backward`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Accumulates the geometry gradients of one anchor's Gaussians into `out`.
pub fn expand_anchor_backward(a: &Anchor, grads: &[GaussianGrad], out: &mut Anchor) {
    let l = a.extent();
    for (j, g) in grads.iter().enumerate() {
        for i in 0..3 {
            out.position[i] += g.mean[i];
            out.offsets[3 * j + i] += g.mean[i] * l[i];
            // d/d log l = dμ · O · l
            out.log_extent[i] += g.mean[i] * a.offsets[3 * j + i] * l[i];
        }
        let s = a.scales(j);
        let (dq, ds) = build_covariance_backward(&a.rotation(j), &s, &g.cov);
        for i in 0..4 {
            out.rotations[4 * j + i] += dq[i];
        }
        for i in 0..3 {
            out.log_scales[3 * j + i] += ds[i] * s[i];
        }
        let alpha = sigmoid(a.opacity_logits[j]);
        out.opacity_logits[j] += g.opacity * alpha * (1.0 - alpha);
    }
}

/// One anchor per occupied voxel of `points`, positioned at the voxel centre.
/// Voxels are visited in lexicographic order so the result is deterministic.
pub fn anchors_from_points(points: &[[f64; 3]], voxel: f64, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Vec<Anchor>> {
    if !(voxel > 0.0) {
        return Err(Error::InvalidConfig("voxel size must be positive".into()));
    }
    let mut cells: Vec<[i64; 3]> = points.iter().map(|p| p.map(|c| (c / voxel).floor() as i64)).collect();
    cells.sort_unstable();
    cells.dedup();
    Ok(cells
        .into_iter()
        .map(|c| {
            let centre = c.map(|i| (i as f64 + 0.5) * voxel);
            Anchor::new(centre, voxel, cfg, rng)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn z90() -> [f64; 4] {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        [h, 0.0, 0.0, h]
    }

    #[test]
    fn covariance_examples() {
        let id = build_covariance(&[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!((id - Matrix3::identity()).abs().max() < 1e-15);
        let d = build_covariance(&[1.0, 0.0, 0.0, 0.0], &[2.0, 1.0, 1.0]).unwrap();
        assert!((d - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).abs().max() < 1e-15);
        let r = build_covariance(&z90(), &[2.0, 1.0, 1.0]).unwrap();
        assert!((r - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn covariance_rejects_non_finite() {
        assert!(build_covariance(&[f64::NAN, 0.0, 0.0, 1.0], &[1.0; 3]).is_err());
        assert!(build_covariance(&[1.0, 0.0, 0.0, 0.0], &[1.0, f64::INFINITY, 1.0]).is_err());
    }

    #[test]
    fn covariance_backward_matches_finite_differences() {
        let q = [0.9, 0.2, -0.3, 0.4];
        let s = [0.7, 1.3, 0.4];
        let g = Matrix3::new(0.3, -0.2, 0.5, 0.1, 0.9, -0.4, 0.7, 0.2, -0.6);
        let f = |q: &[f64; 4], s: &[f64; 3]| build_covariance(q, s).unwrap().component_mul(&g).sum();
        let (dq, ds) = build_covariance_backward(&q, &s, &g);
        let h = 1e-6;
        for i in 0..4 {
            let (mut p, mut m) = (q, q);
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p, &s) - f(&m, &s)) / (2.0 * h);
            assert!((fd - dq[i]).abs() < 1e-7, "q{i}: {fd} vs {}", dq[i]);
        }
        for i in 0..3 {
            let (mut p, mut m) = (s, s);
            p[i] += h;
            m[i] -= h;
            let fd = (f(&q, &p) - f(&q, &m)) / (2.0 * h);
            assert!((fd - ds[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn project_point_examples() {
        let cam = Camera::look_at([0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], 32, 24, 20.0).unwrap();
        let (u, v, z) = project_point(&cam, &Vector3::new(0.0, 0.0, 0.0)).unwrap();
        assert!((u - 16.0).abs() < 1e-12 && (v - 12.0).abs() < 1e-12 && (z - 1.0).abs() < 1e-12);
        let p1 = project_point(&cam, &Vector3::new(0.1, 0.2, 0.0)).unwrap();
        let p2 = project_point(&cam, &Vector3::new(0.1, 0.2, 1.0)).unwrap();
        assert!(((p1.0 - 16.0) - 2.0 * (p2.0 - 16.0)).abs() < 1e-12);
        assert!(((p1.1 - 12.0) - 2.0 * (p2.1 - 12.0)).abs() < 1e-12);
        assert!(matches!(project_point(&cam, &Vector3::new(0.0, 0.0, -2.0)), Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn gaussian_density_examples() {
        let g = GaussianPrimitive { mean: Vector3::new(1.0, 2.0, 3.0), cov: Matrix3::identity(), opacity: 0.5, color: [0.0; 3], source: (0, 0) };
        assert_eq!(eval_gaussian(&g, &g.mean).unwrap(), 1.0);
        let v = eval_gaussian(&g, &(g.mean + Vector3::x())).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        let singular = GaussianPrimitive { cov: Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, 1.0)), ..g };
        assert!(matches!(eval_gaussian(&singular, &Vector3::zeros()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn expand_anchor_examples() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.k, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = Anchor::new([0.5, -1.0, 2.0], 1.0, &cfg, &mut rng);
        a.offsets.iter_mut().for_each(|v| *v = 0.0);
        let gs = expand_anchor(&a, 7).unwrap();
        assert_eq!(gs.len(), 10);
        assert!(gs.iter().all(|g| g.mean == Vector3::new(0.5, -1.0, 2.0)));
        a.offsets[0] = 1.0;
        let gs = expand_anchor(&a, 7).unwrap();
        assert!((gs[0].mean - Vector3::new(1.5, -1.0, 2.0)).norm() < 1e-15);
        assert_eq!(gs[3].source, (7, 3));
    }

    proptest! {
        #[test]
        fn covariance_eigenvalues_are_squared_scales(
            w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
            s0 in 0.05f64..3.0, s1 in 0.05f64..3.0, s2 in 0.05f64..3.0,
        ) {
            prop_assume!(w * w + x * x + y * y + z * z > 1e-2);
            let c = build_covariance(&[w, x, y, z], &[s0, s1, s2]).unwrap();
            let mut ev: Vec<f64> = c.symmetric_eigenvalues().iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            let mut want = vec![s0 * s0, s1 * s1, s2 * s2];
            want.sort_by(f64::total_cmp);
            for (a, b) in ev.iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            prop_assert!((c - c.transpose()).abs().max() == 0.0);
        }

        #[test]
        fn covariance_is_rotation_equivariant(
            a in proptest::array::uniform4(-1.0f64..1.0), b in proptest::array::uniform4(-1.0f64..1.0),
            s in proptest::array::uniform3(0.1f64..2.0),
        ) {
            let n = |q: [f64; 4]| q.iter().map(|v| v * v).sum::<f64>();
            prop_assume!(n(a) > 1e-2 && n(b) > 1e-2);
            let qa = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(a[0], a[1], a[2], a[3]));
            let qb = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(b[0], b[1], b[2], b[3]));
            let qab = qa * qb;
            let lhs = build_covariance(&[qab.w, qab.i, qab.j, qab.k], &s).unwrap();
            let ra = quat_to_rotation(&[qa.w, qa.i, qa.j, qa.k]);
            let rhs = ra * build_covariance(&[qb.w, qb.i, qb.j, qb.k], &s).unwrap() * ra.transpose();
            prop_assert!((lhs - rhs).abs().max() < 1e-9);
        }

        #[test]
        fn offsets_act_linearly(o in proptest::array::uniform3(-2.0f64..2.0), e in proptest::array::uniform3(-1.0f64..1.0)) {
            let cfg = ModelConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut a = Anchor::new([0.1, 0.2, 0.3], 1.0, &cfg, &mut rng);
            a.log_extent = e;
            a.offsets[..3].copy_from_slice(&o);
            let d1 = expand_anchor(&a, 0).unwrap()[0].mean - Vector3::from(a.position);
            a.offsets[..3].iter_mut().for_each(|v| *v *= 2.0);
            let d2 = expand_anchor(&a, 0).unwrap()[0].mean - Vector3::from(a.position);
            prop_assert!((d2 - 2.0 * d1).norm() < 1e-12);
        }

        #[test]
        fn density_is_even_and_peaks_at_mean(d in proptest::array::uniform3(-2.0f64..2.0)) {
            let g = GaussianPrimitive {
                mean: Vector3::new(0.3, -0.2, 0.1),
                cov: build_covariance(&[0.8, 0.1, 0.5, -0.2], &[0.5, 1.0, 1.5]).unwrap(),
                opacity: 0.5,
                color: [0.0; 3],
                source: (0, 0),
            };
            let dv = Vector3::from(d);
            let p = eval_gaussian(&g, &(g.mean + dv)).unwrap();
            let m = eval_gaussian(&g, &(g.mean - dv)).unwrap();
            prop_assert!((p - m).abs() < 1e-15);
            prop_assert!(p > 0.0 && p <= 1.0);
            if dv.norm() > 1e-6 { prop_assert!(p < 1.0); }
        }
    }
}
