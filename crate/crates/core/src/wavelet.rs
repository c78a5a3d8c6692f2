//! Separable 2D discrete wavelet transform on multi-channel maps, its
//! adjoint/inverse, and the full wavelet-packet tree.
//!
//! Filters are applied with periodic wrap, which for the two-tap Haar pair
//! never wraps at all (dimensions are required to be even). Channels are
//! transformed independently and the sub-bands keep the channel order of
//! the input.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::map::FeatureMap;

/// Wavelet families shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    #[default]
    Haar,
    /// Daubechies with two vanishing moments (four taps).
    Db2,
}

/// Analysis filter pair `(low, high)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPair {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl FilterPair {
    pub fn haar() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Self { low: vec![s, s], high: vec![s, -s] }
    }

    pub fn db2() -> Self {
        let s3 = 3f64.sqrt();
        let d = 4.0 * 2f64.sqrt();
        let low = vec![(1.0 + s3) / d, (3.0 + s3) / d, (3.0 - s3) / d, (1.0 - s3) / d];
        // quadrature mirror: h[k] = (-1)^k l[N-1-k]
        let n = low.len();
        let high = (0..n).map(|k| if k % 2 == 0 { low[n - 1 - k] } else { -low[n - 1 - k] }).collect();
        Self { low, high }
    }

    pub fn for_family(family: WaveletFamily) -> Self {
        match family {
            WaveletFamily::Haar => Self::haar(),
            WaveletFamily::Db2 => Self::db2(),
        }
    }

    /// Largest deviation from `Σl² = Σh² = 1`, `Σ l·h = 0`.
    pub fn orthonormality_defect(&self) -> f64 {
        let ll: f64 = self.low.iter().map(|v| v * v).sum();
        let hh: f64 = self.high.iter().map(|v| v * v).sum();
        let lh: f64 = self.low.iter().zip(&self.high).map(|(a, b)| a * b).sum();
        (ll - 1.0).abs().max((hh - 1.0).abs()).max(lh.abs())
    }
}

/// One-level decomposition of a map: `LL, LH, HL, HH`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet {
    pub ll: FeatureMap,
    pub lh: FeatureMap,
    pub hl: FeatureMap,
    pub hh: FeatureMap,
}

impl SubbandSet {
    pub fn into_array(self) -> [FeatureMap; 4] {
        [self.ll, self.lh, self.hl, self.hh]
    }

    pub fn from_array([ll, lh, hl, hh]: [FeatureMap; 4]) -> Self {
        Self { ll, lh, hl, hh }
    }

    pub fn energy(&self) -> f64 {
        self.ll.energy() + self.lh.energy() + self.hl.energy() + self.hh.energy()
    }

    fn check(&self) -> Result<()> {
        let s = self.ll.shape();
        if self.lh.shape() != s || self.hl.shape() != s || self.hh.shape() != s {
            return shape_err("sub-bands do not share a shape");
        }
        Ok(())
    }
}

/// Decimating filter applied along one axis: `out[i] = Σ_k f[k] · x[(2i + k) mod n]`.
fn analyze_1d(x: &[f64], f: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, &fk) in f.iter().enumerate() {
            acc += fk * x[(2 * i + k) % n];
        }
        *o = acc;
    }
}

/// Transpose of [`analyze_1d`], accumulated into `out`.
fn synthesize_1d(y: &[f64], f: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (i, &yi) in y.iter().enumerate() {
        for (k, &fk) in f.iter().enumerate() {
            out[(2 * i + k) % n] += fk * yi;
        }
    }
}

/// Applies `row_filter` along y and `col_filter` along x of one plane:
/// `row_filter · P · col_filterᵀ` in matrix form.
fn analyze_plane(plane: &[f64], h: usize, w: usize, row_filter: &[f64], col_filter: &[f64]) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    // along x first
    let mut tmp = vec![0.0; h * w2];
    for y in 0..h {
        analyze_1d(&plane[y * w..(y + 1) * w], col_filter, &mut tmp[y * w2..(y + 1) * w2]);
    }
    let mut out = vec![0.0; h2 * w2];
    let mut col = vec![0.0; h];
    let mut res = vec![0.0; h2];
    for x in 0..w2 {
        for y in 0..h {
            col[y] = tmp[y * w2 + x];
        }
        analyze_1d(&col, row_filter, &mut res);
        for y in 0..h2 {
            out[y * w2 + x] = res[y];
        }
    }
    out
}

fn synthesize_plane(band: &[f64], h: usize, w: usize, row_filter: &[f64], col_filter: &[f64], out: &mut [f64]) {
    let (h2, w2) = (h / 2, w / 2);
    let mut tmp = vec![0.0; h * w2];
    let mut col = vec![0.0; h2];
    let mut res = vec![0.0; h];
    for x in 0..w2 {
        for y in 0..h2 {
            col[y] = band[y * w2 + x];
        }
        res.iter_mut().for_each(|v| *v = 0.0);
        synthesize_1d(&col, row_filter, &mut res);
        for y in 0..h {
            tmp[y * w2 + x] = res[y];
        }
    }
    for y in 0..h {
        synthesize_1d(&tmp[y * w2..(y + 1) * w2], col_filter, &mut out[y * w..(y + 1) * w]);
    }
}

fn check_even(f: &FeatureMap) -> Result<()> {
    if f.height % 2 != 0 || f.width % 2 != 0 || f.height == 0 || f.width == 0 {
        return shape_err(format!("DWT needs even non-zero dimensions, got {}×{}", f.height, f.width));
    }
    Ok(())
}

/// One-level 2D DWT of every channel.
pub fn dwt2(f: &FeatureMap, filters: &FilterPair) -> Result<SubbandSet> {
    check_even(f)?;
    let (h, w) = (f.height, f.width);
    let mut bands: [FeatureMap; 4] = std::array::from_fn(|_| FeatureMap::zeros(f.channels, h / 2, w / 2));
    // (row filter, column filter) per band: LL = L F Lᵀ, LH = H F Lᵀ, HL = L F Hᵀ, HH = H F Hᵀ
    let pairs = [(&filters.low, &filters.low), (&filters.high, &filters.low), (&filters.low, &filters.high), (&filters.high, &filters.high)];
    for c in 0..f.channels {
        for (band, (rf, cf)) in bands.iter_mut().zip(pairs) {
            let out = analyze_plane(f.plane(c), h, w, rf, cf);
            band.plane_mut(c).copy_from_slice(&out);
        }
    }
    Ok(SubbandSet::from_array(bands))
}

/// Adjoint of [`dwt2`]; for orthonormal filters this is also its inverse.
pub fn dwt2_adjoint(s: &SubbandSet, filters: &FilterPair) -> Result<FeatureMap> {
    s.check()?;
    let [c, h2, w2] = s.ll.shape();
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = FeatureMap::zeros(c, h, w);
    let bands = [&s.ll, &s.lh, &s.hl, &s.hh];
    let pairs = [(&filters.low, &filters.low), (&filters.high, &filters.low), (&filters.low, &filters.high), (&filters.high, &filters.high)];
    for ch in 0..c {
        for (band, (rf, cf)) in bands.iter().zip(pairs) {
            synthesize_plane(band.plane(ch), h, w, rf, cf, out.plane_mut(ch));
        }
    }
    Ok(out)
}

/// Inverse one-level transform (exact for orthonormal filters).
pub fn idwt2(s: &SubbandSet, filters: &FilterPair) -> Result<FeatureMap> {
    dwt2_adjoint(s, filters)
}

/// Gradient of a scalar loss w.r.t. the input of [`dwt2`], given its
/// gradients w.r.t. the four sub-bands.
pub fn dwt2_backward(grad: &SubbandSet, filters: &FilterPair) -> Result<FeatureMap> {
    dwt2_adjoint(grad, filters)
}

/// Full wavelet-packet tree of depth `level`: `4^level` leaves, ordered
/// depth-first as LL, LH, HL, HH at every node.
pub fn wavelet_packet(f: &FeatureMap, level: usize, filters: &FilterPair) -> Result<Vec<FeatureMap>> {
    let div = 1usize << level;
    if f.height % div != 0 || f.width % div != 0 {
        return Err(Error::InvalidShape(format!("{}×{} map is not divisible by 2^{level}", f.height, f.width)));
    }
    if level == 0 {
        return Ok(vec![f.clone()]);
    }
    let mut out = Vec::with_capacity(1 << (2 * level));
    for child in dwt2(f, filters)?.into_array() {
        out.extend(wavelet_packet(&child, level - 1, filters)?);
    }
    Ok(out)
}

/// Adjoint of [`wavelet_packet`]: maps leaf gradients back to the root.
pub fn wavelet_packet_backward(leaves: &[FeatureMap], level: usize, filters: &FilterPair) -> Result<FeatureMap> {
    let expected = 1usize << (2 * level);
    if leaves.len() != expected {
        return shape_err(format!("expected {expected} packet leaves, got {}", leaves.len()));
    }
    if level == 0 {
        return Ok(leaves[0].clone());
    }
    let quarter = expected / 4;
    let children: Vec<FeatureMap> = leaves.chunks(quarter).map(|chunk| wavelet_packet_backward(chunk, level - 1, filters)).collect::<Result<_>>()?;
    let arr: [FeatureMap; 4] = children.try_into().expect("four children");
    dwt2_adjoint(&SubbandSet::from_array(arr), filters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn haar_of_constant() {
        let f = FeatureMap::from_fn(2, 4, 6, |_, _, _| 0.75);
        let s = dwt2(&f, &FilterPair::haar()).unwrap();
        assert!(s.ll.data.iter().all(|v| (v - 1.5).abs() < 1e-15));
        for band in [&s.lh, &s.hl, &s.hh] {
            assert!(band.data.iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn haar_2x2_block() {
        let f = FeatureMap::from_data(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = dwt2(&f, &FilterPair::haar()).unwrap();
        assert!((s.ll.data[0] - 5.0).abs() < 1e-15);
        // H along y: (top - bottom)/√2 then L along x
        assert!((s.lh.data[0] - (-2.0)).abs() < 1e-15);
        assert!((s.hl.data[0] - (-1.0)).abs() < 1e-15);
        assert!(s.hh.data[0].abs() < 1e-15);
    }

    #[test]
    fn subband_shapes_halve() {
        let f = FeatureMap::zeros(5, 8, 12);
        let s = dwt2(&f, &FilterPair::haar()).unwrap();
        assert_eq!(s.hh.shape(), [5, 4, 6]);
    }

    #[test]
    fn odd_dimensions_rejected() {
        let f = FeatureMap::zeros(1, 5, 4);
        assert!(matches!(dwt2(&f, &FilterPair::haar()), Err(Error::InvalidShape(_))));
        assert!(wavelet_packet(&FeatureMap::zeros(1, 6, 6), 2, &FilterPair::haar()).is_err());
    }

    #[test]
    fn perfect_reconstruction_both_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for fp in [FilterPair::haar(), FilterPair::db2()] {
            assert!(fp.orthonormality_defect() < 1e-14);
            let f = random_map(&mut rng, 4, 32, 32);
            let back = idwt2(&dwt2(&f, &fp).unwrap(), &fp).unwrap();
            assert!(back.max_abs_diff(&f) < 1e-12);
        }
    }

    #[test]
    fn zero_and_ll_only_reconstructions() {
        let fp = FilterPair::haar();
        let z = SubbandSet::from_array(std::array::from_fn(|_| FeatureMap::zeros(2, 3, 3)));
        assert!(idwt2(&z, &fp).unwrap().data.iter().all(|&v| v == 0.0));
        let f = FeatureMap::from_fn(1, 6, 6, |_, _, _| -0.3);
        let mut s = dwt2(&f, &fp).unwrap();
        s.lh.scale(0.0);
        s.hl.scale(0.0);
        s.hh.scale(0.0);
        assert!(idwt2(&s, &fp).unwrap().max_abs_diff(&f) < 1e-15);
    }

    #[test]
    fn packet_level_zero_is_identity_and_counts_grow() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_map(&mut rng, 3, 16, 16);
        let fp = FilterPair::haar();
        assert_eq!(wavelet_packet(&f, 0, &fp).unwrap(), vec![f.clone()]);
        let p1 = wavelet_packet(&f, 1, &fp).unwrap();
        assert_eq!(p1.len(), 4);
        assert_eq!(p1[0].shape(), [3, 8, 8]);
        let p2 = wavelet_packet(&f, 2, &fp).unwrap();
        assert_eq!(p2.len(), 16);
        let e: f64 = p2.iter().map(FeatureMap::energy).sum();
        assert!((e - f.energy()).abs() <= 1e-10 * f.energy());
        // depth-first order: first four leaves are the packet of LL
        let ll = dwt2(&f, &fp).unwrap().ll;
        assert_eq!(&p2[..4], &wavelet_packet(&ll, 1, &fp).unwrap()[..]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fp = FilterPair::haar();
        let f = random_map(&mut rng, 1, 8, 8);
        let up = SubbandSet::from_array(std::array::from_fn(|_| random_map(&mut rng, 1, 4, 4)));
        let loss = |f: &FeatureMap| {
            let s = dwt2(f, &fp).unwrap();
            s.ll.dot(&up.ll) + s.lh.dot(&up.lh) + s.hl.dot(&up.hl) + s.hh.dot(&up.hh)
        };
        let g = dwt2_backward(&up, &fp).unwrap();
        let h = 1e-5;
        for i in 0..f.data.len() {
            let mut p = f.clone();
            p.data[i] += h;
            let mut m = f.clone();
            m.data[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g.data[i]).abs() <= 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {}", g.data[i]);
        }
        let zero = SubbandSet::from_array(std::array::from_fn(|_| FeatureMap::zeros(1, 4, 4)));
        assert!(dwt2_backward(&zero, &fp).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn packet_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fp = FilterPair::db2();
        let f = random_map(&mut rng, 2, 16, 8);
        let leaves = wavelet_packet(&f, 2, &fp).unwrap();
        let g: Vec<FeatureMap> = leaves.iter().map(|l| random_map(&mut rng, l.channels, l.height, l.width)).collect();
        let lhs: f64 = leaves.iter().zip(&g).map(|(a, b)| a.dot(b)).sum();
        let rhs = f.dot(&wavelet_packet_backward(&g, 2, &fp).unwrap());
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn mismatched_subbands_rejected() {
        let mut s = SubbandSet::from_array(std::array::from_fn(|_| FeatureMap::zeros(1, 2, 2)));
        s.hh = FeatureMap::zeros(1, 2, 3);
        assert!(idwt2(&s, &FilterPair::haar()).is_err());
    }
}
