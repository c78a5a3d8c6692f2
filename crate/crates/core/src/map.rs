//! Multi-channel planar feature maps and bilinear sampling.

use crate::error::{Error, Result};

/// Channel-major `C × H × W` map of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::InvalidShape(format!("map data has {} values, expected {channels}×{height}×{width}", data.len())));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channels `[start, start + count)` as a new map.
    pub fn channel_slice(&self, start: usize, count: usize) -> Self {
        let n = self.plane_len();
        Self { channels: count, height: self.height, width: self.width, data: self.data[start * n..(start + count) * n].to_vec() }
    }

    pub fn concat_channels(maps: &[FeatureMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::InvalidShape("no maps to concatenate".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for m in maps {
            if m.height != first.height || m.width != first.width {
                return Err(Error::InvalidShape("spatial shapes differ".into()));
            }
            channels += m.channels;
            data.extend_from_slice(&m.data);
        }
        Ok(Self { channels, height: first.height, width: first.width, data })
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn dot(&self, other: &FeatureMap) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Per-channel spatial mean.
    pub fn channel_means(&self) -> Vec<f64> {
        let n = self.plane_len() as f64;
        (0..self.channels).map(|c| self.plane(c).iter().sum::<f64>() / n).collect()
    }

    /// Bilinear sample of every channel at continuous coordinates `(u, v)`,
    /// where texel `(x, y)` has its centre at `(x + 0.5, y + 0.5)`.
    /// Coordinates outside the texel-centre hull clamp to the edge.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Vec<f64> {
        let tap = BilinearTap::new(self.width, self.height, u, v);
        (0..self.channels).map(|c| tap.eval(self.plane(c), self.width)).collect()
    }

    /// Adds `weight · grad_out` into this (gradient) map at the taps of `(u, v)`
    /// and returns `∂⟨grad_out, sample⟩/∂(u, v)` evaluated on `source`.
    pub fn sample_bilinear_backward(&mut self, source: &FeatureMap, u: f64, v: f64, grad_out: &[f64], weight: f64) -> [f64; 2] {
        let tap = BilinearTap::new(self.width, self.height, u, v);
        let w = self.width;
        let mut du = 0.0;
        let mut dv = 0.0;
        for (c, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let gw = g * weight;
            let plane = self.plane_mut(c);
            plane[tap.y0 * w + tap.x0] += gw * (1.0 - tap.fx) * (1.0 - tap.fy);
            plane[tap.y0 * w + tap.x1] += gw * tap.fx * (1.0 - tap.fy);
            plane[tap.y1 * w + tap.x0] += gw * (1.0 - tap.fx) * tap.fy;
            plane[tap.y1 * w + tap.x1] += gw * tap.fx * tap.fy;
            let src = source.plane(c);
            let (a, b) = (src[tap.y0 * w + tap.x0], src[tap.y0 * w + tap.x1]);
            let (cc, d) = (src[tap.y1 * w + tap.x0], src[tap.y1 * w + tap.x1]);
            if tap.x_free {
                du += g * ((b - a) * (1.0 - tap.fy) + (d - cc) * tap.fy);
            }
            if tap.y_free {
                dv += g * ((cc - a) * (1.0 - tap.fx) + (d - b) * tap.fx);
            }
        }
        [du, dv]
    }
}

/// The four texel indices and fractional weights of one bilinear lookup.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTap {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    /// False when the coordinate was clamped (zero derivative along that axis).
    pub x_free: bool,
    pub y_free: bool,
}

impl BilinearTap {
    pub fn new(width: usize, height: usize, u: f64, v: f64) -> Self {
        let (x0, x1, fx, x_free) = axis(width, u - 0.5);
        let (y0, y1, fy, y_free) = axis(height, v - 0.5);
        Self { x0, x1, y0, y1, fx, fy, x_free, y_free }
    }

    #[inline]
    pub fn eval(&self, plane: &[f64], width: usize) -> f64 {
        let a = plane[self.y0 * width + self.x0];
        let b = plane[self.y0 * width + self.x1];
        let c = plane[self.y1 * width + self.x0];
        let d = plane[self.y1 * width + self.x1];
        (a * (1.0 - self.fx) + b * self.fx) * (1.0 - self.fy) + (c * (1.0 - self.fx) + d * self.fx) * self.fy
    }
}

fn axis(n: usize, t: f64) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    if !(t > 0.0) {
        return (0, 1, 0.0, false);
    }
    if t >= max {
        return (n - 2, n - 1, 1.0, false);
    }
    let i0 = (t.floor() as usize).min(n - 2);
    (i0, i0 + 1, t - i0 as f64, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn affine_map(w: usize, h: usize, a: f64, b: f64, c: f64) -> FeatureMap {
        FeatureMap::from_fn(1, h, w, |_, y, x| a * (x as f64 + 0.5) + b * (y as f64 + 0.5) + c)
    }

    #[test]
    fn constant_map_samples_constant_everywhere() {
        let m = FeatureMap::from_fn(3, 5, 7, |c, _, _| c as f64 + 0.25);
        for &(u, v) in &[(-3.0, 2.0), (3.3, 2.7), (100.0, 100.0), (0.0, 0.0)] {
            assert_eq!(m.sample_bilinear(u, v), vec![0.25, 1.25, 2.25]);
        }
    }

    #[test]
    fn texel_centres_are_exact() {
        let m = FeatureMap::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64);
        assert_eq!(m.sample_bilinear(2.5, 1.5)[0], 6.0);
    }

    #[test]
    fn clamped_axis_has_zero_position_gradient() {
        let m = affine_map(6, 6, 1.0, 2.0, 0.0);
        let mut g = m.zeros_like();
        let d = g.sample_bilinear_backward(&m, -4.0, 3.0, &[1.0], 1.0);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bilinear_is_exact_on_affine_fields(
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
            u in 0.5f64..8.5, v in 0.5f64..6.5,
        ) {
            let m = affine_map(9, 7, a, b, c);
            let s = m.sample_bilinear(u, v)[0];
            prop_assert!((s - (a * u + b * v + c)).abs() < 1e-12);
        }

        #[test]
        fn position_gradient_matches_finite_difference(
            seed in 0u64..1000, u in 0.7f64..5.3, v in 0.7f64..5.3,
        ) {
            let m = FeatureMap::from_fn(2, 6, 6, |c, y, x| ((seed as usize + 31 * c + 7 * y + 3 * x) % 17) as f64 / 17.0);
            // stay away from texel-centre kinks
            prop_assume!(((u - 0.5).fract() - 0.5).abs() < 0.45 && ((v - 0.5).fract() - 0.5).abs() < 0.45);
            let go = [0.7, -1.3];
            let mut g = m.zeros_like();
            let d = g.sample_bilinear_backward(&m, u, v, &go, 1.0);
            let f = |u: f64, v: f64| { let s = m.sample_bilinear(u, v); s[0] * go[0] + s[1] * go[1] };
            let h = 1e-6;
            let fu = (f(u + h, v) - f(u - h, v)) / (2.0 * h);
            let fv = (f(u, v + h) - f(u, v - h)) / (2.0 * h);
            prop_assert!((d[0] - fu).abs() < 1e-6);
            prop_assert!((d[1] - fv).abs() < 1e-6);
        }
    }
}
