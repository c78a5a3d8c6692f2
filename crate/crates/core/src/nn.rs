//! Small dense and convolutional layers with explicit reverse passes.

use rand::Rng;

use crate::map::FeatureMap;
use crate::params::{join, ParamGroup, ParamInfo, Parameterized, Visitor};

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Fully-connected layer, weights stored row-major `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Symmetric uniform init with bound `sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        Self { inputs, outputs, weight: (0..inputs * outputs).map(|_| rng.random_range(-a..a)).collect(), bias: vec![0.0; outputs] }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

/// Stack of linear layers with ReLU between them (and optionally after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
    pub group: ParamGroup,
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input of every layer, then the final output.
    pub acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("non-empty trace")
    }
}

impl Mlp {
    /// `widths` lists every layer's output size.
    pub fn new(inputs: usize, widths: &[usize], relu_last: bool, group: ParamGroup, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = inputs;
        for &w in widths {
            layers.push(Linear::new(fan_in, w, rng));
            fan_in = w;
        }
        Self { layers, relu_last, group }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, x: &[f64]) -> MlpTrace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(acts.last().unwrap());
            if i + 1 < n || self.relu_last {
                y.iter_mut().for_each(|v| *v = relu(*v));
            }
            acts.push(y);
        }
        MlpTrace { acts }
    }

    pub fn backward(&self, trace: &MlpTrace, dy: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let n = self.layers.len();
        let mut d = dy.to_vec();
        for i in (0..n).rev() {
            if i + 1 < n || self.relu_last {
                // ReLU mask from the post-activation value
                for (g, &a) in d.iter_mut().zip(&trace.acts[i + 1]) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            d = self.layers[i].backward(&trace.acts[i], &d, &mut grad.layers[i]);
        }
        d
    }
}

impl Parameterized for Mlp {
    fn visit_params(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        let group = self.group;
        for (i, l) in self.layers.iter_mut().enumerate() {
            let shape_w = [l.outputs, l.inputs];
            let shape_b = [l.outputs];
            let name = join(prefix, &format!("layer{i}.weight"));
            f(ParamInfo { name: &name, group, shape: &shape_w }, &mut l.weight);
            let name = join(prefix, &format!("layer{i}.bias"));
            f(ParamInfo { name: &name, group, shape: &shape_b }, &mut l.bias);
        }
    }
}

/// 3×3 convolution with zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `out × in × 3 × 3`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / ((in_channels + out_channels) * 9) as f64).sqrt();
        Self {
            in_channels,
            out_channels,
            stride,
            weight: (0..out_channels * in_channels * 9).map(|_| rng.random_range(-a..a)).collect(),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let (oh, ow) = self.output_size(x.height, x.width);
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        let (h, w) = (x.height as isize, x.width as isize);
        for o in 0..self.out_channels {
            let plane = out.plane_mut(o);
            plane.iter_mut().for_each(|v| *v = self.bias[o]);
            for c in 0..self.in_channels {
                let src = x.plane(c);
                let k = &self.weight[(o * self.in_channels + c) * 9..(o * self.in_channels + c) * 9 + 9];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            let iy = (oy * self.stride + ky) as isize - 1;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * self.stride + kx) as isize - 1;
                                if ix < 0 || ix >= w {
                                    continue;
                                }
                                acc += k[ky * 3 + kx] * src[iy as usize * x.width + ix as usize];
                            }
                        }
                        plane[oy * ow + ox] += acc;
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, x: &FeatureMap, dy: &FeatureMap, grad: &mut Conv2d) -> FeatureMap {
        let mut dx = x.zeros_like();
        let (h, w) = (x.height as isize, x.width as isize);
        let (oh, ow) = (dy.height, dy.width);
        for o in 0..self.out_channels {
            let g = dy.plane(o);
            grad.bias[o] += g.iter().sum::<f64>();
            for c in 0..self.in_channels {
                let base = (o * self.in_channels + c) * 9;
                let src = x.plane(c);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[oy * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..3 {
                            let iy = (oy * self.stride + ky) as isize - 1;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * self.stride + kx) as isize - 1;
                                if ix < 0 || ix >= w {
                                    continue;
                                }
                                let at = iy as usize * x.width + ix as usize;
                                grad.weight[base + ky * 3 + kx] += gv * src[at];
                                dx.plane_mut(c)[at] += gv * self.weight[base + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        let shape_w = [self.out_channels, self.in_channels, 3, 3];
        let shape_b = [self.out_channels];
        let name = join(prefix, "weight");
        f(ParamInfo { name: &name, group: ParamGroup::Encoder, shape: &shape_w }, &mut self.weight);
        let name = join(prefix, "bias");
        f(ParamInfo { name: &name, group: ParamGroup::Encoder, shape: &shape_b }, &mut self.bias);
    }
}

pub fn relu_map(x: &FeatureMap) -> FeatureMap {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = relu(*v));
    y
}

/// Masks `dy` where the ReLU output `y` is not positive.
pub fn relu_map_backward(y: &FeatureMap, dy: &FeatureMap) -> FeatureMap {
    let mut d = dy.clone();
    for (g, &a) in d.data.iter_mut().zip(&y.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
    d
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    FeatureMap::from_fn(x.channels, x.height * 2, x.width * 2, |c, y, xx| x.at(c, y / 2, xx / 2))
}

pub fn upsample2_backward(dy: &FeatureMap) -> FeatureMap {
    let mut d = FeatureMap::zeros(dy.channels, dy.height / 2, dy.width / 2);
    for c in 0..dy.channels {
        for y in 0..dy.height {
            for x in 0..dy.width {
                *d.at_mut(c, y / 2, x / 2) += dy.at(c, y, x);
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::new(5, &[7, 4], false, ParamGroup::Hrfn, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |m: &Mlp, x: &[f64]| m.forward(x).output().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let mut grad = mlp.clone();
        grad.fill(0.0);
        let dx = mlp.backward(&mlp.forward(&x), &up, &mut grad);
        let h = 1e-6;
        for i in 0..5 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&mlp, &p) - loss(&mlp, &m)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7);
        }
        let mut probe = mlp.clone();
        let flat = probe.flatten();
        let g = grad.clone().flatten();
        for i in (0..flat.len()).step_by(3) {
            let mut f = flat.clone();
            f[i] += h;
            probe.load_flat(&f).unwrap();
            let lp = loss(&probe, &x);
            f[i] -= 2.0 * h;
            probe.load_flat(&f).unwrap();
            let lm = loss(&probe, &x);
            assert!(((lp - lm) / (2.0 * h) - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let conv = Conv2d::new(2, 3, 2, &mut rng);
        let x = FeatureMap::from_fn(2, 6, 6, |_, _, _| rng.random_range(-1.0..1.0));
        let y = conv.forward(&x);
        assert_eq!(y.shape(), [3, 3, 3]);
        let up = FeatureMap::from_fn(3, 3, 3, |c, yy, xx| ((c * 9 + yy * 3 + xx) as f64 * 0.37).sin());
        let mut grad = conv.clone();
        grad.fill(0.0);
        let dx = conv.backward(&x, &up, &mut grad);
        let h = 1e-6;
        for i in 0..x.data.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (conv.forward(&p).dot(&up) - conv.forward(&m).dot(&up)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-7);
        }
        let mut probe = conv.clone();
        let flat = probe.flatten();
        let g = grad.flatten();
        for i in 0..flat.len() {
            let mut f = flat.clone();
            f[i] += h;
            probe.load_flat(&f).unwrap();
            let lp = probe.forward(&x).dot(&up);
            f[i] -= 2.0 * h;
            probe.load_flat(&f).unwrap();
            let lm = probe.forward(&x).dot(&up);
            assert!(((lp - lm) / (2.0 * h) - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn upsample_adjoint() {
        let x = FeatureMap::from_fn(2, 3, 4, |c, y, xx| (c + y * 3 + xx) as f64);
        let d = FeatureMap::from_fn(2, 6, 8, |c, y, xx| ((c * 48 + y * 8 + xx) as f64).cos());
        assert!((upsample2(&x).dot(&d) - x.dot(&upsample2_backward(&d))).abs() < 1e-12);
    }
}
