//! Hierarchical residual fusion network: four MLPs that turn position,
//! intrinsic, refined and global features plus the view direction into the
//! colours of an anchor's `k` Gaussians.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Mlp, MlpTrace};
use crate::params::{join, ParamGroup, ParamInfo, Parameterized, Visitor};
use crate::scene::sigmoid;

/// `x`, then `sin(2^l π x)` and `cos(2^l π x)` for each band `l`.
pub fn positional_encode(x: [f64; 3], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * bands);
    out.extend_from_slice(&x);
    for l in 0..bands {
        let f = (1u64 << l) as f64 * PI;
        out.extend(x.iter().map(|v| (f * v).sin()));
        out.extend(x.iter().map(|v| (f * v).cos()));
    }
    out
}

fn positional_encode_backward(x: [f64; 3], bands: usize, d: &[f64]) -> [f64; 3] {
    let mut dx = [d[0], d[1], d[2]];
    for l in 0..bands {
        let f = (1u64 << l) as f64 * PI;
        let base = 3 + 6 * l;
        for i in 0..3 {
            dx[i] += d[base + i] * f * (f * x[i]).cos();
            dx[i] -= d[base + 3 + i] * f * (f * x[i]).sin();
        }
    }
    dx
}

/// Scalar multipliers applied at render time for appearance tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overrides {
    pub global: f64,
    pub refined: f64,
    pub omega_r: f64,
    pub omega_v: f64,
}

impl Default for Overrides {
    fn default() -> Self {
        Self { global: 1.0, refined: 1.0, omega_r: 1.0, omega_v: 1.0 }
    }
}

/// Per-anchor inputs.
#[derive(Debug, Clone, Copy)]
pub struct HrfnInput<'a> {
    pub position: [f64; 3],
    pub intrinsic: &'a [f64],
    pub refined: &'a [f64],
    pub global: &'a [f64],
    pub camera_center: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hrfn {
    pub k: usize,
    pub pe_bands: usize,
    pub n_v: usize,
    pub n_r: usize,
    pub n_g: usize,
    pub m1: Mlp,
    pub m2: Mlp,
    pub m3: Mlp,
    pub m4: Mlp,
    pub omega_r: f64,
    pub omega_v: f64,
}

/// Activations kept for [`Hrfn::backward`].
#[derive(Debug, Clone)]
pub struct HrfnTrace {
    position: [f64; 3],
    refined: Vec<f64>,
    intrinsic: Vec<f64>,
    overrides: Overrides,
    offset: Vector3<f64>,
    t1: MlpTrace,
    t2: MlpTrace,
    t3: MlpTrace,
    t4: MlpTrace,
    pub colors: Vec<f64>,
}

/// Gradients with respect to the per-anchor inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HrfnInputGrad {
    pub position: [f64; 3],
    pub intrinsic: Vec<f64>,
    pub refined: Vec<f64>,
    pub global: Vec<f64>,
}

impl Hrfn {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let w = &cfg.hrfn;
        let pe = 3 + 6 * cfg.pe_bands;
        let m1 = Mlp::new(pe + cfg.n_v + cfg.n_r + cfg.n_g, &w.m1, true, ParamGroup::Hrfn, rng);
        let m2 = Mlp::new(m1.outputs() + cfg.n_r + cfg.n_v, &w.m2, true, ParamGroup::Hrfn, rng);
        let m3 = Mlp::new(m2.outputs(), &w.m3, true, ParamGroup::Hrfn, rng);
        let mut widths4 = w.m4.clone();
        widths4.push(3 * cfg.k);
        let m4 = Mlp::new(m3.outputs() + 3, &widths4, false, ParamGroup::Hrfn, rng);
        Self { k: cfg.k, pe_bands: cfg.pe_bands, n_v: cfg.n_v, n_r: cfg.n_r, n_g: cfg.n_g, m1, m2, m3, m4, omega_r: 1.0, omega_v: 1.0 }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// `3k` colours in (0, 1), Gaussian-major.
    pub fn forward(&self, input: &HrfnInput<'_>, ov: &Overrides) -> Result<HrfnTrace> {
        if input.intrinsic.len() != self.n_v || input.refined.len() != self.n_r || input.global.len() != self.n_g {
            return Err(Error::InvalidConfig(format!(
                "HRFN expects f_v/f_r/f_g of {}/{}/{} entries, got {}/{}/{}",
                self.n_v,
                self.n_r,
                self.n_g,
                input.intrinsic.len(),
                input.refined.len(),
                input.global.len()
            )));
        }
        let offset = Vector3::from(input.position) - Vector3::from(input.camera_center);
        let dist = offset.norm();
        if !(dist > 0.0) {
            return Err(Error::InvalidGeometry("view direction undefined at the camera centre".into()));
        }
        let dir = offset / dist;
        let refined: Vec<f64> = input.refined.iter().map(|v| v * ov.refined).collect();
        let mut in1 = positional_encode(input.position, self.pe_bands);
        in1.extend_from_slice(input.intrinsic);
        in1.extend_from_slice(&refined);
        in1.extend(input.global.iter().map(|v| v * ov.global));
        let t1 = self.m1.forward(&in1);
        let wr = self.omega_r * ov.omega_r;
        let wv = self.omega_v * ov.omega_v;
        let mut in2 = t1.output().to_vec();
        in2.extend(refined.iter().map(|v| wr * v));
        in2.extend(input.intrinsic.iter().map(|v| wv * v));
        let t2 = self.m2.forward(&in2);
        let t3 = self.m3.forward(t2.output());
        let mut in4 = t3.output().to_vec();
        in4.extend_from_slice(dir.as_slice());
        let t4 = self.m4.forward(&in4);
        let colors = t4.output().iter().map(|&v| sigmoid(v)).collect();
        Ok(HrfnTrace { position: input.position, refined, intrinsic: input.intrinsic.to_vec(), overrides: *ov, offset, t1, t2, t3, t4, colors })
    }

    /// Accumulates parameter gradients into `grad` and returns input gradients.
    pub fn backward(&self, trace: &HrfnTrace, d_colors: &[f64], grad: &mut Hrfn) -> Result<HrfnInputGrad> {
        if d_colors.len() != trace.colors.len() {
            return shape_err(format!("expected {} colour gradients, got {}", trace.colors.len(), d_colors.len()));
        }
        let ov = trace.overrides;
        let d_out: Vec<f64> = d_colors.iter().zip(&trace.colors).map(|(g, c)| g * c * (1.0 - c)).collect();
        let d_in4 = self.m4.backward(&trace.t4, &d_out, &mut grad.m4);
        let h3 = self.m3.outputs();
        let d_h2 = self.m3.backward(&trace.t3, &d_in4[..h3], &mut grad.m3);
        let d_in2 = self.m2.backward(&trace.t2, &d_h2, &mut grad.m2);
        let h1 = self.m1.outputs();
        let (d_h1, rest) = d_in2.split_at(h1);
        let (d_res_r, d_res_v) = rest.split_at(self.n_r);
        let wr = self.omega_r * ov.omega_r;
        let wv = self.omega_v * ov.omega_v;
        grad.omega_r += ov.omega_r * d_res_r.iter().zip(&trace.refined).map(|(a, b)| a * b).sum::<f64>();
        grad.omega_v += ov.omega_v * d_res_v.iter().zip(&trace.intrinsic).map(|(a, b)| a * b).sum::<f64>();
        let d_in1 = self.m1.backward(&trace.t1, d_h1, &mut grad.m1);
        let pe = 3 + 6 * self.pe_bands;
        let mut position = positional_encode_backward(trace.position, self.pe_bands, &d_in1[..pe]);
        let intrinsic: Vec<f64> = (0..self.n_v).map(|i| d_in1[pe + i] + wv * d_res_v[i]).collect();
        let refined: Vec<f64> = (0..self.n_r).map(|i| ov.refined * (d_in1[pe + self.n_v + i] + wr * d_res_r[i])).collect();
        let global: Vec<f64> = d_in1[pe + self.n_v + self.n_r..].iter().map(|g| g * ov.global).collect();
        let dist = trace.offset.norm();
        let dir = trace.offset / dist;
        let d_dir = Vector3::new(d_in4[h3], d_in4[h3 + 1], d_in4[h3 + 2]);
        let dx = (Matrix3::identity() - dir * dir.transpose()) * d_dir / dist;
        for i in 0..3 {
            position[i] += dx[i];
        }
        Ok(HrfnInputGrad { position, intrinsic, refined, global })
    }
}

impl Parameterized for Hrfn {
    fn visit_params(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.m1.visit_params(&join(prefix, "m1"), f);
        self.m2.visit_params(&join(prefix, "m2"), f);
        self.m3.visit_params(&join(prefix, "m3"), f);
        self.m4.visit_params(&join(prefix, "m4"), f);
        let name = join(prefix, "omega_r");
        f(ParamInfo { name: &name, group: ParamGroup::Hrfn, shape: &[1] }, std::slice::from_mut(&mut self.omega_r));
        let name = join(prefix, "omega_v");
        f(ParamInfo { name: &name, group: ParamGroup::Hrfn, shape: &[1] }, std::slice::from_mut(&mut self.omega_v));
    }
}
