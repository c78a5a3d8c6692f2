//! Adam with per-group exponential learning-rate decay.

use std::ops::Range;

use crate::config::{LrRange, OptimConfig};
use crate::error::{shape_err, Error, Result};
use crate::params::{ParamGroup, Parameterized};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// `start · (end / start)^(step / total)`, held at `end` past `total`.
pub fn lr_schedule(range: LrRange, step: usize, total: usize) -> f64 {
    if total == 0 || step >= total {
        return range.end;
    }
    if range.start == range.end || range.start <= 0.0 {
        return range.start;
    }
    range.start * (range.end / range.start).powf(step as f64 / total as f64)
}

/// Flat-vector Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    /// One bias-corrected update. `lr` gives the learning rate of each
    /// contiguous segment of the flat parameter vector.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], segments: &[(Range<usize>, f64)]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return shape_err(format!("optimiser holds {} moments but got {} parameters and {} gradients", self.m.len(), params.len(), grads.len()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence { step: self.step, reason: format!("non-finite gradient at flat index {i}") });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (range, lr) in segments {
            for i in range.clone() {
                let g = grads[i];
                self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                if *lr != 0.0 {
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPSILON);
                }
            }
        }
        Ok(())
    }
}

/// Contiguous flat ranges of `model` with their groups, in visiting order.
pub fn group_layout(model: &mut dyn Parameterized) -> Vec<(Range<usize>, ParamGroup)> {
    let mut out: Vec<(Range<usize>, ParamGroup)> = Vec::new();
    let mut at = 0;
    model.visit_params("", &mut |info, d| {
        let r = at..at + d.len();
        at += d.len();
        match out.last_mut() {
            Some((last, g)) if *g == info.group && last.end == r.start => last.end = r.end,
            _ => out.push((r, info.group)),
        }
    });
    out
}

/// Learning rate of every segment at `step`; frozen groups get 0.
pub fn segment_rates(layout: &[(Range<usize>, ParamGroup)], cfg: &OptimConfig, step: usize, total: usize) -> Vec<(Range<usize>, f64)> {
    layout
        .iter()
        .map(|(r, g)| {
            let lr = if cfg.frozen.contains(g) { 0.0 } else { lr_schedule(cfg.lr.get(*g), step, total) };
            (r.clone(), lr)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LearningRates;

    #[test]
    fn schedule_endpoints() {
        let hrfn = LearningRates::default().hrfn;
        assert_eq!(hrfn.start, 5e-4);
        assert_eq!(hrfn.end, 5e-5);
        assert_eq!(lr_schedule(hrfn, 0, 100), 5e-4);
        assert_eq!(lr_schedule(hrfn, 100, 100), 5e-5);
        assert_eq!(lr_schedule(hrfn, 500, 100), 5e-5);
        let mid = lr_schedule(hrfn, 50, 100);
        assert!((mid - (5e-4f64 * 5e-5).sqrt()).abs() < 1e-15);
        let flat = LrRange::new(5e-3, 5e-3);
        assert_eq!(lr_schedule(flat, 37, 100), 5e-3);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut adam = Adam::new(3);
        let mut p = vec![1.0, 1.0, 1.0];
        adam.step(&mut p, &[0.5, -0.5, 0.0], &[(0..3, 0.01)]).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
        assert_eq!(p[2], 1.0);
        assert!(((1.0 - p[0]) - (p[1] - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradients_diverge() {
        let mut adam = Adam::new(2);
        let mut p = vec![0.0; 2];
        let err = adam.step(&mut p, &[1.0, f64::NAN], &[(0..2, 0.1)]).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert_eq!(p, vec![0.0; 2]);
        assert!(adam.step(&mut p, &[1.0], &[(0..2, 0.1)]).is_err());
    }

    #[test]
    fn layout_merges_adjacent_groups() {
        struct Two(Vec<f64>, Vec<f64>, Vec<f64>);
        impl Parameterized for Two {
            fn visit_params(&mut self, _prefix: &str, f: &mut crate::params::Visitor<'_>) {
                use crate::params::ParamInfo;
                f(ParamInfo { name: "a", group: ParamGroup::Hrfn, shape: &[2] }, &mut self.0);
                f(ParamInfo { name: "b", group: ParamGroup::Hrfn, shape: &[1] }, &mut self.1);
                f(ParamInfo { name: "c", group: ParamGroup::Means, shape: &[3] }, &mut self.2);
            }
        }
        let mut t = Two(vec![0.0; 2], vec![0.0], vec![0.0; 3]);
        let l = group_layout(&mut t);
        assert_eq!(l, vec![(0..3, ParamGroup::Hrfn), (3..6, ParamGroup::Means)]);
        let cfg = OptimConfig { frozen: vec![ParamGroup::Means], ..OptimConfig::default() };
        let r = segment_rates(&l, &cfg, 0, 10);
        assert_eq!(r[0].1, 5e-4);
        assert_eq!(r[1].1, 0.0);
    }
}
