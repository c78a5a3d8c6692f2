//! Frame-time measurement of the forward pipeline: encode, sample + decode,
//! then an `f32` rasterisation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RenderConfig};
use crate::error::{Error, Result};
use crate::hrfn::Overrides;
use crate::image::Image;
use crate::model::Model;
use crate::raster::{project_all, render_image};
use crate::scene::Camera;

pub const MIN_FRAMES: usize = 100;
pub const WARMUP_FRAMES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl Timing {
    fn from_ms(mut v: Vec<f64>) -> Self {
        v.sort_by(f64::total_cmp);
        let pick = |q: f64| v[((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
        Self { mean: v.iter().sum::<f64>() / v.len() as f64, p50: pick(0.5), p95: pick(0.95) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    /// Appearance encoding of the reference image.
    pub encode_ms: f64,
    /// Wavelet sampling, colour decoding and anchor expansion.
    pub sample_decode_ms: f64,
    /// Projection plus rasterisation.
    pub raster_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub resolution: [usize; 2],
    pub gaussian_count: usize,
    pub frames: usize,
    pub warmup: usize,
    pub ms_per_frame: Timing,
    pub fps: f64,
    /// Mean per-stage time.
    pub stages: StageTimings,
}

/// Renders `frames` timed frames of `cam` after `warmup` untimed ones. Each
/// frame re-encodes `reference` so feature extraction is included.
pub fn bench(model: &Model, cam: &Camera, reference: (Option<usize>, &Image), render_cfg: &RenderConfig, frames: usize, warmup: usize) -> Result<BenchReport> {
    if frames == 0 {
        return Err(Error::InvalidConfig("bench needs at least one frame".into()));
    }
    let ov = Overrides::default();
    let mut total = Vec::with_capacity(frames);
    let (mut enc, mut dec, mut ras) = (0.0, 0.0, 0.0);
    for f in 0..warmup + frames {
        let t0 = Instant::now();
        let (bundle, _) = model.encode(reference.0, reference.1)?;
        let t1 = Instant::now();
        let d = model.decode(cam, &bundle, &ov)?;
        let t2 = Instant::now();
        let splats = project_all(cam, &d.gaussians);
        let img = render_image::<f32>(cam.width, cam.height, &splats, render_cfg.background, render_cfg.tile_size);
        let t3 = Instant::now();
        std::hint::black_box(img);
        if f >= warmup {
            let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
            enc += ms(t0, t1);
            dec += ms(t1, t2);
            ras += ms(t2, t3);
            total.push(ms(t0, t3));
        }
    }
    let n = frames as f64;
    let timing = Timing::from_ms(total);
    Ok(BenchReport {
        resolution: [cam.width, cam.height],
        gaussian_count: model.num_gaussians(),
        frames,
        warmup,
        fps: 1e3 / timing.mean.max(1e-9),
        ms_per_frame: timing,
        stages: StageTimings { encode_ms: enc / n, sample_decode_ms: dec / n, raster_ms: ras / n },
    })
}

/// Model with `anchors` anchors on a regular grid, plus a camera
/// looking at it, for timing without a dataset.
pub fn bench_scene(cfg: &ModelConfig, anchors: usize, width: usize, height: usize, seed: u64) -> Result<(Model, Camera)> {
    // one point per voxel so the anchor count is exact
    let span = ((anchors as f64).cbrt().ceil() as i64).max(1);
    let mut grid = Vec::with_capacity(anchors);
    'outer: for x in 0..span {
        for y in 0..span {
            for z in 0..span {
                if grid.len() == anchors {
                    break 'outer;
                }
                grid.push([x, y, z].map(|i| (i as f64 - span as f64 / 2.0 + 0.5) * cfg.voxel_size * 1.5));
            }
        }
    }
    let model = Model::new(cfg, &grid, 1, width, height, seed)?;
    let extent = span as f64 * cfg.voxel_size * 1.5;
    let cam = Camera::look_at([0.3 * extent, -2.5 * extent.max(0.5), 0.4 * extent], [0.0; 3], [0.0, 0.0, 1.0], width, height, width as f64)?;
    Ok((model, cam))
}
