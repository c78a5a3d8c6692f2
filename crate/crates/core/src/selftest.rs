//! Built-in numerical checks: transform identities and gradient-versus-
//! central-difference comparisons on small seeded problems.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HrfnWidths, LossWeights, ModelConfig};
use crate::hrfn::{Hrfn, HrfnInput, Overrides};
use crate::image::Image;
use crate::loss::total_loss;
use crate::map::FeatureMap;
use crate::params::Parameterized;
use crate::raster::{composite_pixel, pixel_rect, project_all, project_gaussian_backward, render, render_backward, sort_splats, RenderBuffers, Splat2D};
use crate::sampler::{broad_position, narrow_position, pyramid_backward, pyramid_from_map, sample_anchor, sampler_backward, softmax, FrustumConfig};
use crate::scene::{build_covariance, Anchor, Camera, GaussianGrad, GaussianPrimitive};
use crate::wavelet::{dwt2, dwt2_adjoint, idwt2, wavelet_packet, FilterPair, SubbandSet};

pub const WAVELET_MAPS: usize = 200;
pub const TOL_RECONSTRUCTION: f64 = 1e-12;
pub const TOL_ENERGY: f64 = 1e-10;
pub const TOL_ADJOINT: f64 = 1e-10;
pub const TOL_CLOSED_FORM: f64 = 1e-12;
pub const TOL_RASTER_GRAD: f64 = 1e-3;
pub const TOL_SAMPLER_GRAD: f64 = 1e-3;
pub const TOL_HRFN_GRAD: f64 = 1e-4;
pub const TOL_LOSS_GRAD: f64 = 1e-4;
pub const JITTER_DRAWS: usize = 10_000;
const FD_STEP: f64 = 1e-6;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    /// Number of compared quantities.
    pub checked: usize,
    /// Quantities skipped because a perturbation crossed a discontinuity.
    pub excluded: usize,
    pub passed: bool,
    pub seconds: f64,
}

impl CheckResult {
    fn new(name: &str, max_error: f64, tolerance: f64, checked: usize, excluded: usize, start: Instant) -> Self {
        Self {
            name: name.into(),
            max_error,
            tolerance,
            checked,
            excluded,
            passed: max_error.is_finite() && max_error <= tolerance && checked > 0,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

/// Deliberate defects for exercising the failure path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Perturbs the first low-pass tap used by the wavelet checks.
    pub corrupt_dwt: bool,
}

/// `|fd − an| / max(|fd|, |an|, floor)`.
pub fn relative_error(fd: f64, an: f64, floor: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(floor)
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Reconstruction, energy, adjoint and packet-count checks over
/// [`WAVELET_MAPS`] random maps, alternating Haar and Db2.
pub fn check_wavelet(faults: Faults) -> Vec<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let families = [FilterPair::haar(), FilterPair::db2()].map(|mut f| {
        if faults.corrupt_dwt {
            f.low[0] += 1e-3;
        }
        f
    });
    let (mut recon, mut energy, mut adjoint, mut count_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut failures = 0usize;
    for i in 0..WAVELET_MAPS {
        let fp = &families[i % 2];
        let c = rng.random_range(1..4);
        let h = 2 * rng.random_range(2..9);
        let w = 2 * rng.random_range(2..9);
        let f = random_map(&mut rng, c, h, w);
        let g = random_map(&mut rng, c, h / 2, w / 2);
        let Ok(s) = dwt2(&f, fp) else {
            failures += 1;
            continue;
        };
        match idwt2(&s, fp) {
            Ok(back) => recon = recon.max(back.max_abs_diff(&f)),
            Err(_) => failures += 1,
        }
        energy = energy.max((s.energy() - f.energy()).abs() / f.energy());
        let bands = [g.clone(), g.clone(), g.clone(), g];
        let lhs: f64 = s.clone().into_array().iter().zip(&bands).map(|(a, b)| a.dot(b)).sum();
        match dwt2_adjoint(&SubbandSet::from_array(bands), fp) {
            Ok(at) => adjoint = adjoint.max((lhs - f.dot(&at)).abs() / (f.energy().sqrt() * s.energy().sqrt()).max(1e-300)),
            Err(_) => failures += 1,
        }
        let levels = if h % 8 == 0 && w % 8 == 0 {
            3
        } else if h % 4 == 0 && w % 4 == 0 {
            2
        } else {
            1
        };
        for m in 0..=levels {
            match wavelet_packet(&f, m, fp) {
                Ok(leaves) => count_err = count_err.max((leaves.len() as f64 - 4f64.powi(m as i32)).abs()),
                Err(_) => failures += 1,
            }
        }
    }
    let bad = if failures > 0 { f64::INFINITY } else { 0.0 };
    vec![
        CheckResult::new("dwt.reconstruction", recon.max(bad), TOL_RECONSTRUCTION, WAVELET_MAPS, 0, start),
        CheckResult::new("dwt.energy", energy.max(bad), TOL_ENERGY, WAVELET_MAPS, 0, start),
        CheckResult::new("dwt.adjoint", adjoint.max(bad), TOL_ADJOINT, WAVELET_MAPS, 0, start),
        CheckResult::new("dwt.packet_counts", count_err.max(bad), 0.0, WAVELET_MAPS, 0, start),
    ]
}

fn rect_splat(mean: [f64; 2], cov: [f64; 3], opacity: f64, color: [f64; 3], depth: f64, index: usize, size: usize) -> Option<Splat2D> {
    Some(Splat2D { mean, cov, depth, opacity, color, source: (index, 0), index, rect: pixel_rect(mean, cov, size, size)? })
}

fn weighted(img: &Image, up: &Image) -> f64 {
    img.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
}

fn render_signature(b: &RenderBuffers) -> (Vec<usize>, Vec<usize>, Vec<[usize; 4]>) {
    (b.order.clone(), b.walked.clone(), b.sorted.iter().map(|s| [s.rect.x0, s.rect.x1, s.rect.y0, s.rect.y1]).collect())
}

/// Camera and five Gaussians filling a 16×16 view.
pub fn raster_fixture() -> (Camera, Vec<GaussianPrimitive>) {
    let cam = Camera::look_at([0.2, -3.0, 0.4], [0.0; 3], [0.0, 0.0, 1.0], 16, 16, 16.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let gs = (0..5)
        .map(|i| {
            let mean = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.6..0.6), rng.random_range(-0.5..0.5));
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.12..0.35));
            GaussianPrimitive {
                mean,
                cov: build_covariance(&q, &s).unwrap(),
                opacity: rng.random_range(0.3..0.8),
                color: std::array::from_fn(|_| rng.random_range(0.05..0.95)),
                source: (i, 0),
            }
        })
        .collect();
    (cam, gs)
}

/// Two-splat closed form and 2D/3D parameter gradients of a 5-splat 16×16 render.
pub fn check_raster() -> Vec<CheckResult> {
    let start = Instant::now();
    let c1 = [0.9, 0.1, 0.4];
    let c2 = [0.2, 0.7, 0.5];
    let a = rect_splat([3.5, 3.5], [2.0, 0.0, 2.0], 0.5, c1, 1.0, 0, 8).unwrap();
    let b = rect_splat([3.5, 3.5], [2.0, 0.0, 2.0], 0.5, c2, 2.0, 1, 8).unwrap();
    let c = composite_pixel(&sort_splats(&[b, a]), 3, 3, [0.0; 3]);
    let closed = (0..3).map(|k| (c[k] - (0.5 * c1[k] + 0.25 * c2[k])).abs()).fold(0.0, f64::max);
    let mut out = vec![CheckResult::new("raster.two_splat_closed_form", closed, TOL_CLOSED_FORM, 3, 0, start)];

    let (cam, gs) = raster_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let up = Image::from_data(16, 16, (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let bg = [0.1, 0.2, 0.3];
    let splats = project_all(&cam, &gs);
    let start = Instant::now();
    let buffers = render(16, 16, &splats, bg, 8).unwrap();
    let sg = render_backward(&buffers, &up, splats.len()).unwrap();
    let h = FD_STEP;
    let floor = 1e-4;
    // 2D fields; membership boxes held at their unperturbed values
    let (mut err2, mut n2) = (0.0f64, 0usize);
    let obj2 = |s: &[Splat2D]| weighted(&render(16, 16, s, bg, 8).unwrap().image, &up);
    for (i, g) in sg.iter().enumerate() {
        let mut probe = |f: &dyn Fn(&mut Splat2D, f64), an: f64| {
            let (mut p, mut m) = (splats.clone(), splats.clone());
            f(&mut p[i], h);
            f(&mut m[i], -h);
            let fd = (obj2(&p) - obj2(&m)) / (2.0 * h);
            err2 = err2.max(relative_error(fd, an, floor));
            n2 += 1;
        };
        probe(&|s, d| s.mean[0] += d, g.mean[0]);
        probe(&|s, d| s.mean[1] += d, g.mean[1]);
        probe(&|s, d| s.cov[0] += d, g.cov[(0, 0)]);
        probe(&|s, d| s.cov[1] += d, g.cov[(0, 1)] + g.cov[(1, 0)]);
        probe(&|s, d| s.cov[2] += d, g.cov[(1, 1)]);
        probe(&|s, d| s.opacity += d, g.opacity);
        for c in 0..3 {
            probe(&|s, d| s.color[c] += d, g.color[c]);
        }
    }
    out.push(CheckResult::new("raster.splat_gradients", err2, TOL_RASTER_GRAD, n2, 0, start));

    // 3D parameters through the projection
    let start = Instant::now();
    let sig = render_signature(&buffers);
    let mut g3 = vec![GaussianGrad::default(); gs.len()];
    for (s, g) in splats.iter().zip(&sg) {
        g3[s.index] = project_gaussian_backward(&cam, &gs[s.index], g);
    }
    let (mut err3, mut n3, mut skipped) = (0.0f64, 0usize, 0usize);
    let run3 = |gs: &[GaussianPrimitive]| {
        let sp = project_all(&cam, gs);
        let b = render(16, 16, &sp, bg, 8).unwrap();
        (weighted(&b.image, &up), render_signature(&b))
    };
    for i in 0..gs.len() {
        let mut probe = |f: &dyn Fn(&mut GaussianPrimitive, f64), an: f64| {
            let (mut p, mut m) = (gs.to_vec(), gs.to_vec());
            f(&mut p[i], h);
            f(&mut m[i], -h);
            let ((lp, sp), (lm, sm)) = (run3(&p), run3(&m));
            if sp != sig || sm != sig {
                skipped += 1;
                return;
            }
            err3 = err3.max(relative_error((lp - lm) / (2.0 * h), an, floor));
            n3 += 1;
        };
        let g = &g3[i];
        for d in 0..3 {
            probe(&|x, e| x.mean[d] += e, g.mean[d]);
        }
        for r in 0..3 {
            for c in r..3 {
                let an = if r == c { g.cov[(r, c)] } else { g.cov[(r, c)] + g.cov[(c, r)] };
                probe(
                    &|x, e| {
                        x.cov[(r, c)] += e;
                        if r != c {
                            x.cov[(c, r)] += e;
                        }
                    },
                    an,
                );
            }
        }
        probe(&|x, e| x.opacity += e, g.opacity);
        for c in 0..3 {
            probe(&|x, e| x.color[c] += e, g.color[c]);
        }
    }
    out.push(CheckResult::new("raster.gaussian_gradients", err3, TOL_RASTER_GRAD, n3, skipped, start));
    out
}

fn sampler_setup() -> (ModelConfig, Camera, Anchor, FeatureMap) {
    let cfg = ModelConfig { levels: 1, samples: 2, n_r: 32, k: 2, n_v: 4, broad_radius_max: 12.0, broad_radius_min: 0.5, ..ModelConfig::default() };
    let cam = Camera::look_at([0.3, -4.0, 0.5], [0.0; 3], [0.0, 0.0, 1.0], 16, 16, 18.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut a = Anchor::new([0.2, 0.1, -0.15], 0.2, &cfg, &mut rng);
    a.narrow_logits.iter_mut().chain(&mut a.broad_logits).for_each(|v| *v = rng.random_range(-1.0..1.0));
    let map = random_map(&mut ChaCha8Rng::seed_from_u64(9), cfg.n_r, 8, 8);
    (cfg, cam, a, map)
}

/// Refined-feature gradients with respect to the feature map, jitter,
/// fusion logits and anchor position.
pub fn check_sampler() -> Vec<CheckResult> {
    let start = Instant::now();
    let (cfg, cam, a, map) = sampler_setup();
    let fp = FilterPair::haar();
    let frustum = FrustumConfig::from_model(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let up: Vec<f64> = (0..cfg.n_r).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |a: &Anchor, map: &FeatureMap| -> f64 {
        let pyr = pyramid_from_map(map, cfg.levels, &fp).unwrap();
        let s = sample_anchor(a, &cam, &pyr, &frustum).unwrap().unwrap();
        s.refined.iter().zip(&up).map(|(x, y)| x * y).sum()
    };
    let pyr = pyramid_from_map(&map, cfg.levels, &fp).unwrap();
    let s = sample_anchor(&a, &cam, &pyr, &frustum).unwrap().unwrap();
    let mut ga = a.zeros_like();
    let mut gp = pyr.zeros_like();
    sampler_backward(&a, &cam, &pyr, &frustum, &s, &up, &mut gp, &mut ga).unwrap();
    let gmap = pyramid_backward(&gp, &fp).unwrap();
    let h = FD_STEP;
    let floor = 1e-2;
    let (mut err, mut n) = (0.0f64, 0usize);
    for i in 0..map.data.len() {
        let (mut p, mut m) = (map.clone(), map.clone());
        p.data[i] += h;
        m.data[i] -= h;
        err = err.max(relative_error((objective(&a, &p) - objective(&a, &m)) / (2.0 * h), gmap.data[i], floor));
        n += 1;
    }
    let mut flat_a = a.clone();
    let base = flat_a.flatten();
    let grad = ga.clone().flatten();
    let mut names = Vec::new();
    flat_a.visit_params("", &mut |info, d| names.extend(std::iter::repeat_n(info.name.to_string(), d.len())));
    for i in 0..base.len() {
        if !matches!(names[i].as_str(), "narrow_jitter" | "broad_jitter" | "narrow_logits" | "broad_logits" | "position") {
            continue;
        }
        let mut probe = a.clone();
        let mut f = base.clone();
        f[i] += h;
        probe.load_flat(&f).unwrap();
        let lp = objective(&probe, &map);
        f[i] -= 2.0 * h;
        probe.load_flat(&f).unwrap();
        let lm = objective(&probe, &map);
        err = err.max(relative_error((lp - lm) / (2.0 * h), grad[i], floor));
        n += 1;
    }
    vec![CheckResult::new("sampler.gradients", err, TOL_SAMPLER_GRAD, n, 0, start)]
}

/// Parameter and input gradients of a small HRFN.
pub fn check_hrfn() -> Vec<CheckResult> {
    let start = Instant::now();
    let cfg = ModelConfig {
        k: 2,
        n_v: 5,
        n_r: 4,
        n_g: 3,
        hrfn: HrfnWidths { m1: vec![16, 12], m2: vec![12, 10], m3: vec![8, 8], m4: vec![8] },
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = Hrfn::new(&cfg, &mut rng);
    for m in [&mut net.m1, &mut net.m2, &mut net.m3, &mut net.m4] {
        for l in &mut m.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(0.0..0.2));
        }
    }
    let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (fv, fr, fg, up) = (v(cfg.n_v), v(cfg.n_r), v(cfg.n_g), v(3 * cfg.k));
    let ov = Overrides { global: 0.8, refined: 1.2, omega_r: 0.9, omega_v: 1.1 };
    let pos = [0.3, -0.2, 0.45];
    let eval = |net: &Hrfn, pos: [f64; 3], fv: &[f64], fr: &[f64], fg: &[f64]| -> f64 {
        let inp = HrfnInput { position: pos, intrinsic: fv, refined: fr, global: fg, camera_center: [1.5, -3.0, 0.7] };
        net.forward(&inp, &ov).unwrap().colors.iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    let inp = HrfnInput { position: pos, intrinsic: &fv, refined: &fr, global: &fg, camera_center: [1.5, -3.0, 0.7] };
    let trace = net.forward(&inp, &ov).unwrap();
    let mut grad = net.zeros_like();
    let gi = net.backward(&trace, &up, &mut grad).unwrap();
    let h = FD_STEP;
    let floor = 1e-3;
    let (mut err, mut n) = (0.0f64, 0usize);
    let flat = net.flatten();
    let g = grad.flatten();
    let mut probe = net.clone();
    for i in 0..flat.len() {
        let mut f = flat.clone();
        f[i] += h;
        probe.load_flat(&f).unwrap();
        let lp = eval(&probe, pos, &fv, &fr, &fg);
        f[i] -= 2.0 * h;
        probe.load_flat(&f).unwrap();
        let lm = eval(&probe, pos, &fv, &fr, &fg);
        err = err.max(relative_error((lp - lm) / (2.0 * h), g[i], floor));
        n += 1;
    }
    for d in 0..3 {
        let (mut p, mut m) = (pos, pos);
        p[d] += h;
        m[d] -= h;
        err = err.max(relative_error((eval(&net, p, &fv, &fr, &fg) - eval(&net, m, &fv, &fr, &fg)) / (2.0 * h), gi.position[d], floor));
        n += 1;
    }
    for (which, base, an) in [(0, &fv, &gi.intrinsic), (1, &fr, &gi.refined), (2, &fg, &gi.global)] {
        for i in 0..base.len() {
            let (mut p, mut m) = (base.clone(), base.clone());
            p[i] += h;
            m[i] -= h;
            let f = |x: &[f64]| match which {
                0 => eval(&net, pos, x, &fr, &fg),
                1 => eval(&net, pos, &fv, x, &fg),
                _ => eval(&net, pos, &fv, &fr, x),
            };
            err = err.max(relative_error((f(&p) - f(&m)) / (2.0 * h), an[i], floor));
            n += 1;
        }
    }
    vec![CheckResult::new("hrfn.gradients", err, TOL_HRFN_GRAD, n, 0, start)]
}

/// Gradients of the total loss with respect to the render and the visibility map.
pub fn check_loss() -> Vec<CheckResult> {
    let start = Instant::now();
    let (w, h) = (14, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut img = || Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let (r, t) = (img(), img());
    let vm = FeatureMap::from_fn(1, h, w, |_, _, _| rng.random_range(0.1..1.0));
    let lw = LossWeights::default();
    let out = total_loss(&r, &t, &vm, &lw).unwrap();
    let step = FD_STEP;
    let floor = 1e-3;
    let (mut err, mut n, mut skipped) = (0.0f64, 0usize, 0usize);
    for i in 0..r.data.len() {
        let p = i / 3;
        // |vm·(r − t)| has a kink at zero
        if (vm.data[p] * (r.data[i] - t.data[i])).abs() < 1e3 * step {
            skipped += 1;
            continue;
        }
        let (mut a, mut b) = (r.clone(), r.clone());
        a.data[i] += step;
        b.data[i] -= step;
        let fd = (total_loss(&a, &t, &vm, &lw).unwrap().total - total_loss(&b, &t, &vm, &lw).unwrap().total) / (2.0 * step);
        err = err.max(relative_error(fd, out.grad_image.data[i], floor));
        n += 1;
    }
    for p in 0..vm.data.len() {
        let (mut a, mut b) = (vm.clone(), vm.clone());
        a.data[p] += step;
        b.data[p] -= step;
        let fd = (total_loss(&r, &t, &a, &lw).unwrap().total - total_loss(&r, &t, &b, &lw).unwrap().total) / (2.0 * step);
        err = err.max(relative_error(fd, out.grad_vm.data[p], floor));
        n += 1;
    }
    vec![CheckResult::new("loss.gradients", err, TOL_LOSS_GRAD, n, skipped, start)]
}

/// Refined-feature width, fusion normalisation and jitter bounds.
pub fn check_structure() -> Vec<CheckResult> {
    let start = Instant::now();
    let cam = Camera::look_at([0.3, -4.0, 0.5], [0.0; 3], [0.0, 0.0, 1.0], 16, 16, 18.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut dim_err, mut cells) = (0.0f64, 0usize);
    for levels in 0..=2usize {
        for n_r in [24usize, 32, 48] {
            if n_r % (2 * levels + 2) != 0 {
                continue;
            }
            let cfg = ModelConfig { levels, n_r, k: 2, n_v: 4, ..ModelConfig::default() };
            let a = Anchor::new([0.1, 0.0, 0.0], 0.2, &cfg, &mut rng);
            let map = random_map(&mut rng, n_r, 8, 8);
            let got = pyramid_from_map(&map, levels, &FilterPair::haar())
                .and_then(|pyr| sample_anchor(&a, &cam, &pyr, &FrustumConfig::from_model(&cfg)))
                .ok()
                .flatten()
                .map_or(usize::MAX, |s| s.refined.len());
            dim_err = dim_err.max((got as f64 - n_r as f64).abs());
            cells += 1;
        }
    }
    let mut out = vec![CheckResult::new("structure.refined_width", dim_err, 0.0, cells, 0, start)];
    let start = Instant::now();
    let (mut sum_err, mut jitter_err) = (0.0f64, 0.0f64);
    for _ in 0..JITTER_DRAWS {
        let n = rng.random_range(1..22);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        sum_err = sum_err.max((softmax(&logits).iter().sum::<f64>() - 1.0).abs());
        let p = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
        let c = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
        let r = rng.random_range(0.01..40.0);
        let q = narrow_position(p, c, r);
        let b = broad_position(p, c, r);
        for d in 0..2 {
            jitter_err = jitter_err.max((q[d] - p[d]).abs() - r).max((b[d] - p[d]).abs() - r);
        }
    }
    out.push(CheckResult::new("structure.fusion_sum", sum_err, 1e-12, JITTER_DRAWS, 0, start));
    out.push(CheckResult::new("structure.jitter_bounds", jitter_err.max(0.0), 1e-9, JITTER_DRAWS, 0, start));
    out
}

/// Every check, in a fixed order.
pub fn run_all(faults: Faults) -> Vec<CheckResult> {
    let mut out = check_wavelet(faults);
    out.extend(check_raster());
    out.extend(check_sampler());
    out.extend(check_hrfn());
    out.extend(check_loss());
    out.extend(check_structure());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_all(Faults::default()) {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn corrupted_filter_fails_the_wavelet_checks_only() {
        let r = check_wavelet(Faults { corrupt_dwt: true });
        assert!(!r[0].passed && r[0].name == "dwt.reconstruction");
        assert!(r[3].passed);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-3), 0.0);
        assert_eq!(relative_error(0.0, 1e-6, 1e-3), 1e-3);
    }
}
