//! Visibility-masked photometric loss, SSIM and PSNR.

use crate::config::LossWeights;
use crate::error::{shape_err, Result};
use crate::image::Image;
use crate::map::FeatureMap;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of one channel plane (`h × w` → `(h-10) × (w-10)`).
fn filter_valid(src: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for k in 0..SSIM_WINDOW {
                tmp[(y + k) * ow + x] += win[k] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for k in 0..SSIM_WINDOW {
                out[y * w + x + k] += win[k] * v;
            }
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return shape_err(format!("{}×{} vs {}×{} images", a.width, a.height, b.width, b.height));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return shape_err(format!("images must be at least {SSIM_WINDOW}×{SSIM_WINDOW} for SSIM"));
    }
    Ok(())
}

/// Mean SSIM and, if requested, its gradients with respect to both images.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<(Image, Image)>)> {
    check_shapes(a, b)?;
    let win = gaussian_window();
    let (w, h) = (a.width, a.height);
    let n = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW)) as f64;
    let mut total = 0.0;
    let mut ga = Image::new(w, h);
    let mut gb = Image::new(w, h);
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let sq = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let mx = filter_valid(&x, w, h, &win);
        let my = filter_valid(&y, w, h, &win);
        let exx = filter_valid(&sq(&x, &x), w, h, &win);
        let eyy = filter_valid(&sq(&y, &y), w, h, &win);
        let exy = filter_valid(&sq(&x, &y), w, h, &win);
        let len = mx.len();
        let (mut d_mx, mut d_my, mut d_exx, mut d_eyy, mut d_exy) = (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        for i in 0..len {
            let (ux, uy) = (mx[i], my[i]);
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * (exy[i] - ux * uy) + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = (exx[i] - ux * ux) + (eyy[i] - uy * uy) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let scale = 1.0 / (3.0 * n);
                let (da1, da2) = (a2 / (b1 * b2) * scale, a1 / (b1 * b2) * scale);
                let (db1, db2) = (-s / b1 * scale, -s / b2 * scale);
                d_mx[i] = 2.0 * uy * da1 - 2.0 * uy * da2 + 2.0 * ux * db1 - 2.0 * ux * db2;
                d_my[i] = 2.0 * ux * da1 - 2.0 * ux * da2 + 2.0 * uy * db1 - 2.0 * uy * db2;
                d_exx[i] = db2;
                d_eyy[i] = db2;
                d_exy[i] = 2.0 * da2;
            }
        }
        if want_grad {
            let gmx = filter_valid_adjoint(&d_mx, w, h, &win);
            let gmy = filter_valid_adjoint(&d_my, w, h, &win);
            let gxx = filter_valid_adjoint(&d_exx, w, h, &win);
            let gyy = filter_valid_adjoint(&d_eyy, w, h, &win);
            let gxy = filter_valid_adjoint(&d_exy, w, h, &win);
            for p in 0..w * h {
                ga.data[3 * p + c] = gmx[p] + 2.0 * x[p] * gxx[p] + y[p] * gxy[p];
                gb.data[3 * p + c] = gmy[p] + 2.0 * y[p] * gyy[p] + x[p] * gxy[p];
            }
        }
    }
    let value = total / (3.0 * n);
    Ok((value, want_grad.then_some((ga, gb))))
}

/// Mean SSIM over valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM with gradients `(∂/∂a, ∂/∂b)`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image, Image)> {
    let (v, g) = ssim_impl(a, b, true)?;
    let (ga, gb) = g.expect("requested gradients");
    Ok((v, ga, gb))
}

fn check_vm(img: &Image, vm: &FeatureMap) -> Result<()> {
    if vm.channels != 1 || vm.width != img.width || vm.height != img.height {
        return shape_err(format!("visibility map {:?} does not match a {}×{} image", vm.shape(), img.width, img.height));
    }
    Ok(())
}

fn masked(img: &Image, vm: &FeatureMap) -> Image {
    let mut out = img.clone();
    for (p, px) in out.data.chunks_exact_mut(3).enumerate() {
        px.iter_mut().for_each(|v| *v *= vm.data[p]);
    }
    out
}

/// Mean over pixels and channels of `|vm ⊙ rendered − vm ⊙ target|`.
pub fn masked_l1(rendered: &Image, target: &Image, vm: &FeatureMap) -> Result<f64> {
    if !rendered.same_shape(target) {
        return shape_err("rendered and target images differ in size");
    }
    check_vm(rendered, vm)?;
    let mut s = 0.0;
    for (p, (r, t)) in rendered.data.chunks_exact(3).zip(target.data.chunks_exact(3)).enumerate() {
        for c in 0..3 {
            s += (vm.data[p] * r[c] - vm.data[p] * t[c]).abs();
        }
    }
    Ok(s / rendered.data.len() as f64)
}

/// Loss value, its terms and the gradients with respect to the render and the visibility map.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub ssim: f64,
    pub l1: f64,
    pub vm_reg: f64,
    pub grad_image: Image,
    pub grad_vm: FeatureMap,
}

/// `λ_s (1 − ssim(vm⊙I_r, vm⊙I_gt)) + λ_1 masked_l1 + λ_vm mean((vm − 1)²)`.
pub fn total_loss(rendered: &Image, target: &Image, vm: &FeatureMap, w: &LossWeights) -> Result<LossOutput> {
    check_shapes(rendered, target)?;
    check_vm(rendered, vm)?;
    let a = masked(rendered, vm);
    let b = masked(target, vm);
    let (s, mut da, mut db) = ssim_with_grad(&a, &b)?;
    da.data.iter_mut().for_each(|v| *v *= -w.ssim);
    db.data.iter_mut().for_each(|v| *v *= -w.ssim);
    let n = a.data.len() as f64;
    let mut l1 = 0.0;
    for i in 0..a.data.len() {
        let d = a.data[i] - b.data[i];
        l1 += d.abs();
        let sg = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        da.data[i] += w.l1 * sg / n;
        db.data[i] -= w.l1 * sg / n;
    }
    l1 /= n;
    let pixels = vm.data.len() as f64;
    let vm_reg = vm.data.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>() / pixels;
    let mut grad_image = Image::new(rendered.width, rendered.height);
    let mut grad_vm = vm.zeros_like();
    for p in 0..vm.data.len() {
        let mut g = 2.0 * w.vm * (vm.data[p] - 1.0) / pixels;
        for c in 0..3 {
            let i = 3 * p + c;
            grad_image.data[i] = vm.data[p] * da.data[i];
            g += rendered.data[i] * da.data[i] + target.data[i] * db.data[i];
        }
        grad_vm.data[p] = g;
    }
    Ok(LossOutput { total: w.ssim * (1.0 - s) + w.l1 * l1 + w.vm * vm_reg, ssim: s, l1, vm_reg, grad_image, grad_vm })
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return shape_err("images differ in size");
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

/// `10 log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn vm_const(w: usize, h: usize, v: f64) -> FeatureMap {
        FeatureMap::from_fn(1, h, w, |_, _, _| v)
    }

    #[test]
    fn l1_examples() {
        let a = random_image(12, 12, 1);
        let b = random_image(12, 12, 2);
        assert_eq!(masked_l1(&a, &a, &vm_const(12, 12, 1.0)).unwrap(), 0.0);
        assert_eq!(masked_l1(&a, &b, &vm_const(12, 12, 0.0)).unwrap(), 0.0);
        let one = Image::filled(12, 12, [1.0; 3]);
        assert_eq!(masked_l1(&one, &Image::new(12, 12), &vm_const(12, 12, 1.0)).unwrap(), 1.0);
        assert!(masked_l1(&a, &Image::new(11, 12), &vm_const(12, 12, 1.0)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = random_image(16, 14, 3);
        let b = random_image(16, 14, 4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let mut checker = Image::new(16, 16);
        let mut inverse = Image::new(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                let v = ((x + y) % 2) as f64;
                checker.set_pixel(x, y, [v; 3]);
                inverse.set_pixel(x, y, [1.0 - v; 3]);
            }
        }
        assert!(ssim(&checker, &inverse).unwrap() < 0.0);
        assert!(ssim(&Image::new(10, 16), &Image::new(10, 16)).is_err());
    }

    /// Closed form for the checkerboard pair: the window means agree to
    /// within the window's centre imbalance and the covariance is −σ².
    #[test]
    fn checkerboard_matches_closed_form() {
        let win = gaussian_window();
        let mut checker = Image::new(11, 11);
        let mut inverse = Image::new(11, 11);
        for y in 0..11 {
            for x in 0..11 {
                let v = ((x + y) % 2) as f64;
                checker.set_pixel(x, y, [v; 3]);
                inverse.set_pixel(x, y, [1.0 - v; 3]);
            }
        }
        let mut mu = 0.0;
        for y in 0..11 {
            for x in 0..11 {
                mu += win[y] * win[x] * ((x + y) % 2) as f64;
            }
        }
        let (mx, my) = (mu, 1.0 - mu);
        let (vx, vy) = (mu - mu * mu, my - my * my);
        let cov = -mx * my;
        let want = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        assert!((ssim(&checker, &inverse).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(4, 4, 5);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = Image::filled(4, 4, [0.5; 3]);
        let c = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&b, &c).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&b, &c).unwrap(), psnr(&c, &b).unwrap());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let a = random_image(12, 12, 6);
        assert_eq!(total_loss(&a, &a, &vm_const(12, 12, 1.0), &w).unwrap().total, 0.0);
        let half = total_loss(&a, &a, &vm_const(12, 12, 0.5), &w).unwrap().total;
        assert!((half - w.vm * 0.25).abs() < 1e-12);
    }

    fn loss_of(r: &Image, t: &Image, vm: &FeatureMap) -> f64 {
        total_loss(r, t, vm, &LossWeights::default()).unwrap().total
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let r = random_image(13, 12, 7);
        let t = random_image(13, 12, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vm = FeatureMap::from_fn(1, 12, 13, |_, _, _| rng.random_range(0.1..0.9));
        let out = total_loss(&r, &t, &vm, &LossWeights::default()).unwrap();
        let h = 1e-6;
        let ok = |fd: f64, an: f64| (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-4);
        for i in (0..r.data.len()).step_by(5) {
            let (mut p, mut m) = (r.clone(), r.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (loss_of(&p, &t, &vm) - loss_of(&m, &t, &vm)) / (2.0 * h);
            assert!(ok(fd, out.grad_image.data[i]), "image {i}: {fd} vs {}", out.grad_image.data[i]);
        }
        for i in 0..vm.data.len() {
            let (mut p, mut m) = (vm.clone(), vm.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (loss_of(&r, &t, &p) - loss_of(&r, &t, &m)) / (2.0 * h);
            assert!(ok(fd, out.grad_vm.data[i]), "vm {i}: {fd} vs {}", out.grad_vm.data[i]);
        }
    }

    #[test]
    fn regulariser_alone_pushes_visibility_up() {
        let w = LossWeights { ssim: 0.0, l1: 0.0, vm: 0.15 };
        let a = random_image(12, 12, 10);
        let mut vm = FeatureMap::from_fn(1, 12, 12, |_, y, x| 0.05 + 0.006 * (y * 12 + x) as f64);
        let mut prev = vm.clone();
        for _ in 0..20 {
            let out = total_loss(&a, &a, &vm, &w).unwrap();
            for (v, g) in vm.data.iter_mut().zip(&out.grad_vm.data) {
                *v -= 100.0 * g;
            }
            assert!(vm.data.iter().zip(&prev.data).all(|(n, o)| n > o && *n <= 1.0));
            prev = vm.clone();
        }
    }

    proptest! {
        #[test]
        fn loss_is_non_negative(seed in 0u64..1000, v in 0.0..=1.0f64) {
            let r = random_image(11, 11, seed);
            let t = random_image(11, 11, seed + 1);
            let out = total_loss(&r, &t, &vm_const(11, 11, v), &LossWeights::default()).unwrap();
            prop_assert!(out.total >= 0.0);
        }
    }
}
