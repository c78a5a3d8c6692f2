//! EWA projection of 3D Gaussians, tile-binned front-to-back alpha
//! compositing, and the analytic reverse pass.
//!
//! A splat touches a pixel iff the pixel centre lies inside the splat's 3σ
//! axis-aligned box. Tiles only decide which splats are *tested* for a
//! pixel, so any tile size produces bit-identical images.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;
use crate::scene::{Camera, GaussianGrad, GaussianPrimitive, NEAR_PLANE};

/// Added to the diagonal of every projected covariance, px².
pub const DILATION: f64 = 0.3;
/// Upper clamp of the per-splat opacity after the Gaussian falloff.
pub const ALPHA_MAX: f64 = 0.99;
/// Compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

/// Inclusive pixel-index rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl PixelRect {
    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// A projected Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean: [f64; 2],
    /// Symmetric 2D covariance `(xx, xy, yy)` including dilation.
    pub cov: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub source: (usize, usize),
    /// Index of the Gaussian this splat came from.
    pub index: usize,
    pub rect: PixelRect,
}

impl Splat2D {
    pub fn conic(&self) -> [f64; 3] {
        let [a, b, c] = self.cov;
        let det = a * c - b * b;
        [c / det, -b / det, a / det]
    }
}

/// 3σ box of a splat clipped to the image, or `None` if it misses.
pub fn pixel_rect(mean: [f64; 2], cov: [f64; 3], width: usize, height: usize) -> Option<PixelRect> {
    let ex = 3.0 * cov[0].sqrt();
    let ey = 3.0 * cov[2].sqrt();
    let lo = |m: f64, e: f64| (m - e - 0.5).ceil();
    let hi = |m: f64, e: f64| (m + e - 0.5).floor();
    let (x0, x1) = (lo(mean[0], ex).max(0.0), hi(mean[0], ex).min(width as f64 - 1.0));
    let (y0, y1) = (lo(mean[1], ey).max(0.0), hi(mean[1], ey).min(height as f64 - 1.0));
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some(PixelRect { x0: x0 as usize, x1: x1 as usize, y0: y0 as usize, y1: y1 as usize })
}

struct Projection {
    t: Vector3<f64>,
    w: Matrix3<f64>,
    j: Matrix2x3<f64>,
}

fn projection(cam: &Camera, mean: &Vector3<f64>) -> Option<Projection> {
    let w = cam.rotation();
    let t = w * (mean - cam.center());
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let (z, z2) = (t.z, t.z * t.z);
    let j = Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * t.x / z2, 0.0, cam.fy / z, -cam.fy * t.y / z2);
    Some(Projection { t, w, j })
}

/// EWA projection; `None` when behind the near plane or entirely off-screen.
pub fn project_gaussian(cam: &Camera, g: &GaussianPrimitive, index: usize) -> Option<Splat2D> {
    let p = projection(cam, &g.mean)?;
    let m = p.j * p.w;
    let c2: Matrix2<f64> = m * g.cov * m.transpose();
    let cov = [c2[(0, 0)] + DILATION, 0.5 * (c2[(0, 1)] + c2[(1, 0)]), c2[(1, 1)] + DILATION];
    let mean = [cam.fx * p.t.x / p.t.z + cam.cx, cam.fy * p.t.y / p.t.z + cam.cy];
    if !(mean.iter().chain(cov.iter()).all(|v| v.is_finite())) {
        return None;
    }
    let rect = pixel_rect(mean, cov, cam.width, cam.height)?;
    Some(Splat2D { mean, cov, depth: p.t.z, opacity: g.opacity, color: g.color, source: g.source, index, rect })
}

/// Projects every Gaussian; culled ones are dropped.
pub fn project_all(cam: &Camera, gaussians: &[GaussianPrimitive]) -> Vec<Splat2D> {
    gaussians.iter().enumerate().filter_map(|(i, g)| project_gaussian(cam, g, i)).collect()
}

/// Gradient of a scalar w.r.t. one splat's fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplatGrad {
    pub mean: [f64; 2],
    /// Full-matrix gradient w.r.t. the (symmetric) 2D covariance.
    pub cov: Matrix2<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        self.cov += o.cov;
        self.opacity += o.opacity;
        for c in 0..3 {
            self.color[c] += o.color[c];
        }
    }
}

/// Chains a splat gradient through the EWA projection to the Gaussian's
/// mean and covariance; opacity and colour pass straight through.
pub fn project_gaussian_backward(cam: &Camera, g: &GaussianPrimitive, sg: &SplatGrad) -> GaussianGrad {
    let Some(p) = projection(cam, &g.mean) else {
        return GaussianGrad::default();
    };
    let m = p.j * p.w;
    let g2 = 0.5 * (sg.cov + sg.cov.transpose());
    let d_cov3 = m.transpose() * g2 * m;
    let d_m = 2.0 * g2 * m * g.cov;
    let d_j = d_m * p.w.transpose();
    let (x, y, z) = (p.t.x, p.t.y, p.t.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut dt = Vector3::zeros();
    dt.x += d_j[(0, 2)] * (-fx / z2) + sg.mean[0] * fx / z;
    dt.y += d_j[(1, 2)] * (-fy / z2) + sg.mean[1] * fy / z;
    dt.z += d_j[(0, 0)] * (-fx / z2) + d_j[(0, 2)] * (2.0 * fx * x / z3) + d_j[(1, 1)] * (-fy / z2) + d_j[(1, 2)] * (2.0 * fy * y / z3)
        - sg.mean[0] * fx * x / z2
        - sg.mean[1] * fy * y / z2;
    GaussianGrad { mean: p.w.transpose() * dt, cov: d_cov3, opacity: sg.opacity, color: sg.color }
}

/// Splat reduced to what the compositor reads, in the working precision.
#[derive(Debug, Clone, Copy)]
pub struct PackedSplat<F> {
    pub mean: [F; 2],
    pub conic: [F; 3],
    pub opacity: F,
    pub color: [F; 3],
    pub depth: F,
    pub rect: PixelRect,
}

impl<F: Float> PackedSplat<F> {
    pub fn from_splat(s: &Splat2D) -> Self {
        let f = |v: f64| F::from(v).expect("representable");
        let c = s.conic();
        Self { mean: s.mean.map(f), conic: c.map(f), opacity: f(s.opacity), color: s.color.map(f), depth: f(s.depth), rect: s.rect }
    }

    /// `(α', G)` at pixel `(x, y)` and whether the 0.99 clamp was hit.
    #[inline]
    fn alpha_at(&self, x: usize, y: usize) -> (F, F, bool) {
        let half = F::from(0.5).unwrap();
        let dx = F::from(x).unwrap() + half - self.mean[0];
        let dy = F::from(y).unwrap() + half - self.mean[1];
        let q = self.conic[0] * dx * dx + (self.conic[1] + self.conic[1]) * dx * dy + self.conic[2] * dy * dy;
        let g = (-half * q).exp();
        let a = self.opacity * g;
        let max = F::from(ALPHA_MAX).unwrap();
        if a > max {
            (max, g, true)
        } else {
            (a, g, false)
        }
    }
}

/// Result of compositing one pixel.
#[derive(Debug, Clone, Copy)]
pub struct PixelResult<F> {
    pub color: [F; 3],
    pub depth: F,
    pub transmittance: F,
    /// Number of list entries walked (covered or not) before stopping.
    pub walked: usize,
}

/// Front-to-back compositing over `list` (indices into `splats`, depth-sorted).
pub fn composite_list<F: Float>(splats: &[PackedSplat<F>], list: impl IntoIterator<Item = usize>, x: usize, y: usize, background: [F; 3]) -> PixelResult<F> {
    let mut t = F::one();
    let mut color = [F::zero(); 3];
    let mut depth = F::zero();
    let mut walked = 0;
    let t_min = F::from(TRANSMITTANCE_MIN).unwrap();
    for (n, i) in list.into_iter().enumerate() {
        let s = &splats[i];
        if !s.rect.contains(x, y) {
            continue;
        }
        let (a, _, _) = s.alpha_at(x, y);
        let w = a * t;
        for c in 0..3 {
            color[c] = color[c] + s.color[c] * w;
        }
        depth = depth + s.depth * w;
        t = t * (F::one() - a);
        walked = n + 1;
        if t < t_min {
            break;
        }
    }
    for c in 0..3 {
        color[c] = color[c] + t * background[c];
    }
    PixelResult { color, depth, transmittance: t, walked }
}

/// Composite of one pixel over depth-sorted splats (no tiling).
pub fn composite_pixel(sorted: &[Splat2D], x: usize, y: usize, background: [f64; 3]) -> [f64; 3] {
    let packed: Vec<PackedSplat<f64>> = sorted.iter().map(PackedSplat::from_splat).collect();
    composite_list(&packed, 0..packed.len(), x, y, background).color
}

/// Sorts splats by depth, ties broken by (anchor id, offset id).
pub fn sort_splats(splats: &[Splat2D]) -> Vec<Splat2D> {
    sort_order(splats).into_iter().map(|i| splats[i].clone()).collect()
}

/// Positions into `splats` in compositing order.
pub fn sort_order(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&splats[i], &splats[j]);
        a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)).then(a.index.cmp(&b.index)).then(i.cmp(&j))
    });
    order
}

/// Forward state retained for [`render_backward`].
#[derive(Debug, Clone)]
pub struct RenderBuffers {
    pub image: Image,
    /// Expected depth `Σ z_i α'_i T_i` (background contributes nothing).
    pub depth: Vec<f64>,
    /// Final transmittance per pixel.
    pub transmittance: Vec<f64>,
    /// List entries walked per pixel.
    pub walked: Vec<usize>,
    pub sorted: Vec<Splat2D>,
    /// `sorted[i]` is input splat `order[i]`.
    pub order: Vec<usize>,
    /// Per-tile lists of indices into `sorted`.
    pub tiles: Vec<Vec<usize>>,
    pub tile_size: usize,
    pub background: [f64; 3],
}

struct TileGeometry {
    tiles_x: usize,
    tiles_y: usize,
}

fn tile_geometry(width: usize, height: usize, tile: usize) -> TileGeometry {
    TileGeometry { tiles_x: width.div_ceil(tile), tiles_y: height.div_ceil(tile) }
}

fn bin_splats(sorted: &[Splat2D], geo: &TileGeometry, tile: usize) -> Vec<Vec<usize>> {
    let mut tiles = vec![Vec::new(); geo.tiles_x * geo.tiles_y];
    for (i, s) in sorted.iter().enumerate() {
        let (ty1, tx1) = ((s.rect.y1 / tile).min(geo.tiles_y - 1), (s.rect.x1 / tile).min(geo.tiles_x - 1));
        for ty in s.rect.y0 / tile..=ty1 {
            for tx in s.rect.x0 / tile..=tx1 {
                tiles[ty * geo.tiles_x + tx].push(i);
            }
        }
    }
    tiles
}

fn tile_pixels(t: usize, geo: &TileGeometry, tile: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (t % geo.tiles_x, t / geo.tiles_x);
    let xs = tx * tile..((tx + 1) * tile).min(width);
    let ys = ty * tile..((ty + 1) * tile).min(height);
    ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
}

/// Renders `splats` into a `width × height` image.
pub fn render(width: usize, height: usize, splats: &[Splat2D], background: [f64; 3], tile_size: usize) -> Result<RenderBuffers> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidParameter("zero-size image".into()));
    }
    if tile_size == 0 {
        return Err(Error::InvalidParameter("tile size must be ≥ 1".into()));
    }
    let order = sort_order(splats);
    let sorted: Vec<Splat2D> = order.iter().map(|&i| splats[i].clone()).collect();
    let packed: Vec<PackedSplat<f64>> = sorted.iter().map(PackedSplat::from_splat).collect();
    let geo = tile_geometry(width, height, tile_size);
    let tiles = bin_splats(&sorted, &geo, tile_size);
    let results = par::map_indexed(tiles.len(), |t| {
        tile_pixels(t, &geo, tile_size, width, height)
            .map(|(x, y)| (x, y, composite_list(&packed, tiles[t].iter().copied(), x, y, background)))
            .collect::<Vec<_>>()
    });
    let mut image = Image::new(width, height);
    let mut depth = vec![0.0; width * height];
    let mut transmittance = vec![1.0; width * height];
    let mut walked = vec![0; width * height];
    for tile in results {
        for (x, y, r) in tile {
            let p = y * width + x;
            image.set_pixel(x, y, r.color);
            depth[p] = r.depth;
            transmittance[p] = r.transmittance;
            walked[p] = r.walked;
        }
    }
    Ok(RenderBuffers { image, depth, transmittance, walked, sorted, order, tiles, tile_size, background })
}

/// Forward-only render in any float precision (used for benchmarking).
pub fn render_image<F: Float + Send + Sync>(width: usize, height: usize, splats: &[Splat2D], background: [f64; 3], tile_size: usize) -> Vec<F> {
    let sorted = sort_splats(splats);
    let packed: Vec<PackedSplat<F>> = sorted.iter().map(PackedSplat::from_splat).collect();
    let geo = tile_geometry(width, height, tile_size.max(1));
    let tiles = bin_splats(&sorted, &geo, tile_size.max(1));
    let bg = background.map(|v| F::from(v).unwrap());
    let results = par::map_indexed(tiles.len(), |t| {
        tile_pixels(t, &geo, tile_size.max(1), width, height)
            .map(|(x, y)| (x, y, composite_list(&packed, tiles[t].iter().copied(), x, y, bg).color))
            .collect::<Vec<_>>()
    });
    let mut out = vec![F::zero(); width * height * 3];
    for tile in results {
        for (x, y, c) in tile {
            out[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    out
}

/// Reverse pass: `∂L/∂(splat fields)` for every input splat given `∂L/∂image`.
/// The result is indexed like the `splats` slice passed to [`render`].
pub fn render_backward(buffers: &RenderBuffers, grad_image: &Image, num_splats: usize) -> Result<Vec<SplatGrad>> {
    let (width, height) = (buffers.image.width, buffers.image.height);
    if !grad_image.same_shape(&buffers.image) {
        return Err(Error::InvalidParameter(format!("gradient image {}×{} does not match render {width}×{height}", grad_image.width, grad_image.height)));
    }
    if num_splats != buffers.sorted.len() {
        return Err(Error::InvalidParameter("splat count differs from the forward pass".into()));
    }
    let packed: Vec<PackedSplat<f64>> = buffers.sorted.iter().map(PackedSplat::from_splat).collect();
    let tile = buffers.tile_size;
    let geo = tile_geometry(width, height, tile);
    let bg = buffers.background;
    let per_tile = par::map_indexed(buffers.tiles.len(), |t| {
        let list = &buffers.tiles[t];
        let mut local = vec![SplatGrad::default(); list.len()];
        let mut trace: Vec<(usize, f64, f64, f64, bool)> = Vec::new();
        for (x, y) in tile_pixels(t, &geo, tile, width, height) {
            let p = y * width + x;
            let g = grad_image.pixel(x, y);
            if g == [0.0; 3] {
                continue;
            }
            // replay the forward walk
            trace.clear();
            let mut tr = 1.0;
            for (n, &i) in list[..buffers.walked[p]].iter().enumerate() {
                let s = &packed[i];
                if !s.rect.contains(x, y) {
                    continue;
                }
                let (a, gv, clamped) = s.alpha_at(x, y);
                trace.push((n, a, tr, gv, clamped));
                tr *= 1.0 - a;
            }
            let mut after = [tr * bg[0], tr * bg[1], tr * bg[2]];
            for &(n, a, t_before, gv, clamped) in trace.iter().rev() {
                let s = &packed[list[n]];
                let out = &mut local[n];
                let w = a * t_before;
                let mut d_alpha = 0.0;
                for c in 0..3 {
                    out.color[c] += g[c] * w;
                    d_alpha += g[c] * (s.color[c] * t_before - after[c] / (1.0 - a));
                    after[c] += s.color[c] * w;
                }
                if clamped {
                    continue;
                }
                out.opacity += d_alpha * gv;
                let dq = d_alpha * s.opacity * gv * -0.5;
                let dx = x as f64 + 0.5 - s.mean[0];
                let dy = y as f64 + 0.5 - s.mean[1];
                let [ca, cb, cc] = s.conic;
                // q = dᵀ A d with d = p − mean
                out.mean[0] += dq * -2.0 * (ca * dx + cb * dy);
                out.mean[1] += dq * -2.0 * (cb * dx + cc * dy);
                // store ∂L/∂A (symmetric) in the cov slot; converted below
                out.cov[(0, 0)] += dq * dx * dx;
                out.cov[(0, 1)] += dq * dx * dy;
                out.cov[(1, 0)] += dq * dx * dy;
                out.cov[(1, 1)] += dq * dy * dy;
            }
        }
        local
    });
    let mut grads = vec![SplatGrad::default(); num_splats];
    let mut by_sorted = vec![SplatGrad::default(); buffers.sorted.len()];
    for (t, local) in per_tile.iter().enumerate() {
        for (n, g) in local.iter().enumerate() {
            by_sorted[buffers.tiles[t][n]].add(g);
        }
    }
    for ((s, mut g), &slot) in buffers.sorted.iter().zip(by_sorted).zip(&buffers.order) {
        // ∂L/∂Σ = −A (∂L/∂A) A
        let [a, b, c] = s.conic();
        let inv = Matrix2::new(a, b, b, c);
        g.cov = -(inv * g.cov * inv);
        grads[slot] = g;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn splat(mean: [f64; 2], var: f64, opacity: f64, color: [f64; 3], depth: f64, idx: usize) -> Splat2D {
        let cov = [var, 0.0, var];
        Splat2D { mean, cov, depth, opacity, color, source: (idx, 0), index: idx, rect: pixel_rect(mean, cov, 64, 64).unwrap() }
    }

    #[test]
    fn empty_scene_is_background() {
        let b = render(5, 4, &[], [0.2, 0.4, 0.6], 16).unwrap();
        assert!(b.image.data.chunks(3).all(|p| p == [0.2, 0.4, 0.6]));
    }

    #[test]
    fn zero_size_is_rejected() {
        assert!(render(0, 4, &[], [0.0; 3], 16).is_err());
    }

    #[test]
    fn single_clamped_splat() {
        let s = splat([2.5, 2.5], 4.0, 1.0, [0.3, 0.6, 0.9], 1.0, 0);
        let c = composite_pixel(&[s], 2, 2, [1.0, 0.0, 0.5]);
        for k in 0..3 {
            let want = 0.99 * [0.3, 0.6, 0.9][k] + 0.01 * [1.0, 0.0, 0.5][k];
            assert!((c[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn two_splat_closed_form() {
        let c1 = [0.9, 0.1, 0.4];
        let c2 = [0.2, 0.7, 0.5];
        let a = splat([3.5, 3.5], 2.0, 0.5, c1, 1.0, 0);
        let b = splat([3.5, 3.5], 2.0, 0.5, c2, 2.0, 1);
        let c = composite_pixel(&sort_splats(&[b, a]), 3, 3, [0.0; 3]);
        for k in 0..3 {
            assert!((c[k] - (0.5 * c1[k] + 0.25 * c2[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn opaque_front_splat_scales_back_contribution() {
        let back = splat([3.5, 3.5], 2.0, 0.6, [1.0, 1.0, 1.0], 2.0, 1);
        let front = splat([3.5, 3.5], 2.0, 1.0, [0.0; 3], 1.0, 0);
        let alone = composite_pixel(&[back.clone()], 3, 3, [0.0; 3]);
        let both = composite_pixel(&sort_splats(&[front, back]), 3, 3, [0.0; 3]);
        assert!((both[0] - 0.01 * alone[0]).abs() < 1e-15);
    }

    #[test]
    fn single_splat_color_gradient_is_alpha() {
        let s = splat([4.2, 3.7], 3.0, 0.7, [0.2, 0.5, 0.8], 1.0, 0);
        let b = render(8, 8, &[s.clone()], [0.0; 3], 4).unwrap();
        let mut gimg = Image::new(8, 8);
        gimg.set_pixel(5, 3, [1.0, 1.0, 1.0]);
        let g = render_backward(&b, &gimg, 1).unwrap();
        let packed = PackedSplat::<f64>::from_splat(&s);
        let (a, _, _) = packed.alpha_at(5, 3);
        for c in 0..3 {
            assert!((g[0].color[c] - a).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let s = vec![splat([4.0, 4.0], 3.0, 0.7, [0.2, 0.5, 0.8], 1.0, 0), splat([3.0, 5.0], 5.0, 0.4, [0.9; 3], 2.0, 1)];
        let b = render(8, 8, &s, [0.1; 3], 4).unwrap();
        let g = render_backward(&b, &Image::new(8, 8), 2).unwrap();
        assert!(g.iter().all(|g| *g == SplatGrad::default()));
        assert!(render_backward(&b, &Image::new(7, 8), 2).is_err());
    }
}
