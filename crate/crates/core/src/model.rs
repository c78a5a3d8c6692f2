//! The full learnable scene: anchors, appearance encoder and fusion network,
//! with one differentiable render pass per view.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RenderConfig};
use crate::encoder::{AppearanceBundle, Encoder, EncoderTrace};
use crate::error::{Error, Result};
use crate::hrfn::{Hrfn, HrfnInput, HrfnTrace, Overrides};
use crate::image::Image;
use crate::par;
use crate::params::{join, Parameterized, Visitor};
use crate::raster::{project_all, project_gaussian_backward, render, render_backward, RenderBuffers, Splat2D};
use crate::sampler::{pyramid_backward, pyramid_from_map, sample_anchor, sampler_backward, AnchorSample, FeaturePyramid, FrustumConfig};
use crate::scene::{anchors_from_points, expand_anchor, expand_anchor_backward, Anchor, Camera, GaussianGrad, GaussianPrimitive};
use crate::wavelet::FilterPair;

/// Anchors handled by one reverse-pass work item. Fixed so that gradient
/// sums do not depend on the thread count.
const ANCHOR_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub anchors: Vec<Anchor>,
    pub encoder: Encoder,
    pub hrfn: Hrfn,
}

/// Forward intermediates of one view.
#[derive(Debug, Clone)]
pub struct ViewPass {
    pub pyramid: FeaturePyramid,
    pub samples: Vec<Option<AnchorSample>>,
    pub hrfn: Vec<HrfnTrace>,
    pub gaussians: Vec<GaussianPrimitive>,
    pub splats: Vec<Splat2D>,
    pub buffers: RenderBuffers,
}

impl ViewPass {
    pub fn image(&self) -> &Image {
        &self.buffers.image
    }
}

/// Per-view colours and Gaussians before projection.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub pyramid: FeaturePyramid,
    pub samples: Vec<Option<AnchorSample>>,
    pub hrfn: Vec<HrfnTrace>,
    pub gaussians: Vec<GaussianPrimitive>,
}

/// Anchors plus cameras as one JSON document; floats round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub model: ModelConfig,
    pub cameras: Vec<Camera>,
    pub anchors: Vec<Anchor>,
}

impl SceneFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s: SceneFile = serde_json::from_slice(&fs::read(path)?)?;
        for a in &s.anchors {
            a.validate(&s.model)?;
        }
        for c in &s.cameras {
            c.validate()?;
        }
        Ok(s)
    }
}

impl Model {
    /// Anchors from voxelising `points`; encoder sized for `num_images`
    /// training images of `width × height`.
    pub fn new(cfg: &ModelConfig, points: &[[f64; 3]], num_images: usize, width: usize, height: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = anchors_from_points(points, cfg.voxel_size, cfg, &mut rng)?;
        if anchors.is_empty() {
            return Err(Error::InvalidConfig("no anchors: the point cloud is empty".into()));
        }
        let encoder = Encoder::new(cfg, num_images, width, height, &mut rng)?;
        let hrfn = Hrfn::new(cfg, &mut rng);
        Ok(Self { config: cfg.clone(), anchors, encoder, hrfn })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn filters(&self) -> FilterPair {
        FilterPair::for_family(self.config.wavelet)
    }

    pub fn num_gaussians(&self) -> usize {
        self.anchors.len() * self.config.k
    }

    pub fn encode(&self, image_id: Option<usize>, image: &Image) -> Result<(AppearanceBundle, EncoderTrace)> {
        self.encoder.encode(image_id, image)
    }

    /// Samples features, decodes colours and expands every anchor for one view.
    pub fn decode(&self, cam: &Camera, bundle: &AppearanceBundle, ov: &Overrides) -> Result<Decoded> {
        cam.validate()?;
        let pyramid = pyramid_from_map(&bundle.map, self.config.levels, &self.filters())?;
        let frustum = FrustumConfig::from_model(&self.config);
        let zeros = vec![0.0; self.config.n_r];
        let center = cam.position;
        let per_anchor = par::map_indexed(self.anchors.len(), |i| -> Result<_> {
            let a = &self.anchors[i];
            let sample = sample_anchor(a, cam, &pyramid, &frustum)?;
            let refined = sample.as_ref().map_or(&zeros[..], |s| &s.refined[..]);
            let input = HrfnInput { position: a.position, intrinsic: &a.intrinsic, refined, global: &bundle.global, camera_center: center };
            let trace = self.hrfn.forward(&input, ov)?;
            let mut gs = expand_anchor(a, i)?;
            for (j, g) in gs.iter_mut().enumerate() {
                g.color.copy_from_slice(&trace.colors[3 * j..3 * j + 3]);
            }
            Ok((sample, trace, gs))
        });
        let mut samples = Vec::with_capacity(self.anchors.len());
        let mut hrfn = Vec::with_capacity(self.anchors.len());
        let mut gaussians = Vec::with_capacity(self.num_gaussians());
        for r in per_anchor {
            let (s, t, gs) = r?;
            samples.push(s);
            hrfn.push(t);
            gaussians.extend(gs);
        }
        Ok(Decoded { pyramid, samples, hrfn, gaussians })
    }

    /// Samples, decodes colours, expands and renders one view under `bundle`.
    pub fn forward(&self, cam: &Camera, bundle: &AppearanceBundle, ov: &Overrides, render_cfg: &RenderConfig) -> Result<ViewPass> {
        let Decoded { pyramid, samples, hrfn, gaussians } = self.decode(cam, bundle, ov)?;
        let splats = project_all(cam, &gaussians);
        let buffers = render(cam.width, cam.height, &splats, render_cfg.background, render_cfg.tile_size)?;
        Ok(ViewPass { pyramid, samples, hrfn, gaussians, splats, buffers })
    }

    /// Reverse pass for `∂L/∂image`. Accumulates model gradients into `grad`
    /// and returns the gradient with respect to the bundle (its visibility
    /// part is left at zero; the loss supplies it).
    pub fn backward(&self, cam: &Camera, pass: &ViewPass, grad_image: &Image, grad: &mut Model) -> Result<AppearanceBundle> {
        let splat_grads = render_backward(&pass.buffers, grad_image, pass.splats.len())?;
        let mut ggrads = vec![GaussianGrad::default(); pass.gaussians.len()];
        for (s, sg) in pass.splats.iter().zip(&splat_grads) {
            ggrads[s.index] = project_gaussian_backward(cam, &pass.gaussians[s.index], sg);
        }
        let k = self.config.k;
        let frustum = FrustumConfig::from_model(&self.config);
        let n = self.anchors.len();
        let chunks = n.div_ceil(ANCHOR_CHUNK);
        let partial = par::map_indexed(chunks, |c| -> Result<_> {
            let mut hgrad = self.hrfn.zeros_like();
            let mut pgrad = pass.pyramid.zeros_like();
            let mut global = vec![0.0; self.config.n_g];
            let mut agrads = Vec::with_capacity(ANCHOR_CHUNK);
            for i in c * ANCHOR_CHUNK..((c + 1) * ANCHOR_CHUNK).min(n) {
                let a = &self.anchors[i];
                let mut ga = a.zeros_like();
                let gs = &ggrads[i * k..(i + 1) * k];
                expand_anchor_backward(a, gs, &mut ga);
                let d_colors: Vec<f64> = gs.iter().flat_map(|g| g.color).collect();
                let gi = self.hrfn.backward(&pass.hrfn[i], &d_colors, &mut hgrad)?;
                for d in 0..3 {
                    ga.position[d] += gi.position[d];
                }
                for (a, b) in ga.intrinsic.iter_mut().zip(&gi.intrinsic) {
                    *a += b;
                }
                for (a, b) in global.iter_mut().zip(&gi.global) {
                    *a += b;
                }
                if let Some(s) = &pass.samples[i] {
                    sampler_backward(a, cam, &pass.pyramid, &frustum, s, &gi.refined, &mut pgrad, &mut ga)?;
                }
                agrads.push(ga);
            }
            Ok((hgrad, pgrad, global, agrads))
        });
        let mut pyr_grad = pass.pyramid.zeros_like();
        let mut global = vec![0.0; self.config.n_g];
        let mut flat_h = grad.hrfn.flatten();
        let mut i = 0;
        for r in partial {
            let (mut hgrad, pgrad, g, agrads) = r?;
            for (a, b) in flat_h.iter_mut().zip(hgrad.flatten()) {
                *a += b;
            }
            for (dst, src) in pyr_grad.narrow.iter_mut().flatten().zip(pgrad.narrow.iter().flatten()) {
                dst.add_assign(src);
            }
            for (dst, src) in pyr_grad.broad.iter_mut().flatten().zip(pgrad.broad.iter().flatten()) {
                dst.add_assign(src);
            }
            for (a, b) in global.iter_mut().zip(&g) {
                *a += b;
            }
            for mut ga in agrads {
                let mut src = ga.flatten();
                let mut dst = grad.anchors[i].flatten();
                for (a, b) in dst.iter_mut().zip(src.drain(..)) {
                    *a += b;
                }
                grad.anchors[i].load_flat(&dst)?;
                i += 1;
            }
        }
        grad.hrfn.load_flat(&flat_h)?;
        let map = pyramid_backward(&pyr_grad, &self.filters())?;
        Ok(AppearanceBundle { global, map, visibility: crate::map::FeatureMap::zeros(1, cam.height, cam.width) })
    }

    pub fn scene_file(&self, cameras: &[Camera]) -> SceneFile {
        SceneFile { model: self.config.clone(), cameras: cameras.to_vec(), anchors: self.anchors.clone() }
    }
}

impl Parameterized for Model {
    fn visit_params(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        for (i, a) in self.anchors.iter_mut().enumerate() {
            a.visit_params(&join(prefix, &format!("anchor{i}")), f);
        }
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.hrfn.visit_params(&join(prefix, "hrfn"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HrfnWidths;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            k: 3,
            n_v: 4,
            n_r: 8,
            n_g: 3,
            levels: 1,
            samples: 2,
            pe_bands: 2,
            voxel_size: 0.25,
            init_scale: 1.2,
            broad_radius_max: 6.0,
            broad_radius_min: 0.5,
            hrfn: HrfnWidths { m1: vec![16, 12], m2: vec![12, 10], m3: vec![8, 8], m4: vec![8] },
            ..ModelConfig::default()
        }
    }

    fn setup() -> (Model, Camera, Image) {
        let cfg = tiny_config();
        let points = [[0.05, 0.1, 0.0], [-0.2, 0.0, 0.15], [0.3, -0.1, -0.1]];
        let mut model = Model::new(&cfg, &points, 2, 16, 16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for a in &mut model.anchors {
            a.narrow_logits.iter_mut().chain(&mut a.broad_logits).for_each(|v| *v = rng.random_range(-0.5..0.5));
            a.rotations.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
            a.log_scales.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
            a.opacity_logits.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        for m in [&mut model.hrfn.m1, &mut model.hrfn.m2, &mut model.hrfn.m3, &mut model.hrfn.m4] {
            for l in &mut m.layers {
                l.bias.iter_mut().for_each(|b| *b = rng.random_range(0.0..0.2));
            }
        }
        let cam = Camera::look_at([0.4, -2.5, 0.6], [0.0; 3], [0.0, 0.0, 1.0], 16, 16, 14.0).unwrap();
        let up = Image::from_data(16, 16, (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (model, cam, up)
    }

    fn objective(model: &Model, cam: &Camera, up: &Image) -> f64 {
        let (b, _) = model.encode(Some(1), &Image::new(16, 16)).unwrap();
        let pass = model.forward(cam, &b, &Overrides::default(), &RenderConfig::default()).unwrap();
        pass.image().data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn full_chain_matches_finite_differences() {
        let (model, cam, up) = setup();
        let (b, trace) = model.encode(Some(1), &Image::new(16, 16)).unwrap();
        let pass = model.forward(&cam, &b, &Overrides::default(), &RenderConfig::default()).unwrap();
        assert!(pass.splats.len() > 3);
        let mut grad = model.zeros_like();
        let gb = model.backward(&cam, &pass, &up, &mut grad).unwrap();
        model.encoder.backward(&b, &trace, &gb, &mut grad.encoder).unwrap();
        let flat = model.clone().flatten();
        let g = grad.flatten();
        let mut probe = model.clone();
        let h = 1e-6;
        let mut checked = 0;
        let mut bad = Vec::new();
        for i in (0..flat.len()).step_by(5) {
            let mut f = flat.clone();
            f[i] += h;
            probe.load_flat(&f).unwrap();
            let lp = objective(&probe, &cam, &up);
            f[i] -= 2.0 * h;
            probe.load_flat(&f).unwrap();
            let lm = objective(&probe, &cam, &up);
            let fd = (lp - lm) / (2.0 * h);
            checked += 1;
            if (fd - g[i]).abs() > 1e-4 * fd.abs().max(g[i].abs()).max(1e-3) {
                bad.push((i, fd, g[i]));
            }
        }
        // a handful of entries may sit on a 3σ-box edge or a clamp
        assert!(bad.len() * 100 <= checked, "{} of {checked} mismatched: {:?}", bad.len(), &bad[..bad.len().min(10)]);
    }

    #[test]
    fn thread_count_does_not_change_gradients() {
        let (model, cam, up) = setup();
        let run = |threads| {
            par::with_threads(threads, || {
                let (b, _) = model.encode(Some(0), &Image::new(16, 16)).unwrap();
                let pass = model.forward(&cam, &b, &Overrides::default(), &RenderConfig::default()).unwrap();
                let mut grad = model.zeros_like();
                model.backward(&cam, &pass, &up, &mut grad).unwrap();
                (pass.buffers.image.data.clone(), grad.flatten())
            })
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn scene_file_round_trips_exactly() {
        let (model, cam, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        model.scene_file(&[cam.clone()]).save(&path).unwrap();
        let back = SceneFile::load(&path).unwrap();
        assert_eq!(back.anchors, model.anchors);
        assert_eq!(back.cameras, vec![cam]);
    }
}
