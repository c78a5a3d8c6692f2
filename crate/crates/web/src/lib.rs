//! WebAssembly bindings for a static demo page. All outputs are RGBA8
//! buffers sized `width() × height()`.

use mwgs_core::config::ModelConfig;
use mwgs_core::image::{quantize, Image};
use mwgs_core::map::FeatureMap;
use mwgs_core::model::Model;
use mwgs_core::raster::{project_all, render_image};
use mwgs_core::sampler::{attention_histogram, histogram_image, FrustumConfig};
use mwgs_core::scene::{Camera, GaussianPrimitive};
use mwgs_core::synth::{ground_truth_blobs, synthesize, SynthSpec};
use mwgs_core::wavelet::{wavelet_packet, FilterPair};
use mwgs_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Deepest packet level offered by the page.
pub const MAX_LEVEL: usize = 3;
const ELEVATION_LIMIT: f64 = 1.45;

#[wasm_bindgen]
pub struct Demo {
    spec: SynthSpec,
    blobs: Vec<GaussianPrimitive>,
    views: Vec<Image>,
    model: Model,
}

impl Demo {
    pub fn build(seed: u64) -> Result<Self> {
        let spec = SynthSpec { seed, ..SynthSpec::default() };
        let (data, _) = synthesize(&spec)?;
        let blobs = ground_truth_blobs(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let model = Model::new(&ModelConfig::default(), &data.points, data.train_images.len(), spec.width, spec.height, seed)?;
        Ok(Self { spec, blobs, views: data.train_images, model })
    }

    /// Camera on a sphere around the origin; elevation in radians.
    pub fn orbit_camera(&self, azimuth: f64, elevation: f64) -> Result<Camera> {
        let el = elevation.clamp(-ELEVATION_LIMIT, ELEVATION_LIMIT);
        let r = self.spec.radius;
        let eye = [r * el.cos() * azimuth.cos(), r * el.cos() * azimuth.sin(), r * el.sin()];
        Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], self.spec.width, self.spec.height, self.spec.focal)
    }

    /// Packet leaves of training image `view` tiled in a `2^level` grid, each
    /// leaf stretched to its own range (the approximation band first).
    pub fn packet_mosaic(&self, view: usize, level: usize, db2: bool) -> Result<Vec<u8>> {
        let img = &self.views[view % self.views.len()];
        let map = FeatureMap::from_fn(3, img.height, img.width, |c, y, x| img.pixel(x, y)[c]);
        let filters = if db2 { FilterPair::db2() } else { FilterPair::haar() };
        let level = level.min(MAX_LEVEL);
        let leaves = wavelet_packet(&map, level, &filters)?;
        let side = 1usize << level;
        let mut out = Image::new(img.width, img.height);
        for (i, leaf) in leaves.iter().enumerate() {
            let (lo, hi) = leaf.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            let (ox, oy) = (morton_x(i, level) * leaf.width, morton_y(i, level) * leaf.height);
            debug_assert!(ox < side * leaf.width && oy < side * leaf.height);
            for y in 0..leaf.height {
                for x in 0..leaf.width {
                    out.set_pixel(ox + x, oy + y, std::array::from_fn(|c| (leaf.at(c, y, x) - lo) / span));
                }
            }
        }
        Ok(rgba(&out))
    }

    /// Ground-truth blobs rendered from an orbit position.
    pub fn orbit_render(&self, azimuth: f64, elevation: f64) -> Result<Vec<u8>> {
        let cam = self.orbit_camera(azimuth, elevation)?;
        let pixels = render_image::<f32>(cam.width, cam.height, &project_all(&cam, &self.blobs), [0.0; 3], 16);
        let img = Image::from_data(cam.width, cam.height, pixels.into_iter().map(f64::from).collect())?;
        Ok(rgba(&img))
    }

    /// Where the untrained sampler reads the feature map from an orbit position.
    pub fn attention(&self, azimuth: f64, elevation: f64) -> Result<Vec<u8>> {
        let cam = self.orbit_camera(azimuth, elevation)?;
        let cfg = &self.model.config;
        let hist = attention_histogram(&self.model.anchors, &cam, cfg.map_size(cam.width, cam.height), cfg.levels, &FrustumConfig::from_model(cfg))?;
        Ok(rgba(&histogram_image(&hist)))
    }
}

/// Position of packet leaf `i` in the mosaic: each level splits a cell into
/// LL, LH / HL, HH quadrants.
fn morton_x(i: usize, level: usize) -> usize {
    (0..level).fold(0, |acc, l| acc | (((i >> (2 * (level - 1 - l))) & 1) << (level - 1 - l)))
}

fn morton_y(i: usize, level: usize) -> usize {
    (0..level).fold(0, |acc, l| acc | (((i >> (2 * (level - 1 - l) + 1)) & 1) << (level - 1 - l)))
}

fn rgba(img: &Image) -> Vec<u8> {
    img.data.chunks_exact(3).flat_map(|p| [quantize(p[0]), quantize(p[1]), quantize(p[2]), 255]).collect()
}

fn js(e: mwgs_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Demo, JsError> {
        Demo::build(u64::from(seed)).map_err(js)
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    /// Attention maps are at feature-map resolution.
    #[wasm_bindgen(js_name = attentionWidth)]
    pub fn attention_width(&self) -> usize {
        self.model.config.map_size(self.spec.width, self.spec.height).1
    }

    #[wasm_bindgen(js_name = attentionHeight)]
    pub fn attention_height(&self) -> usize {
        self.model.config.map_size(self.spec.width, self.spec.height).0
    }

    #[wasm_bindgen(js_name = viewCount)]
    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    #[wasm_bindgen(js_name = packetMosaic)]
    pub fn packet_mosaic_js(&self, view: usize, level: usize, db2: bool) -> std::result::Result<Vec<u8>, JsError> {
        self.packet_mosaic(view, level, db2).map_err(js)
    }

    #[wasm_bindgen(js_name = orbitRender)]
    pub fn orbit_render_js(&self, azimuth: f64, elevation: f64) -> std::result::Result<Vec<u8>, JsError> {
        self.orbit_render(azimuth, elevation).map_err(js)
    }

    #[wasm_bindgen(js_name = attention)]
    pub fn attention_js(&self, azimuth: f64, elevation: f64) -> std::result::Result<Vec<u8>, JsError> {
        self.attention(azimuth, elevation).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn morton_layout_covers_the_grid() {
        for level in 0..=MAX_LEVEL {
            let side = 1 << level;
            let mut seen = vec![false; side * side];
            for i in 0..side * side {
                seen[morton_y(i, level) * side + morton_x(i, level)] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
        // LL, LH, HL, HH
        assert_eq!((0..4).map(|i| (morton_x(i, 1), morton_y(i, 1))).collect::<Vec<_>>(), vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
    }
}
