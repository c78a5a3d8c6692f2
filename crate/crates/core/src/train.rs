//! End-to-end optimisation: one view per step, full reverse pass, Adam.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::AppearanceBundle;
use crate::error::{Error, Result};
use crate::hrfn::Overrides;
use crate::image::{read_raw_f64, write_raw_f64, Image};
use crate::loss::{psnr, ssim, total_loss, LossOutput};
use crate::model::Model;
use crate::optim::{group_layout, lr_schedule, segment_rates, Adam};
use crate::params::{load_blob, read_manifest, save_blob, ParamGroup, Parameterized};
use crate::scene::Camera;
use crate::synth::{shuffled, Dataset};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub view: usize,
    pub loss: f64,
    pub ssim: f64,
    pub l1: f64,
    pub vm_reg: f64,
    pub psnr: f64,
    pub lr: BTreeMap<String, f64>,
}

/// Metadata stored alongside checkpoint tensors; enough to rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub config: RunConfig,
    pub num_images: usize,
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub images: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Which views an evaluation covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}` (train or test)"))),
        }
    }
}

/// Result of one forward/backward pass without an update.
pub struct Gradients {
    pub view: usize,
    pub loss: LossOutput,
    pub psnr: f64,
    pub grad: Model,
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    pub config: RunConfig,
    layout: Vec<(Range<usize>, ParamGroup)>,
    points: Vec<[f64; 3]>,
    num_images: usize,
}

fn adam_path(stem: &Path) -> PathBuf {
    stem.with_extension("adam.f64")
}

/// `<dir>/<name><suffix>` for a checkpoint stem `<dir>/<name>`.
pub fn sibling_stem(stem: &Path, suffix: &str) -> PathBuf {
    let name = stem.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    stem.with_file_name(format!("{name}{suffix}"))
}

impl Trainer {
    pub fn new(config: RunConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        if data.train_images.is_empty() {
            return Err(Error::Missing("dataset has no training images".into()));
        }
        config.model.validate_image_size(data.width, data.height)?;
        let mut model = Model::new(&config.model, &data.points, data.train_images.len(), data.width, data.height, config.train.seed)?;
        let layout = group_layout(&mut model);
        let adam = Adam::new(model.param_count());
        Ok(Self { model, adam, step: 0, config, layout, points: data.points.clone(), num_images: data.train_images.len() })
    }

    /// Training view used at `step`: a seeded shuffle per epoch.
    pub fn view_at(&self, step: usize, n: usize) -> usize {
        let epoch = (step / n) as u64;
        let seed = self.config.train.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch);
        shuffled(n, seed)[step % n]
    }

    /// Loss and full-chain gradients for training view `view`.
    pub fn gradients(&self, data: &Dataset, view: usize) -> Result<Gradients> {
        let target = &data.train_images[view];
        let cam = &data.train_cameras[view];
        let (bundle, trace) = self.model.encode(Some(view), target)?;
        let pass = self.model.forward(cam, &bundle, &Overrides::default(), &self.config.render)?;
        let loss = total_loss(pass.image(), target, &bundle.visibility, &self.config.loss)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence { step: self.step, reason: format!("loss is {}", loss.total) });
        }
        let p = psnr(pass.image(), target)?;
        let mut grad = self.model.zeros_like();
        let mut upstream = self.model.backward(cam, &pass, &loss.grad_image, &mut grad)?;
        upstream.visibility = loss.grad_vm.clone();
        self.model.encoder.backward(&bundle, &trace, &upstream, &mut grad.encoder)?;
        Ok(Gradients { view, loss, psnr: p, grad })
    }

    fn rates(&self) -> Vec<(Range<usize>, f64)> {
        segment_rates(&self.layout, &self.config.optim, self.step, self.config.train.steps)
    }

    /// One optimisation step.
    pub fn step(&mut self, data: &Dataset) -> Result<StepLog> {
        let view = self.view_at(self.step, data.train_images.len());
        let mut g = self.gradients(data, view)?;
        let mut params = self.model.flatten();
        let grads = g.grad.flatten();
        let rates = self.rates();
        self.adam.step(&mut params, &grads, &rates).map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence { step: self.step, reason },
            e => e,
        })?;
        self.model.load_flat(&params)?;
        let lr = ParamGroup::ALL
            .iter()
            .map(|&grp| {
                let v =
                    if self.config.optim.frozen.contains(&grp) { 0.0 } else { lr_schedule(self.config.optim.lr.get(grp), self.step, self.config.train.steps) };
                (grp.name().to_string(), v)
            })
            .collect();
        let log = StepLog { step: self.step, view, loss: g.loss.total, ssim: g.loss.ssim, l1: g.loss.l1, vm_reg: g.loss.vm_reg, psnr: g.psnr, lr };
        self.step += 1;
        Ok(log)
    }

    /// Trains until `config.train.steps`, appending JSON lines to `log`.
    /// With `checkpoint` set, saves there every `checkpoint_every` steps and
    /// at the end; on divergence the current state goes to `<checkpoint>-divergence`.
    pub fn run(&mut self, data: &Dataset, log: &mut dyn Write, checkpoint: Option<&Path>) -> Result<Vec<StepLog>> {
        let mut out = Vec::new();
        while self.step < self.config.train.steps {
            match self.step(data) {
                Ok(entry) => {
                    writeln!(log, "{}", serde_json::to_string(&entry)?)?;
                    out.push(entry);
                }
                Err(e @ Error::Divergence { .. }) => {
                    if let Some(stem) = checkpoint {
                        let dump = sibling_stem(stem, "-divergence");
                        self.save(&dump)?;
                        fs::write(dump.with_extension("reason.txt"), e.to_string())?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            let every = self.config.train.checkpoint_every;
            if let Some(stem) = checkpoint {
                if every > 0 && self.step % every == 0 && self.step < self.config.train.steps {
                    self.save(stem)?;
                }
            }
        }
        log.flush()?;
        if let Some(stem) = checkpoint {
            self.save(stem)?;
        }
        Ok(out)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            step: self.step,
            config: self.config.clone(),
            num_images: self.num_images,
            width: self.model.encoder.width,
            height: self.model.encoder.height,
            points: self.points.clone(),
        }
    }

    /// Writes `<stem>.bin`, `<stem>.json` and the optimiser moments.
    pub fn save(&mut self, stem: &Path) -> Result<()> {
        if let Some(parent) = stem.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let meta = serde_json::to_value(self.meta())?;
        save_blob(&mut self.model, stem, meta)?;
        let mut moments = self.adam.m.clone();
        moments.extend_from_slice(&self.adam.v);
        write_raw_f64(adam_path(stem), &[2, self.adam.m.len()], &moments)?;
        let state = serde_json::json!({ "adam_step": self.adam.step });
        fs::write(stem.with_extension("adam-state.json"), serde_json::to_vec(&state)?)?;
        Ok(())
    }

    /// Restores a trainer from [`Trainer::save`] output. `steps`, when given,
    /// replaces the stored step budget so training can be extended.
    pub fn resume(stem: &Path, steps: Option<usize>) -> Result<Self> {
        let (mut model, meta) = load_model(stem)?;
        let mut config = meta.config.clone();
        if let Some(s) = steps {
            config.train.steps = s;
        }
        let layout = group_layout(&mut model);
        let n = model.param_count();
        let mut adam = Adam::new(n);
        let path = adam_path(stem);
        if path.exists() {
            let (shape, values) = read_raw_f64(&path)?;
            if shape != [2, n] {
                return Err(Error::InvalidShape(format!("optimiser state has shape {shape:?}, model has {n} parameters")));
            }
            adam.m.copy_from_slice(&values[..n]);
            adam.v.copy_from_slice(&values[n..]);
            let state: serde_json::Value = serde_json::from_slice(&fs::read(stem.with_extension("adam-state.json"))?)?;
            adam.step = state["adam_step"].as_u64().unwrap_or(meta.step as u64) as usize;
        }
        Ok(Self { model, adam, step: meta.step, config, layout, points: meta.points, num_images: meta.num_images })
    }
}

/// Rebuilds a model from a checkpoint stem.
pub fn load_model(stem: &Path) -> Result<(Model, CheckpointMeta)> {
    if !stem.with_extension("json").exists() {
        return Err(Error::Missing(format!("no checkpoint at {}", stem.with_extension("json").display())));
    }
    let manifest = read_manifest(stem)?;
    let meta: CheckpointMeta = serde_json::from_value(manifest.extra).map_err(|e| Error::InvalidConfig(format!("checkpoint metadata: {e}")))?;
    meta.config.validate()?;
    let mut model = Model::new(&meta.config.model, &meta.points, meta.num_images, meta.width, meta.height, meta.config.train.seed)?;
    load_blob(&mut model, stem)?;
    Ok((model, meta))
}

/// Bundle of training image `id` (grid mode needs the id; conv mode only the pixels).
pub fn training_bundle(model: &Model, data: &Dataset, id: usize) -> Result<AppearanceBundle> {
    let img = data.train_images.get(id).ok_or_else(|| Error::Missing(format!("no training image {id} (dataset has {})", data.train_images.len())))?;
    Ok(model.encode(Some(id), img)?.0)
}

/// Full forward render of `cam` under an arbitrary bundle and overrides.
pub fn render_view(model: &Model, cam: &Camera, bundle: &AppearanceBundle, ov: &Overrides, cfg: &RunConfig) -> Result<Image> {
    Ok(model.forward(cam, bundle, ov, &cfg.render)?.buffers.image)
}

/// PSNR and SSIM per view. Training views use their own bundle; held-out
/// views use the bundle of their reference training image.
pub fn evaluate(model: &Model, data: &Dataset, split: Split, cfg: &RunConfig) -> Result<EvalReport> {
    let views: Vec<(usize, &Camera, &Image)> = match split {
        Split::Train => data.train_cameras.iter().zip(&data.train_images).enumerate().map(|(i, (c, im))| (i, c, im)).collect(),
        Split::Test => (0..data.test_cameras.len()).map(|i| (data.test_reference[i], &data.test_cameras[i], &data.test_images[i])).collect(),
    };
    if views.is_empty() {
        return Err(Error::Missing("split has no views".into()));
    }
    let mut images = Vec::with_capacity(views.len());
    for (index, (id, cam, target)) in views.into_iter().enumerate() {
        let bundle = training_bundle(model, data, id)?;
        let img = render_view(model, cam, &bundle, &Overrides::default(), cfg)?;
        images.push(ImageMetrics { index, psnr: psnr(&img, target)?, ssim: ssim(&img, target)? });
    }
    let n = images.len() as f64;
    Ok(EvalReport {
        split: match split {
            Split::Train => "train".into(),
            Split::Test => "test".into(),
        },
        mean_psnr: images.iter().map(|m| m.psnr).sum::<f64>() / n,
        mean_ssim: images.iter().map(|m| m.ssim).sum::<f64>() / n,
        images,
    })
}
