//! `mwgs`: dataset synthesis, training, evaluation, rendering, appearance
//! transfer and tuning, diagnostics and benchmarks.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use mwgs_core::bench::{bench, bench_scene, MIN_FRAMES, WARMUP_FRAMES};
use mwgs_core::config::{EncoderMode, RunConfig};
use mwgs_core::encoder::AppearanceBundle;
use mwgs_core::hrfn::Overrides;
use mwgs_core::image::{write_raw_f64, Image};
use mwgs_core::model::Model;
use mwgs_core::sampler::{attention_histogram, histogram_image, FrustumConfig};
use mwgs_core::scene::Camera;
use mwgs_core::selftest::{run_all, Faults};
use mwgs_core::synth::{synthesize, Dataset, SynthSpec};
use mwgs_core::train::{evaluate, load_model, render_view, training_bundle, CheckpointMeta, Split, Trainer};
use mwgs_core::{par, Error as CoreError};

const CHECKPOINT_STEM: &str = "checkpoint";
const LOG_FILE: &str = "log.jsonl";

#[derive(Parser, Debug)]
#[command(name = "mwgs", version, about = "Anchored Gaussian splatting with micro-macro wavelet appearance sampling")]
struct Cli {
    /// Run configuration (JSON). Defaults are used when absent.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides train.seed (for `synth`, the dataset seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; falls back to MWGS_THREADS, then train.threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override `key=value` with a dotted key (for `synth`, a dataset-spec key). Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Source {
    /// Checkpoint stem (`<dir>/checkpoint`; a `.json`/`.bin` suffix is accepted).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ViewArg {
    /// Camera to render: `train:<i>` or `test:<i>`.
    #[arg(long, default_value = "train:0")]
    view: String,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic multi-appearance dataset.
    Synth {
        /// Dataset spec (JSON); defaults are used when absent.
        #[arg(long, value_name = "PATH")]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset; writes `<out>/checkpoint.{bin,json}` and `<out>/log.jsonl`.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint stem.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total step budget (also extends a resumed run).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// PSNR/SSIM per view as JSON.
    Eval {
        #[command(flatten)]
        src: Source,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one view under a training image's bundle.
    Render {
        #[command(flatten)]
        src: Source,
        #[command(flatten)]
        view: ViewArg,
        /// Training image whose appearance is used (default: the view's own).
        #[arg(long)]
        image_id: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a view under another image's appearance.
    Transfer {
        #[command(flatten)]
        src: Source,
        #[command(flatten)]
        view: ViewArg,
        /// Training image id to take the appearance from.
        #[arg(long, conflicts_with = "reference_image", required_unless_present = "reference_image")]
        reference_id: Option<usize>,
        /// External PNG/PPM reference (conv encoder only).
        #[arg(long)]
        reference_image: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render with scaled global/refined features and residual weights.
    Tune {
        #[command(flatten)]
        src: Source,
        #[command(flatten)]
        view: ViewArg,
        #[arg(long)]
        image_id: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        global: f64,
        #[arg(long, default_value_t = 1.0)]
        refined: f64,
        #[arg(long, default_value_t = 1.0)]
        omega_r: f64,
        #[arg(long, default_value_t = 1.0)]
        omega_v: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frame-time report (JSON). Uses a checkpoint when given, otherwise a generated grid of anchors.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        view: ViewArg,
        /// Anchor count of the generated scene.
        #[arg(long, default_value_t = 200)]
        anchors: usize,
        /// Square resolution of the generated scene.
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = MIN_FRAMES)]
        frames: usize,
        #[arg(long, default_value_t = WARMUP_FRAMES)]
        warmup: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Numerical self-checks; exit 1 naming any failing check.
    Selftest {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt_dwt: bool,
    },
    /// Histogram of feature-map sample positions for one view.
    DumpAttention {
        #[command(flatten)]
        src: Source,
        #[command(flatten)]
        view: ViewArg,
        /// Image path; the raw counts go next to it as `.f64`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a training image's bundle (global feature, feature map, visibility map).
    DumpBundle {
        #[command(flatten)]
        src: Source,
        #[arg(long, default_value_t = 0)]
        reference_id: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config_help() -> String {
    let mut s = String::from("Config keys (use with --set key=value; defaults shown):\n");
    for (k, v) in RunConfig::documented_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str("\nExit codes: 0 success, 1 self-test failure, 2 config/input error, 3 training divergence.");
    s
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(CoreError::Divergence { .. }) = cause.downcast_ref::<CoreError>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let matches = Cli::command().after_help(config_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let threads = cli.threads.or_else(|| std::env::var("MWGS_THREADS").ok().and_then(|v| v.parse().ok()));
    match run(cli, threads) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_with_overrides(cli.config.as_deref(), &cli.set).context("loading config")?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli, threads: Option<usize>) -> Result<ExitCode> {
    if let Cmd::Synth { spec, out } = &cli.cmd {
        return cmd_synth(spec.as_deref(), out, cli.seed, &cli.set);
    }
    if let Cmd::Selftest { out, corrupt_dwt } = &cli.cmd {
        return par::with_threads(threads.unwrap_or(0), || cmd_selftest(out.as_deref(), *corrupt_dwt));
    }
    let cfg = load_config(&cli)?;
    let threads = threads.unwrap_or(cfg.train.threads);
    par::with_threads(threads, || dispatch(cli.cmd, cfg)).map(|()| ExitCode::SUCCESS)
}

fn dispatch(cmd: Cmd, cfg: RunConfig) -> Result<()> {
    match cmd {
        Cmd::Train { dataset, out, resume, steps } => cmd_train(cfg, dataset, out, resume, steps),
        Cmd::Eval { src, split, out } => {
            let split: Split = split.parse()?;
            let (model, meta, data) = open(&src)?;
            let report = evaluate(&model, &data, split, &meta.config)?;
            emit_json(&serde_json::to_value(&report)?, out.as_deref())
        }
        Cmd::Render { src, view, image_id, out } => {
            let (model, meta, data) = open(&src)?;
            let (cam, own) = pick_view(&data, &view.view)?;
            let bundle = training_bundle(&model, &data, image_id.unwrap_or(own))?;
            save_image(&render_view(&model, &cam, &bundle, &Overrides::default(), &meta.config)?, &out)
        }
        Cmd::Transfer { src, view, reference_id, reference_image, out } => {
            let (model, meta, data) = open(&src)?;
            let (cam, _) = pick_view(&data, &view.view)?;
            let bundle = match (reference_id, reference_image) {
                (Some(id), _) => training_bundle(&model, &data, id)?,
                (None, Some(path)) => external_bundle(&model, &path)?,
                (None, None) => bail!("pass --reference-id or --reference-image"),
            };
            save_image(&render_view(&model, &cam, &bundle, &Overrides::default(), &meta.config)?, &out)
        }
        Cmd::Tune { src, view, image_id, global, refined, omega_r, omega_v, out } => {
            for (name, v) in [("global", global), ("refined", refined), ("omega-r", omega_r), ("omega-v", omega_v)] {
                if !v.is_finite() {
                    return Err(CoreError::InvalidConfig(format!("--{name} must be finite")).into());
                }
            }
            let (model, meta, data) = open(&src)?;
            let (cam, own) = pick_view(&data, &view.view)?;
            let bundle = training_bundle(&model, &data, image_id.unwrap_or(own))?;
            let ov = Overrides { global, refined, omega_r, omega_v };
            save_image(&render_view(&model, &cam, &bundle, &ov, &meta.config)?, &out)
        }
        Cmd::Bench { checkpoint, dataset, view, anchors, size, frames, warmup, out } => {
            let report = match checkpoint {
                Some(ck) => {
                    let (model, meta, data) = open(&Source { checkpoint: ck, dataset })?;
                    let (cam, own) = pick_view(&data, &view.view)?;
                    bench(&model, &cam, (Some(own), &data.train_images[own]), &meta.config.render, frames, warmup)?
                }
                None => {
                    if size == 0 || anchors == 0 {
                        return Err(CoreError::InvalidConfig("--size and --anchors must be positive".into()).into());
                    }
                    cfg.model.validate_image_size(size, size)?;
                    let (model, cam) = bench_scene(&cfg.model, anchors, size, size, cfg.train.seed)?;
                    let reference = Image::filled(size, size, [0.5; 3]);
                    bench(&model, &cam, (Some(0), &reference), &cfg.render, frames, warmup)?
                }
            };
            emit_json(&serde_json::to_value(&report)?, out.as_deref())
        }
        Cmd::DumpAttention { src, view, out } => {
            let (model, _, data) = open(&src)?;
            let (cam, _) = pick_view(&data, &view.view)?;
            let (h, w) = model.config.map_size(data.width, data.height);
            let hist = attention_histogram(&model.anchors, &cam, (h, w), model.config.levels, &FrustumConfig::from_model(&model.config))?;
            save_image(&histogram_image(&hist), &out)?;
            write_raw_f64(out.with_extension("f64"), &hist.shape(), &hist.data)?;
            Ok(())
        }
        Cmd::DumpBundle { src, reference_id, out } => {
            let (model, _, data) = open(&src)?;
            let bundle = training_bundle(&model, &data, reference_id)?;
            bundle.dump(&out)?;
            let vm = &bundle.visibility;
            let mut img = Image::new(vm.width, vm.height);
            for (p, &v) in vm.data.iter().enumerate() {
                img.set_pixel(p % vm.width, p / vm.width, [v; 3]);
            }
            save_image(&img, &out.join("vm.png"))
        }
        Cmd::Synth { .. } | Cmd::Selftest { .. } => unreachable!("handled before config loading"),
    }
}

fn cmd_synth(spec_path: Option<&Path>, out: &Path, seed: Option<u64>, sets: &[String]) -> Result<ExitCode> {
    let mut value = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<serde_json::Value>(&text).map_err(CoreError::from).with_context(|| format!("parsing {}", p.display()))?
        }
        None => serde_json::to_value(SynthSpec::default())?,
    };
    for kv in sets {
        let (key, raw) = kv.split_once('=').ok_or_else(|| CoreError::InvalidConfig(format!("override `{kv}` is not key=value")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let obj = value.as_object_mut().ok_or_else(|| CoreError::InvalidConfig("spec must be a JSON object".into()))?;
        obj.insert(key.to_string(), parsed);
    }
    let mut spec: SynthSpec = serde_json::from_value(value).map_err(CoreError::from).context("dataset spec")?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (data, appearances) = synthesize(&spec)?;
    fs::create_dir_all(out)?;
    let manifest = data.write(out, &spec, &appearances)?;
    say(&serde_json::to_string(&serde_json::json!({
        "out": out,
        "train_images": data.train_images.len(),
        "test_images": data.test_images.len(),
        "occluded": data.occluded_count(),
        "points": data.points.len(),
        "files": manifest.files.len(),
    }))?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(cfg: RunConfig, dataset: Option<PathBuf>, out: Option<PathBuf>, resume: Option<PathBuf>, steps: Option<usize>) -> Result<()> {
    let mut trainer = match &resume {
        Some(stem) => Trainer::resume(&normalize_stem(stem), steps)?,
        None => {
            let mut cfg = cfg;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let dir =
                dataset.clone().or(cfg.paths.dataset.clone()).ok_or_else(|| CoreError::Missing("no dataset: pass --dataset or set paths.dataset".into()))?;
            cfg.paths.dataset = Some(dir.clone());
            let data = Dataset::load(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
            Trainer::new(cfg, &data)?
        }
    };
    let dir = dataset.or(trainer.config.paths.dataset.clone()).ok_or_else(|| CoreError::Missing("no dataset: pass --dataset or set paths.dataset".into()))?;
    let data = Dataset::load(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let out = out.or(trainer.config.paths.output.clone()).unwrap_or_else(|| PathBuf::from("run"));
    fs::create_dir_all(&out)?;
    trainer.config.paths.dataset = Some(dir);
    trainer.config.paths.output = Some(out.clone());
    let stem = out.join(CHECKPOINT_STEM);
    trainer.config.paths.checkpoint = Some(stem.clone());
    fs::write(out.join("config.json"), serde_json::to_vec_pretty(&trainer.config)?)?;
    let log_file = OpenOptions::new().create(true).append(resume.is_some()).write(true).truncate(resume.is_none()).open(out.join(LOG_FILE))?;
    let mut log = BufWriter::new(log_file);
    let logs = trainer.run(&data, &mut log, Some(&stem))?;
    log.flush()?;
    let last = logs.last();
    say(&serde_json::to_string(&serde_json::json!({
        "checkpoint": stem,
        "step": trainer.step,
        "loss": last.map(|l| l.loss),
        "psnr": last.map(|l| l.psnr),
    }))?)?;
    Ok(())
}

fn cmd_selftest(out: Option<&Path>, corrupt_dwt: bool) -> Result<ExitCode> {
    let results = run_all(Faults { corrupt_dwt });
    for r in &results {
        say(&format!(
            "{} {:<28} max_error {:.3e} (tolerance {:.0e}, {} checked, {} excluded)",
            if r.passed { "ok  " } else { "FAIL" },
            r.name,
            r.max_error,
            r.tolerance,
            r.checked,
            r.excluded
        ))?;
    }
    if let Some(p) = out {
        fs::write(p, serde_json::to_vec_pretty(&results)?)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("self-test failed: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn normalize_stem(p: &Path) -> PathBuf {
    match p.extension().and_then(|e| e.to_str()) {
        Some("json" | "bin") => p.with_extension(""),
        _ => p.to_path_buf(),
    }
}

fn open(src: &Source) -> Result<(Model, CheckpointMeta, Dataset)> {
    let stem = normalize_stem(&src.checkpoint);
    let (model, meta) = load_model(&stem).with_context(|| format!("loading checkpoint {}", stem.display()))?;
    let dir = src.dataset.clone().or(meta.config.paths.dataset.clone()).ok_or_else(|| CoreError::Missing("no dataset: pass --dataset".into()))?;
    let data = Dataset::load(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if data.train_images.len() != meta.num_images || data.width != meta.width || data.height != meta.height {
        return Err(CoreError::InvalidConfig(format!(
            "dataset {} ({} images of {}×{}) does not match the checkpoint ({} images of {}×{})",
            dir.display(),
            data.train_images.len(),
            data.width,
            data.height,
            meta.num_images,
            meta.width,
            meta.height
        ))
        .into());
    }
    Ok((model, meta, data))
}

/// Camera for `train:<i>` / `test:<i>` plus the training image whose bundle it uses by default.
fn pick_view(data: &Dataset, spec: &str) -> Result<(Camera, usize)> {
    let bad = || CoreError::InvalidConfig(format!("--view `{spec}` is not train:<i> or test:<i>"));
    let (split, idx) = spec.split_once(':').ok_or_else(bad)?;
    let i: usize = idx.parse().map_err(|_| bad())?;
    let missing = |n: usize| CoreError::Missing(format!("view {spec} out of range ({n} available)"));
    match split {
        "train" => Ok((data.train_cameras.get(i).ok_or_else(|| missing(data.train_cameras.len()))?.clone(), i)),
        "test" => Ok((data.test_cameras.get(i).ok_or_else(|| missing(data.test_cameras.len()))?.clone(), data.test_reference[i])),
        _ => Err(bad().into()),
    }
}

fn external_bundle(model: &Model, path: &Path) -> Result<AppearanceBundle> {
    if model.config.encoder.mode == EncoderMode::Grid {
        return Err(CoreError::InvalidConfig(format!(
            "{} is outside the dataset, but this checkpoint uses the grid encoder, which only stores bundles for training images; \
             use --reference-id or train with --set model.encoder.mode=conv",
            path.display()
        ))
        .into());
    }
    let img = Image::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(model.encode(None, &img)?.0)
}

fn save_image(img: &Image, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    img.save(out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn emit_json(v: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    if let Some(p) = out {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    say(&text)
}

/// Prints a line; a closed stdout (e.g. piped into `head`) is not an error.
fn say(line: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}
