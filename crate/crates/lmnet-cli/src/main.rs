//! `lmnet` command line: train, fuse, infer, eval, gradcheck, cost, synth.
//!
//! Output is line-delimited JSON on stdout. Exit codes: 0 success,
//! 2 validation failure, 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use lmnet::autodiff::{grad_check, grad_check_params, Cx, EvalCx, Tape};
use lmnet::data::{self, DatasetManifest, Split};
use lmnet::model::{self, LmNet, LmNetConfig};
use lmnet::nn::Mode;
use lmnet::ops::{self, Conv2dSpec};
use lmnet::reparam::FlopsUnit;
use lmnet::train::{self, OptimConfig, TrainSettings};
use lmnet::{Dtype, Element, Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "lmnet", about = "Lightweight multi-scale segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration (model, optimizer, schedule, paths).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and checkpoint the best validation mDice.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint path.
        #[arg(long, default_value = "model.lmw")]
        out: PathBuf,
    },
    /// Rewrite a checkpoint with all multi-branch modules merged.
    Fuse {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one image and write the mask PNG.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Processing resolution (divisible by 16).
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Evaluate a checkpoint over a manifest split and write a report.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Processing resolution (divisible by 16).
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Average mDice/mIoU over foreground classes only.
        #[arg(long)]
        foreground_only: bool,
    },
    /// Finite-difference gradient checks (f64); nonzero exit on failure.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Parameter and MAC counts for the unfused and fused network.
    Cost {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value_t = FlopsUnitArg::Macs)]
        flops_unit: FlopsUnitArg,
        /// Input resolution for the MAC count.
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Generate a synthetic shapes dataset with a manifest.
    Synth {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FlopsUnitArg {
    Macs,
    Flops2x,
}

impl From<FlopsUnitArg> for FlopsUnit {
    fn from(v: FlopsUnitArg) -> Self {
        match v {
            FlopsUnitArg::Macs => FlopsUnit::Macs,
            FlopsUnitArg::Flops2x => FlopsUnit::Flops2x,
        }
    }
}

fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    8
}
fn default_image_size() -> usize {
    64
}
fn default_beta() -> f64 {
    0.9999
}
fn default_augment() -> bool {
    true
}

/// Top-level JSON run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    #[serde(default)]
    model: LmNetConfig,
    #[serde(default)]
    optimizer: OptimConfig,
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default = "default_batch_size")]
    batch_size: usize,
    #[serde(default = "default_image_size")]
    image_size: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_beta")]
    class_balance_beta: f64,
    #[serde(default = "default_augment")]
    augment: bool,
    /// Dataset manifest path (required for train).
    #[serde(default)]
    manifest: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_slice(&std::fs::read(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.model.validate()?;
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    Ok(cfg)
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn cmd_train(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let manifest_path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("config is missing the manifest path".into()))?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let model = LmNet::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let settings = TrainSettings {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        image_size: cfg.image_size,
        seed: cfg.seed,
        class_balance_beta: cfg.class_balance_beta,
        augment: cfg.augment,
    };
    emit(json!({"event": "train_start", "epochs": cfg.epochs, "seed": cfg.seed,
        "entries": manifest.entries.len(), "checkpoint": out}));
    let outcome = train::train_model(&model, &manifest, cfg.optimizer, &settings, out, |log| {
        emit(serde_json::to_value(log).unwrap());
    })?;
    emit(json!({"event": "train_done", "best_val_dice": outcome.best_val_dice,
        "epochs_run": outcome.epochs_run}));
    Ok(())
}

fn fuse_generic<T: Element>(weights: &Path, out: &Path) -> Result<()> {
    let mut model = model::load_weights::<T>(weights)?;
    if model.is_fused() {
        emit(json!({"event": "warning",
            "message": "weights are already fused; copying unchanged"}));
        model::save_weights(out, &model)?;
        return Ok(());
    }
    // probe deviation on random inputs before/after the rewrite
    let mut rng = <rand::rngs::StdRng as rand::SeedableRng>::seed_from_u64(0);
    let probes: Vec<Tensor<T>> = (0..2)
        .map(|_| {
            let n = model.cfg.in_channels * 64 * 64;
            let data: Vec<f64> =
                (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            Tensor::from_f64_slice(vec![1, model.cfg.in_channels, 64, 64], &data)
        })
        .collect::<Result<_>>()?;
    let before: Vec<Tensor<T>> = probes
        .iter()
        .map(|p| model.forward(&EvalCx, p, Mode::Eval))
        .collect::<Result<_>>()?;
    model.fuse()?;
    let mut max_dev = 0.0f64;
    for (p, b) in probes.iter().zip(&before) {
        let after = model.forward(&EvalCx, p, Mode::Eval)?;
        max_dev = max_dev.max(after.max_abs_diff(b));
    }
    model::save_weights(out, &model)?;
    emit(json!({"event": "fused", "max_abs_forward_deviation": max_dev, "out": out}));
    Ok(())
}

fn cmd_fuse(weights: &Path, out: &Path) -> Result<()> {
    match model::peek_header(weights)?.dtype {
        Dtype::F32 => fuse_generic::<f32>(weights, out),
        Dtype::F64 => fuse_generic::<f64>(weights, out),
    }
}

fn infer_generic<T: Element>(
    weights: &Path,
    image_path: &Path,
    out: &Path,
    size: usize,
) -> Result<()> {
    let model = model::load_weights::<T>(weights)?;
    let img = image::open(image_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", image_path.display())))?
        .to_rgb8();
    let (ow, oh) = (img.width() as usize, img.height() as usize);
    if model.cfg.in_channels != 3 {
        return Err(Error::InvalidArgument("infer expects a 3-channel model".into()));
    }
    let mut data = vec![T::zero(); 3 * oh * ow];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * oh * ow + y as usize * ow + x as usize] =
                T::from_f64(p.0[c] as f64 / 255.0);
        }
    }
    let mut x = Tensor::new(vec![1, 3, oh, ow], data)?;
    if (oh, ow) != (size, size) {
        x = ops::bilinear_resize(&x, size, size)?;
    }
    let logits = model.forward(&EvalCx, &x, Mode::Eval)?;
    let pred = model::argmax_classes(&logits)?.remove(0);
    // back to the source resolution, then to 8-bit palette values
    let labels = data::resize_mask_nearest(&pred, size, size, oh, ow);
    let k = model.cfg.num_classes;
    let mut png = image::GrayImage::new(ow as u32, oh as u32);
    for (px, py, p) in png.enumerate_pixels_mut() {
        let c = labels[py as usize * ow + px as usize] as usize;
        *p = image::Luma([(c * 255 / (k - 1)) as u8]);
    }
    png.save(out)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", out.display())))?;
    let fg = labels.iter().filter(|&&l| l != 0).count();
    emit(json!({"event": "infer", "out": out, "foreground_pixels": fg,
        "resolution": [oh, ow]}));
    Ok(())
}

fn cmd_infer(weights: &Path, image: &Path, out: &Path, size: usize) -> Result<()> {
    if size % 16 != 0 || size == 0 {
        return Err(Error::InvalidArgument("size must be divisible by 16".into()));
    }
    match model::peek_header(weights)?.dtype {
        Dtype::F32 => infer_generic::<f32>(weights, image, out, size),
        Dtype::F64 => infer_generic::<f64>(weights, image, out, size),
    }
}

fn eval_generic<T: Element>(
    weights: &Path,
    manifest: &Path,
    out: Option<&Path>,
    size: usize,
    foreground_only: bool,
) -> Result<()> {
    let model = model::load_weights::<T>(weights)?;
    let manifest = DatasetManifest::load(manifest)?;
    let report = train::evaluate_split(&model, &manifest, Split::Test, size, foreground_only)?;
    emit(serde_json::to_value(&report)?);
    // human-readable table on stderr; stdout stays line-delimited JSON
    eprintln!("metric      value");
    for (name, v) in [
        ("mDice", report.mean_dice),
        ("mIoU", report.mean_iou),
        ("accuracy", report.accuracy),
        ("precision", report.precision),
        ("recall", report.recall),
        ("Hd (px)", report.hausdorff),
        ("RAD (%)", report.rad),
    ] {
        eprintln!("{name:<11} {v:.4}");
    }
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_eval(
    weights: &Path,
    manifest: &Path,
    out: Option<&Path>,
    size: usize,
    foreground_only: bool,
) -> Result<()> {
    if size % 16 != 0 || size == 0 {
        return Err(Error::InvalidArgument("size must be divisible by 16".into()));
    }
    match model::peek_header(weights)?.dtype {
        Dtype::F32 => eval_generic::<f32>(weights, manifest, out, size, foreground_only),
        Dtype::F64 => eval_generic::<f64>(weights, manifest, out, size, foreground_only),
    }
}

fn cmd_gradcheck(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let seed = cfg.seed;
    let mut rng = <rand::rngs::StdRng as rand::SeedableRng>::seed_from_u64(seed);
    let mut rt = |shape: Vec<usize>| -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect())
            .unwrap()
    };
    let mut failures = 0usize;
    let mut check = |name: &str, report: Result<lmnet::autodiff::GradCheckReport>, tol: f64| {
        match report {
            Ok(r) => {
                let pass = r.max_rel_err < tol;
                if !pass {
                    failures += 1;
                }
                emit(json!({"event": "gradcheck", "case": name, "max_rel_err": r.max_rel_err,
                    "coords": r.checked, "tol": tol, "pass": pass}));
            }
            Err(e) => {
                failures += 1;
                emit(json!({"event": "gradcheck", "case": name, "error": e.to_string(),
                    "pass": false}));
            }
        }
    };
    let x = rt(vec![1, 2, 6, 6]);
    let w = rt(vec![3, 2, 3, 3]);
    check(
        "conv2d",
        grad_check(
            |leaf, t: &Tape<f64>| {
                let xv = leaf(&Tensor::scalar(0.0));
                let wv = leaf(&Tensor::scalar(0.0));
                let y = t.conv2d(&xv, &wv, None, Conv2dSpec::same(3, 3))?;
                t.sum_all(&t.mul(&y, &y)?)
            },
            &[x, w],
            1e-5,
            None,
            seed,
        ),
        1e-4,
    );
    let a = rt(vec![4, 5]);
    let b = rt(vec![5, 3]);
    check(
        "matmul_softmax",
        grad_check(
            |leaf, t: &Tape<f64>| {
                let av = leaf(&Tensor::scalar(0.0));
                let bv = leaf(&Tensor::scalar(0.0));
                let y = t.softmax_last(&t.matmul(&av, &bv)?)?;
                t.sum_all(&t.mul(&y, &y)?)
            },
            &[a, b],
            1e-5,
            None,
            seed,
        ),
        1e-4,
    );
    // tiny full network, sampled parameter coordinates
    let tiny = LmNetConfig {
        base_channels: 4,
        expansion: 2,
        se_reduction: 2,
        num_classes: 2,
        in_channels: 3,
        window: 3,
        heads: 2,
        mlp_ratio: 2,
        depth: 1,
    };
    let net = LmNet::<f64>::new(tiny, seed)?;
    net.randomize_norms(seed.wrapping_add(1));
    let input = rt(vec![1, 3, 16, 16]);
    let labels: std::sync::Arc<Vec<u32>> =
        std::sync::Arc::new((0..256).map(|p| (p % 2) as u32).collect());
    let weights = Tensor::<f64>::ones(vec![2])?;
    let params: Vec<_> = net
        .slots()
        .into_iter()
        .filter_map(|s| match s {
            lmnet::nn::Slot::Param(p) => Some(p),
            _ => None,
        })
        .collect();
    check(
        "full_net_wce",
        grad_check_params(
            |t: &Tape<f64>| {
                let xv = t.constant(input.clone())?;
                let logits = net.forward(t, &xv, Mode::Eval)?;
                t.wce_loss(&logits, labels.clone(), &weights)
            },
            &params,
            1e-5,
            Some(1),
            seed,
        ),
        1e-3,
    );
    if failures > 0 {
        return Err(Error::Autodiff(format!("{failures} gradient check(s) failed")));
    }
    Ok(())
}

fn cmd_cost(args: &ConfigArgs, unit: FlopsUnit, size: usize) -> Result<()> {
    let cfg = load_config(args)?;
    if size % 16 != 0 || size == 0 {
        return Err(Error::InvalidArgument("size must be divisible by 16".into()));
    }
    let mut model = LmNet::<f32>::new(cfg.model, cfg.seed)?;
    let unfused = model.count_cost(size, size, unit)?;
    model.fuse()?;
    let fused = model.count_cost(size, size, unit)?;
    emit(json!({"event": "cost", "form": "unfused", "params": unfused.params,
        "params_with_buffers": unfused.params_with_buffers,
        "compute": unfused.compute.to_string(), "unit": unit, "input": [size, size]}));
    emit(json!({"event": "cost", "form": "fused", "params": fused.params,
        "params_with_buffers": fused.params_with_buffers,
        "compute": fused.compute.to_string(), "unit": unit, "input": [size, size]}));
    Ok(())
}

fn cmd_synth(n: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    let manifest = data::synth_shapes(n, size, seed, out)?;
    emit(json!({"event": "synth", "n": n, "size": size, "seed": seed,
        "manifest": out.join("manifest.json"),
        "train": manifest.split(Split::Train).len(),
        "val": manifest.split(Split::Val).len(),
        "test": manifest.split(Split::Test).len()}));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { config, out } => cmd_train(config, out),
        Command::Fuse { weights, out } => cmd_fuse(weights, out),
        Command::Infer { weights, image, out, size } => cmd_infer(weights, image, out, *size),
        Command::Eval { weights, manifest, out, size, foreground_only } => {
            cmd_eval(weights, manifest, out.as_deref(), *size, *foreground_only)
        }
        Command::Gradcheck { config } => cmd_gradcheck(config),
        Command::Cost { config, flops_unit, size } => {
            cmd_cost(config, (*flops_unit).into(), *size)
        }
        Command::Synth { n, size, seed, out } => cmd_synth(*n, *size, *seed, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"event": "error", "message": e.to_string()}));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
