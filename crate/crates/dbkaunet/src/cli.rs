//! Command-line interface: reproducible training, evaluation, inference and
//! gradient verification runs.
//!
//! Every run prints (and, when an output directory exists, writes) an
//! effective-configuration dump with all defaults resolved, so any run can be
//! replayed from its artifacts alone.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};

use crate::conv::LDCONV_CENTER;
use crate::data::preprocess::{CLAHE_CLIP, CLAHE_TILES, GAMMA};
use crate::data::synth::synth_sample;
use crate::data::{
    compute_metrics, extract_patches, load_dataset, preprocess, sliding_window_infer, augment,
    DataError, DatasetLayout, FundusSample, MetricsReport,
};
use crate::gradcheck::{full_report, OP_TOLERANCE};
use crate::init::Prng;
use crate::network::{
    dbkaunet_forward, load_checkpoint, save_checkpoint, train_step, AblationFlags, AdamW,
    CheckpointError, DbKaUnet, NetworkConfig, cosine_lr, DICE_EPS, CE_CLAMP,
};
use crate::tensor::{NoGradGuard, Tensor};

// ---------------------------------------------------------------------------
// Errors and exit codes

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    /// 0 is success; config, data and numeric failures get distinct codes.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Data(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Parser)]
#[command(name = "dbkaunet", about = "Dual-branch Kolmogorov-Arnold U-Net for vessel segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train a model and keep the checkpoint with the best validation F1.
    Train(TrainArgs),
    /// Evaluate a checkpoint with stride-8 sliding-window inference.
    Eval(EvalArgs),
    /// Segment one image: probability map + thresholded binary mask.
    Infer(InferArgs),
    /// Verify every differentiable operation against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Flat key=value config file; flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation preset A..H (Table 1).
    #[arg(long)]
    pub ablation: Option<char>,
    #[arg(long, default_value = "run")]
    pub out_dir: PathBuf,
    /// "synthetic" or a dataset directory.
    #[arg(long)]
    pub data: Option<String>,
    /// Dataset layout: drive | stare | chase | flat.
    #[arg(long)]
    pub layout: Option<String>,
    /// "desk" (default) or "paper" scale defaults.
    #[arg(long)]
    pub scale: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// "synthetic" or a dataset directory.
    #[arg(long, default_value = "synthetic")]
    pub data: String,
    #[arg(long, default_value = "flat")]
    pub layout: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 8)]
    pub stride: usize,
    /// Number of synthetic evaluation images (synthetic source only).
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 200)]
    pub synthetic_seed: u64,
    #[arg(long, default_value = "eval")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 8)]
    pub stride: usize,
    #[arg(long, default_value = "infer")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Optional directory for the written report.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// Training configuration

/// Gradient clipping threshold applied inside every training step.
pub const CLIP_NORM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// "desk" or "paper"; selects the defaults below.
    pub scale: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub patch_count: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub val_fraction: f64,
    pub patience: usize,
    pub seed: u64,
    pub ablation: char,
    pub base_channels: usize,
    /// "synthetic" or a dataset directory path.
    pub data: String,
    pub layout: String,
    /// Synthetic source only: number and side length of generated images.
    pub synthetic_images: usize,
    pub synthetic_size: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: small enough to run on a CPU in minutes. The
    /// paper-scale values (50 epochs, batch 64, 150000 patches) remain
    /// selectable via `scale = paper`.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            scale: "desk".into(),
            epochs: 10,
            batch_size: 8,
            lr: 5e-4,
            weight_decay: 1e-5,
            alpha: 0.5,
            patch_count: 2000,
            patch_size: 64,
            stride: 8,
            val_fraction: 0.1,
            patience: 10,
            seed: 7,
            ablation: 'H',
            base_channels: 8,
            data: "synthetic".into(),
            layout: "flat".into(),
            synthetic_images: 20,
            synthetic_size: 128,
        }
    }

    pub fn paper() -> TrainConfig {
        TrainConfig {
            scale: "paper".into(),
            epochs: 50,
            batch_size: 64,
            patch_count: 150_000,
            base_channels: 16,
            ..TrainConfig::desk()
        }
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
            v.parse().map_err(|_| CliError::Config(format!("invalid value '{v}' for field '{key}'")))
        }
        match key {
            "scale" => match value {
                "desk" | "paper" => {
                    let seed = self.seed;
                    *self = if value == "paper" { TrainConfig::paper() } else { TrainConfig::desk() };
                    self.seed = seed;
                }
                _ => return Err(CliError::Config(format!("field 'scale' must be desk or paper, got '{value}'"))),
            },
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "clip_norm" => {
                let v: f64 = num(key, value)?;
                if v != CLIP_NORM {
                    return Err(CliError::Config(format!(
                        "field 'clip_norm' is fixed at {CLIP_NORM}; got {v}"
                    )));
                }
            }
            "alpha" => self.alpha = num(key, value)?,
            "patch_count" => self.patch_count = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "stride" => self.stride = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "ablation" => {
                self.ablation = num(key, value)?;
            }
            "base_channels" => self.base_channels = num(key, value)?,
            "data" => self.data = value.to_string(),
            "layout" => self.layout = value.to_string(),
            "synthetic_images" => self.synthetic_images = num(key, value)?,
            "synthetic_size" => self.synthetic_size = num(key, value)?,
            _ => return Err(CliError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses a flat key=value file ('#' starts a comment) over the desk
    /// defaults; a leading `scale = paper` line switches the baseline.
    pub fn from_file(path: &Path) -> Result<TrainConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = TrainConfig::desk();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let e = |msg: String| Err(CliError::Config(msg));
        if !('A'..='H').contains(&self.ablation) {
            return e(format!("field 'ablation' must be A..H, got '{}'", self.ablation));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return e(format!("field 'base_channels' must be even and >= 2, got {}", self.base_channels));
        }
        if self.patch_size % 32 != 0 || self.patch_size < 64 {
            return e(format!("field 'patch_size' must be a multiple of 32 and >= 64, got {}", self.patch_size));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction <= 0.0 {
            return e(format!("field 'val_fraction' must be in (0,1), got {}", self.val_fraction));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patch_count == 0 {
            return e("fields 'epochs', 'batch_size', 'patch_count' must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return e(format!("field 'alpha' must be in [0,1], got {}", self.alpha));
        }
        if self.data == "synthetic" && self.synthetic_size < self.patch_size {
            return e(format!(
                "field 'synthetic_size' ({}) below patch_size ({})",
                self.synthetic_size, self.patch_size
            ));
        }
        Ok(())
    }

    /// Replayable dump of the resolved configuration plus every fixed
    /// constant the run depends on. Desk-scale values are marked.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let paper = TrainConfig::paper();
        let mark = if self.scale == "desk" { " # desk-scale" } else { "" };
        writeln!(s, "# effective configuration (all defaults resolved)").unwrap();
        writeln!(s, "scale = {}{mark}", self.scale).unwrap();
        writeln!(s, "epochs = {}{}", self.epochs, if self.epochs != paper.epochs { " # paper: 50" } else { "" }).unwrap();
        writeln!(s, "batch_size = {}{}", self.batch_size, if self.batch_size != paper.batch_size { " # paper: 64" } else { "" }).unwrap();
        writeln!(s, "lr = {}", self.lr).unwrap();
        writeln!(s, "weight_decay = {}", self.weight_decay).unwrap();
        writeln!(s, "clip_norm = {CLIP_NORM}").unwrap();
        writeln!(s, "alpha = {}", self.alpha).unwrap();
        writeln!(s, "patch_count = {}{}", self.patch_count, if self.patch_count != paper.patch_count { " # paper: 150000" } else { "" }).unwrap();
        writeln!(s, "patch_size = {}", self.patch_size).unwrap();
        writeln!(s, "stride = {}", self.stride).unwrap();
        writeln!(s, "val_fraction = {}", self.val_fraction).unwrap();
        writeln!(s, "patience = {}", self.patience).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "ablation = {}", self.ablation).unwrap();
        writeln!(s, "base_channels = {}", self.base_channels).unwrap();
        writeln!(s, "data = {}", self.data).unwrap();
        writeln!(s, "layout = {}", self.layout).unwrap();
        writeln!(s, "synthetic_images = {}", self.synthetic_images).unwrap();
        writeln!(s, "synthetic_size = {}", self.synthetic_size).unwrap();
        s.push_str(&fixed_constants());
        s
    }
}

/// Non-configurable constants baked into the model and pipeline.
fn fixed_constants() -> String {
    let mut s = String::new();
    writeln!(s, "# fixed constants").unwrap();
    writeln!(s, "ldconv_center = {LDCONV_CENTER}").unwrap();
    writeln!(s, "bn_eps = 1e-5").unwrap();
    writeln!(s, "bn_momentum = 0.1").unwrap();
    writeln!(s, "dice_eps = {DICE_EPS}").unwrap();
    writeln!(s, "ce_clamp = {CE_CLAMP:e}").unwrap();
    writeln!(s, "clahe_tiles = {CLAHE_TILES}").unwrap();
    writeln!(s, "clahe_clip = {CLAHE_CLIP}").unwrap();
    writeln!(s, "gamma = {GAMMA}").unwrap();
    writeln!(s, "spline_intervals = 5").unwrap();
    writeln!(s, "spline_degree = 3").unwrap();
    writeln!(s, "spline_range = [-2, 2]").unwrap();
    s
}

fn write_dump(out_dir: &Path, dump: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("effective-config.txt"), dump)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Data loading shared by train and eval

fn parse_layout(s: &str) -> Result<DatasetLayout, CliError> {
    s.parse::<DatasetLayout>()
        .map_err(|_| CliError::Config(format!("unknown layout '{s}' (drive|stare|chase|flat)")))
}

fn load_samples(
    data: &str,
    layout: &str,
    synthetic_images: usize,
    synthetic_size: usize,
    synthetic_seed: u64,
) -> Result<Vec<FundusSample>, CliError> {
    if data == "synthetic" {
        return Ok((0..synthetic_images)
            .map(|i| synth_sample(synthetic_seed + i as u64, synthetic_size))
            .collect());
    }
    let layout = parse_layout(layout)?;
    let samples = load_dataset(Path::new(data), layout)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("no samples found in {data}")));
    }
    Ok(samples)
}

/// Per-worker seed derivation (documented determinism contract): worker k
/// mixes the base seed with its index through a fixed odd multiplier.
fn worker_seed(base: u64, k: u64) -> u64 {
    base ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

// ---------------------------------------------------------------------------
// train

/// Pooled F1 of a model over held-out patches at threshold 0.5.
fn validation_f1(model: &DbKaUnet, val: &[(Tensor, Tensor)]) -> f64 {
    let _guard = NoGradGuard::new();
    let (mut probs, mut masks) = (Vec::new(), Vec::new());
    for (img, mask) in val {
        probs.extend(dbkaunet_forward(img, model, false).to_vec());
        masks.extend(mask.to_vec());
    }
    let n = probs.len();
    let fov = Tensor::full(&[n], 1.0);
    compute_metrics(&Tensor::new(&[n], probs), &Tensor::new(&[n], masks), &fov, 0.5).f1
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::desk(),
    };
    if let Some(scale) = &args.scale {
        cfg.apply("scale", scale)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(ab) = args.ablation {
        cfg.ablation = ab;
    }
    if let Some(data) = &args.data {
        cfg.data = data.clone();
    }
    if let Some(layout) = &args.layout {
        cfg.layout = layout.clone();
    }
    cfg.validate()?;

    let dump = cfg.dump();
    print!("{dump}");
    write_dump(&args.out_dir, &dump)?;

    // -- data ---------------------------------------------------------------
    let samples = load_samples(&cfg.data, &cfg.layout, cfg.synthetic_images, cfg.synthetic_size, cfg.seed)?;
    let per_image = cfg.patch_count.div_ceil(samples.len());
    let mut patches = Vec::new();
    for (k, sample) in samples.iter().enumerate() {
        sample.validate()?;
        let gray = preprocess(sample);
        for (p, m) in extract_patches(&gray, &sample.vessel_mask, per_image, cfg.patch_size, worker_seed(cfg.seed, k as u64)) {
            patches.push((p, m));
        }
    }
    patches.truncate(cfg.patch_count);

    let mut rng = Prng::seed_from_u64(worker_seed(cfg.seed, u64::MAX));
    // seeded shuffle, then the tail becomes the validation split
    for i in (1..patches.len()).rev() {
        patches.swap(i, rng.gen_range(0..=i));
    }
    let n_val = ((patches.len() as f64) * cfg.val_fraction).round().max(1.0) as usize;
    let val: Vec<(Tensor, Tensor)> = patches.split_off(patches.len() - n_val);
    let train = patches;
    println!("data: {} train patches, {} validation patches", train.len(), val.len());

    // -- model / optimizer ---------------------------------------------------
    let model = DbKaUnet::new(NetworkConfig::new(cfg.base_channels, cfg.seed, AblationFlags::preset(cfg.ablation)));
    println!("model: ablation {} with {} parameters", cfg.ablation, model.param_count());
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, cfg.epochs * steps_per_epoch);

    std::fs::create_dir_all(&args.out_dir)?;
    let csv_path = args.out_dir.join("train_log.csv");
    let ckpt_path = args.out_dir.join("best.ckpt");
    let mut csv = std::fs::File::create(&csv_path)?;
    writeln!(csv, "epoch,train_loss,val_f1,lr")?;

    let mut best_f1 = f64::NEG_INFINITY;
    let mut since_best = 0;
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(
        || -> Result<(), CliError> {
            let mut order: Vec<usize> = (0..train.len()).collect();
            for epoch in 1..=cfg.epochs {
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.gen_range(0..=i));
                }
                let mut epoch_loss = 0.0;
                for chunk in order.chunks(cfg.batch_size) {
                    let batch: Vec<(Tensor, Tensor)> =
                        chunk.iter().map(|&i| augment(&train[i].0, &train[i].1, &mut rng)).collect();
                    epoch_loss += train_step(&model, &batch, &mut opt, cfg.alpha) * chunk.len() as f64;
                }
                let train_loss = epoch_loss / train.len() as f64;
                let val_f1 = validation_f1(&model, &val);
                let lr = cosine_lr(cfg.lr, opt.step.saturating_sub(1), opt.total_steps);
                println!("epoch {epoch}: train_loss {train_loss:.6} val_f1 {val_f1:.4} lr {lr:.3e}");
                writeln!(csv, "{epoch},{train_loss},{val_f1},{lr}")?;

                if val_f1 > best_f1 {
                    best_f1 = val_f1;
                    since_best = 0;
                    save_checkpoint(&ckpt_path, &model, Some(&opt), epoch, best_f1)?;
                } else {
                    since_best += 1;
                    if since_best >= cfg.patience {
                        println!("early-stop at epoch {epoch} (no improvement for {} epochs)", cfg.patience);
                        writeln!(csv, "# early-stop epoch={epoch}")?;
                        break;
                    }
                }
            }
            Ok(())
        },
    ));
    match outcome {
        Ok(r) => r?,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "training panicked".into());
            return Err(CliError::Numeric(msg));
        }
    }
    println!("best val_f1 {best_f1:.4}; checkpoint {}", ckpt_path.display());
    println!("log {}", csv_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn json_line(id: &str, r: &MetricsReport) -> String {
    format!(
        "{{\"id\": \"{id}\", \"auc\": {:.6}, \"f1\": {:.6}, \"se\": {:.6}, \"sp\": {:.6}, \"acc\": {:.6}, \"tp\": {}, \"fp\": {}, \"tn\": {}, \"fn\": {}}}",
        r.auc, r.f1, r.se, r.sp, r.acc, r.tp, r.fp, r.tn, r.fn_
    )
}

fn csv_line(id: &str, r: &MetricsReport) -> String {
    format!(
        "{id},{},{},{},{},{},{},{},{},{}",
        r.auc, r.f1, r.se, r.sp, r.acc, r.tp, r.fp, r.tn, r.fn_
    )
}

/// Full-image vessel probability for one sample via sliding windows.
fn predict_sample(model: &DbKaUnet, sample: &FundusSample, stride: usize, patch: usize) -> Tensor {
    let gray = preprocess(sample);
    let f = |win: &Tensor| dbkaunet_forward(win, model, false);
    sliding_window_infer(&f, &gray, stride, patch)
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    if args.stride == 0 {
        return Err(CliError::Config("field 'stride' must be positive".into()));
    }
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(CliError::Config(format!("field 'threshold' must be in [0,1], got {}", args.threshold)));
    }
    let (model, _, epoch, best_f1) = load_checkpoint(&args.checkpoint)?;
    let patch = 64;

    let mut dump = String::new();
    writeln!(dump, "# effective configuration (all defaults resolved)").unwrap();
    writeln!(dump, "checkpoint = {} # epoch {epoch}, best val F1 {best_f1:.4}", args.checkpoint.display()).unwrap();
    writeln!(dump, "data = {}", args.data).unwrap();
    writeln!(dump, "layout = {}", args.layout).unwrap();
    writeln!(dump, "threshold = {}", args.threshold).unwrap();
    writeln!(dump, "stride = {}", args.stride).unwrap();
    writeln!(dump, "patch_size = {patch}").unwrap();
    writeln!(dump, "synthetic_count = {}", args.count).unwrap();
    writeln!(dump, "synthetic_seed = {}", args.synthetic_seed).unwrap();
    dump.push_str(&fixed_constants());
    print!("{dump}");
    write_dump(&args.out_dir, &dump)?;

    let samples = load_samples(&args.data, &args.layout, args.count, 128, args.synthetic_seed)?;
    let windows_per_image = {
        let s = &samples[0];
        let n = |len: usize| if len <= patch { 1 } else { (len - patch).div_ceil(args.stride) + 1 };
        n(s.height()) * n(s.width())
    };
    println!("evaluating {} images ({windows_per_image} windows each at stride {})", samples.len(), args.stride);

    let mut csv = String::from("id,auc,f1,se,sp,acc,tp,fp,tn,fn\n");
    let mut reports = Vec::new();
    for sample in &samples {
        sample.validate()?;
        let prob = predict_sample(&model, sample, args.stride, patch);
        let r = compute_metrics(&prob, &sample.vessel_mask, &sample.fov_mask, args.threshold);
        println!("{}", json_line(&sample.source_id, &r));
        csv.push_str(&csv_line(&sample.source_id, &r));
        csv.push('\n');
        reports.push(r);
    }

    // aggregate: mean of the per-image metric values, pooled confusion counts
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    let agg = MetricsReport {
        auc: mean(&|r| r.auc),
        f1: mean(&|r| r.f1),
        se: mean(&|r| r.se),
        sp: mean(&|r| r.sp),
        acc: mean(&|r| r.acc),
        tp: reports.iter().map(|r| r.tp).sum(),
        fp: reports.iter().map(|r| r.fp).sum(),
        tn: reports.iter().map(|r| r.tn).sum(),
        fn_: reports.iter().map(|r| r.fn_).sum(),
    };
    println!("{}", json_line("mean", &agg));
    csv.push_str(&csv_line("mean", &agg));
    csv.push('\n');
    let csv_path = args.out_dir.join("metrics.csv");
    std::fs::write(&csv_path, csv)?;
    println!("metrics {}", csv_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// infer

fn cmd_infer(args: &InferArgs) -> Result<(), CliError> {
    if args.stride == 0 {
        return Err(CliError::Config("field 'stride' must be positive".into()));
    }
    let (model, _, epoch, best_f1) = load_checkpoint(&args.checkpoint)?;
    let rgb = crate::data::dataset::load_rgb(&args.image)?;
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let sample = FundusSample {
        rgb_image: rgb,
        fov_mask: Tensor::full(&[h, w], 1.0),
        vessel_mask: Tensor::zeros(&[h, w]),
        source_id: args.image.display().to_string(),
    };

    let mut dump = String::new();
    writeln!(dump, "# effective configuration (all defaults resolved)").unwrap();
    writeln!(dump, "checkpoint = {} # epoch {epoch}, best val F1 {best_f1:.4}", args.checkpoint.display()).unwrap();
    writeln!(dump, "image = {} # {h}x{w}", args.image.display()).unwrap();
    writeln!(dump, "threshold = {}", args.threshold).unwrap();
    writeln!(dump, "stride = {}", args.stride).unwrap();
    writeln!(dump, "patch_size = 64").unwrap();
    dump.push_str(&fixed_constants());
    print!("{dump}");
    write_dump(&args.out_dir, &dump)?;

    let prob = predict_sample(&model, &sample, args.stride, 64);
    let pd = prob.to_vec();
    let stem = args.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");

    // probability map at 16-bit depth, mask as the exact thresholding of it
    let prob_u16: Vec<u16> = pd.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let mask_u8: Vec<u8> = prob_u16
        .iter()
        .map(|&q| if q as f64 / 65535.0 >= args.threshold { 255 } else { 0 })
        .collect();
    let prob_path = args.out_dir.join(format!("{stem}_prob.png"));
    let mask_path = args.out_dir.join(format!("{stem}_mask.png"));
    image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, prob_u16)
        .expect("probability buffer size")
        .save(&prob_path)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", prob_path.display())))?;
    image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::from_raw(w as u32, h as u32, mask_u8)
        .expect("mask buffer size")
        .save(&mask_path)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", mask_path.display())))?;
    println!("probability map {}", prob_path.display());
    println!("binary mask {}", mask_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

/// Renders the per-op report; the flag is true when every op passed.
pub fn gradcheck_lines(report: &[crate::gradcheck::OpCheck]) -> (String, bool) {
    let mut s = String::new();
    let mut ok = true;
    for c in report {
        let pass = c.max_rel_err < OP_TOLERANCE;
        ok &= pass;
        writeln!(
            s,
            "{:<34} max rel err {:>10.3e}  {}",
            c.name,
            c.max_rel_err,
            if pass { "PASS" } else { "FAIL" }
        )
        .unwrap();
    }
    writeln!(s, "{} ops checked, tolerance {OP_TOLERANCE:e}: {}", report.len(), if ok { "all passed" } else { "FAILURES" }).unwrap();
    (s, ok)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    println!("# effective configuration (all defaults resolved)");
    println!("tolerance = {OP_TOLERANCE:e}");
    println!("step_sizes = [1e-5, 1e-4, 1e-3]");
    let report = full_report();
    let (text, ok) = gradcheck_lines(&report);
    print!("{text}");
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("gradcheck.txt"), &text)?;
    }
    if ok {
        Ok(())
    } else {
        let worst = report
            .iter()
            .filter(|c| c.max_rel_err >= OP_TOLERANCE)
            .map(|c| c.name)
            .collect::<Vec<_>>()
            .join(", ");
        Err(CliError::Numeric(format!("gradient check failed for: {worst}")))
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::OpCheck;

    #[test]
    fn desk_and_paper_defaults_differ_only_in_scale_fields() {
        let d = TrainConfig::desk();
        let p = TrainConfig::paper();
        assert_eq!((d.epochs, d.batch_size, d.patch_count), (10, 8, 2000));
        assert_eq!((p.epochs, p.batch_size, p.patch_count), (50, 64, 150_000));
        assert_eq!((d.lr, d.weight_decay, d.alpha), (p.lr, p.weight_decay, p.alpha));
        assert_eq!((d.patch_size, d.stride, d.patience), (p.patch_size, p.stride, p.patience));
        assert_eq!(d.val_fraction, p.val_fraction);
        d.validate().unwrap();
        p.validate().unwrap();
    }

    #[test]
    fn config_file_overrides_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "scale = paper\nepochs = 3 # short\nseed=42\nablation = D\n").unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.scale, "paper");
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 64); // paper baseline retained
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.ablation, 'D');
    }

    #[test]
    fn unknown_key_is_a_config_error_with_the_key_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "learning_rate = 0.1\n").unwrap();
        match TrainConfig::from_file(&path) {
            Err(CliError::Config(msg)) => assert!(msg.contains("learning_rate"), "{msg}"),
            other => panic!("expected config error, got {:?}", other.err()),
        }
    }

    #[test]
    fn bad_value_names_the_field_path() {
        let mut cfg = TrainConfig::desk();
        match cfg.apply("epochs", "many") {
            Err(CliError::Config(msg)) => {
                assert!(msg.contains("epochs") && msg.contains("many"), "{msg}");
            }
            other => panic!("expected config error, got {:?}", other.err()),
        }
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut cfg = TrainConfig::desk();
        cfg.ablation = 'Z';
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        cfg = TrainConfig::desk();
        cfg.base_channels = 3;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        cfg = TrainConfig::desk();
        cfg.patch_size = 48;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn clip_norm_override_is_rejected() {
        let mut cfg = TrainConfig::desk();
        assert!(cfg.apply("clip_norm", "5.0").is_ok());
        assert!(matches!(cfg.apply("clip_norm", "1.0"), Err(CliError::Config(_))));
    }

    #[test]
    fn exit_codes_are_distinct_nonzero() {
        let codes = [
            CliError::Config("x".into()).exit_code(),
            CliError::Data("x".into()).exit_code(),
            CliError::Numeric("x".into()).exit_code(),
        ];
        let unique: std::collections::HashSet<i32> = codes.iter().copied().collect();
        assert_eq!(unique.len(), 3);
        assert!(codes.iter().all(|&c| c != 0));
    }

    #[test]
    fn dump_is_replayable_through_the_parser() {
        let cfg = TrainConfig::desk();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.txt");
        // fixed constants are comments or rejected keys; strip non-field lines
        let fields: String = cfg
            .dump()
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .take_while(|l| !l.starts_with("ldconv_center"))
            .map(|l| format!("{l}\n"))
            .collect();
        std::fs::write(&path, fields).unwrap();
        let reparsed = TrainConfig::from_file(&path).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn gradcheck_report_formatting_flags_failures() {
        let good = vec![
            OpCheck { name: "add", max_rel_err: 1e-9 },
            OpCheck { name: "mul", max_rel_err: 3e-7 },
        ];
        let (text, ok) = gradcheck_lines(&good);
        assert!(ok);
        assert_eq!(text.matches("PASS").count(), 2);
        // a deliberately corrupted gradient must FAIL and be named
        let bad = vec![OpCheck { name: "corrupted_op", max_rel_err: 0.3 }];
        let (text, ok) = gradcheck_lines(&bad);
        assert!(!ok);
        assert!(text.contains("corrupted_op") && text.contains("FAIL"));
    }

    #[test]
    fn worker_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..100).map(|k| worker_seed(7, k)).collect();
        assert_eq!(seeds.len(), 100);
    }

    #[test]
    fn train_eval_infer_smoke_run_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg_path = dir.path().join("cfg.txt");
        std::fs::write(
            &cfg_path,
            "epochs = 1\nbatch_size = 4\npatch_count = 12\nbase_channels = 2\nablation = A\nsynthetic_images = 2\nsynthetic_size = 64\nseed = 5\n",
        )
        .unwrap();
        let train = TrainArgs {
            config: Some(cfg_path),
            seed: None,
            ablation: None,
            out_dir: out.clone(),
            data: None,
            layout: None,
            scale: None,
        };
        cmd_train(&train).unwrap();
        let ckpt = out.join("best.ckpt");
        assert!(ckpt.exists());
        let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
        assert!(log.starts_with("epoch,train_loss,val_f1,lr\n"));
        assert_eq!(log.lines().count(), 2, "{log}");
        assert!(out.join("effective-config.txt").exists());

        let eval = EvalArgs {
            checkpoint: ckpt.clone(),
            data: "synthetic".into(),
            layout: "flat".into(),
            threshold: 0.5,
            stride: 64,
            count: 1,
            synthetic_seed: 91,
            out_dir: dir.path().join("eval"),
        };
        cmd_eval(&eval).unwrap();
        let metrics = std::fs::read_to_string(dir.path().join("eval/metrics.csv")).unwrap();
        assert!(metrics.starts_with("id,auc,f1,se,sp,acc,tp,fp,tn,fn\n"));
        assert!(metrics.lines().last().unwrap().starts_with("mean,"));

        // write a PNG to infer on, then re-threshold the outputs
        let sample = synth_sample(3, 64);
        crate::data::save_flat_sample(dir.path(), &sample).unwrap();
        let img_path = dir.path().join(format!("{}.png", sample.source_id));
        let infer = InferArgs {
            checkpoint: ckpt,
            image: img_path,
            threshold: 0.5,
            stride: 64,
            out_dir: dir.path().join("infer"),
        };
        cmd_infer(&infer).unwrap();
        let prob = image::open(dir.path().join("infer/synthetic-3_prob.png")).unwrap().into_luma16();
        let mask = image::open(dir.path().join("infer/synthetic-3_mask.png")).unwrap().into_luma8();
        assert_eq!((prob.width(), prob.height()), (64, 64));
        for (p, m) in prob.pixels().zip(mask.pixels()) {
            let expect = if p.0[0] as f64 / 65535.0 >= 0.5 { 255 } else { 0 };
            assert_eq!(m.0[0], expect, "mask is not the exact thresholded probability map");
        }
    }
}
