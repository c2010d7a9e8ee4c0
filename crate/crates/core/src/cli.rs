//! Command-line entry points. Every command echoes its resolved
//! configuration to `config.json` in its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::ablations::{
    run_variant, splitbranch_merge_weights, sweep_alpha, write_ablation_report, write_reconstruction_sheet,
    AblationSpec,
};
use crate::data::{
    generate_synthetic, load_dataset, load_external_attributes, make_splits, save_dataset, Dataset, GenConfig,
    SplitSpec,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_all, linspace, write_metrics};
use crate::nets::{NetConfig, Variant};
use crate::objectives::{AdvForm, HyperParams};
use crate::spaces::{variance_shift, VarianceProfile, VarianceSource};
use crate::trainer::{load_checkpoint, resume, save_checkpoint, train, write_train_log, TrainConfig, TrainState};

/// Exit status for runtime failures.
pub const EXIT_FAILURE: i32 = 1;
/// Exit status for invalid invocations and configurations.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "spaen", version, about = "Zero-shot recognition with adversarially aligned embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic attribute dataset with a seen/unseen split.
    GenerateData(GenerateArgs),
    /// Train one variant and write checkpoints plus train_log.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint: metrics.csv, suc.csv, ausuc.txt.
    Eval(EvalArgs),
    /// Train and compare several variants on the same data and seed.
    Ablate(AblateArgs),
    /// Attribute-variance shift between training and test classes.
    AnalyzeAttributes(AnalyzeArgs),
    /// Reconstruction error of the full model across alpha values.
    SweepAlpha(SweepArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 24)]
    pub num_attributes: usize,
    #[arg(long, default_value_t = 60)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0.25)]
    pub low_variance_fraction: f64,
    #[arg(long, default_value_t = 5)]
    pub unseen: usize,
    /// Seen classes held out of training for validation.
    #[arg(long, default_value_t = DEFAULT_VAL_CLASSES)]
    pub val: usize,
}

/// Validation classes carved out of the seen classes by default.
pub const DEFAULT_VAL_CLASSES: usize = 3;

/// Optimisation flags shared by every training command.
#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long = "lambda-p")]
    pub lambda_p: Option<f64>,
    /// Critic weight-clipping bound.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub n_critic: Option<usize>,
    #[arg(long, value_parser = ["wgan", "log"])]
    pub adv_form: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub critic_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

pub const DEFAULT_EPOCHS: usize = 300;

impl TrainFlags {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut hyper = HyperParams::default();
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut hyper.alpha, self.alpha);
        set(&mut hyper.beta, self.beta);
        set(&mut hyper.margin, self.margin);
        set(&mut hyper.lambda_p, self.lambda_p);
        set(&mut hyper.clip_c, self.clip);
        set(&mut hyper.learning_rate, self.lr);
        set(&mut hyper.critic_learning_rate, self.critic_lr);
        if let Some(n) = self.n_critic {
            hyper.n_critic = n;
        }
        if let Some(b) = self.batch_size {
            hyper.batch_size = b;
        }
        if let Some(form) = &self.adv_form {
            hyper.adv_form = form.parse::<AdvForm>()?;
        }
        let mut cfg = TrainConfig {
            hyper,
            epochs: self.epochs,
            seed: self.seed,
            ..TrainConfig::default()
        };
        if let Some(p) = self.patience {
            cfg.patience = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "spaen")]
    #[serde(serialize_with = "display")]
    pub variant: Variant,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint directory written by `train` (e.g. `<train-out>/best`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Calibration factors as `lo:hi:count` or a comma-separated list.
    #[arg(long, allow_hyphen_values = true)]
    pub gamma_grid: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "variant", value_delimiter = ',', default_values_t = Variant::ALL.to_vec())]
    #[serde(serialize_with = "display_all")]
    pub variants: Vec<Variant>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    /// Dataset directory written by generate-data.
    #[arg(long, conflicts_with_all = ["classes", "splits"])]
    pub dataset: Option<PathBuf>,
    /// External class attribute table (`class_id,name,a0,...`).
    #[arg(long, requires = "splits")]
    pub classes: Option<PathBuf>,
    /// External split file, image- or class-level.
    #[arg(long, requires = "classes")]
    pub splits: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Weight classes by image count (`image`) or count each once (`class`).
    #[arg(long, value_parser = ["image", "class"], default_value = "image")]
    pub mode: String,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.1, 1.0, 10.0])]
    pub alphas: Vec<f64>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

fn display<S: serde::Serializer, T: std::fmt::Display>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

fn display_all<S: serde::Serializer>(v: &[Variant], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| x.to_string()))
}

/// Parses `lo:hi:count` or a comma-separated list of numbers.
pub fn parse_gamma_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("bad gamma grid {text:?}"));
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [lo, hi, n] = parts[..] else { return Err(bad()) };
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        if n == 0 || hi < lo {
            return Err(bad());
        }
        Ok(linspace(lo, hi, n))
    } else {
        text.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
            .collect()
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct RunConfig<'a, A: Serialize> {
    command: &'a str,
    args: &'a A,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    net: Option<&'a NetConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    generator: Option<&'a GenConfig>,
}

fn echo_config<A: Serialize>(
    out: &Path,
    command: &str,
    args: &A,
    train: Option<&TrainConfig>,
    net: Option<&NetConfig>,
    generator: Option<&GenConfig>,
) -> Result<()> {
    ensure_dir(out)?;
    write_json(
        &RunConfig {
            command,
            args,
            train,
            net,
            generator,
        },
        &out.join("config.json"),
    )
}

/// Network shapes matching a dataset's attributes and image size.
pub fn net_for(dataset: &Dataset, seed: u64) -> Result<NetConfig> {
    let (h, w, c) = dataset
        .image_shape()
        .ok_or_else(|| Error::InvalidInput("dataset has no images".into()))?;
    if h != w {
        return Err(Error::InvalidInput(format!("images must be square, got {h}x{w}")));
    }
    let net = NetConfig {
        d: dataset.num_attributes(),
        image_size: h,
        channels: c,
        seed,
        ..NetConfig::default()
    };
    net.validate()?;
    Ok(net)
}

pub fn cmd_generate_data(args: &GenerateArgs) -> Result<()> {
    let gen = GenConfig {
        num_classes: args.num_classes,
        num_attributes: args.num_attributes,
        n_per_class: args.n_per_class,
        image_size: args.image_size,
        noise_std: args.noise_std,
        low_variance_fraction: args.low_variance_fraction,
        unseen_count: args.unseen,
        seed: args.seed,
    };
    let dataset = generate_synthetic(&gen)?;
    let splits = make_splits(&dataset, args.unseen, args.val, args.seed)?;
    save_dataset(&dataset, &splits, Some(&gen), &args.out)?;
    echo_config(&args.out, "generate-data", args, None, None, Some(&gen))
}

fn load(dir: &Path) -> Result<(Dataset, SplitSpec)> {
    load_dataset(dir)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.flags.train_config()?;
    let (dataset, splits) = load(&args.dataset)?;
    let (state, report) = match &args.resume {
        Some(dir) => {
            let state = load_checkpoint(dir)?;
            if state.bundle.variant != args.variant {
                return Err(Error::Config(format!(
                    "checkpoint holds a {} model, --variant asks for {}",
                    state.bundle.variant, args.variant
                )));
            }
            resume(state, &dataset, &splits, &cfg)?
        }
        None => train(&dataset, &splits, &net_for(&dataset, cfg.seed)?, args.variant, &cfg)?,
    };
    echo_config(&args.out, "train", args, Some(&cfg), Some(&state.bundle.config), None)?;
    save_checkpoint(&state, &args.out.join("checkpoint"))?;
    let best = TrainState {
        bundle: report.best_bundle.clone().unwrap_or_else(|| state.bundle.clone()),
        ..state.clone()
    };
    save_checkpoint(&best, &args.out.join("best"))?;
    write_train_log(&report.rows, &args.out.join("train_log.csv"))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (dataset, splits) = load(&args.dataset)?;
    let state = load_checkpoint(&args.checkpoint)?;
    state.bundle.check_attributes(dataset.num_attributes())?;
    let grid = args.gamma_grid.as_deref().map(parse_gamma_grid).transpose()?;
    let mut report = evaluate_all(&state.bundle, &dataset, &splits, grid.as_deref())?;
    report.recon_mse = crate::ablations::recon_mse(&state.bundle, &dataset, &splits.unseen_test_ids)?;
    echo_config(&args.out, "eval", args, None, Some(&state.bundle.config), None)?;
    write_metrics(&report, &args.out)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = args.flags.train_config()?;
    let (dataset, splits) = load(&args.dataset)?;
    let net = net_for(&dataset, cfg.seed)?;
    echo_config(&args.out, "ablate", args, Some(&cfg), Some(&net), None)?;
    let mut rows = Vec::new();
    for &variant in &args.variants {
        let spec = AblationSpec {
            variant,
            net: net.clone(),
            train: cfg.clone(),
        };
        let (bundle, report, row) = run_variant(&spec, &dataset, &splits)?;
        let dir = args.out.join(variant.as_str());
        write_metrics(&row.metrics, &dir)?;
        write_train_log(&report.rows, &dir.join("train_log.csv"))?;
        if variant.has_decoder() {
            let sheet = args.out.join(format!("recon_{}.ppm", variant.as_str()));
            write_reconstruction_sheet(&bundle, &dataset, &splits.unseen_test_ids, 16, &sheet)?;
        } else {
            eprintln!("{variant}: no decoder, reconstruction skipped");
        }
        if variant == Variant::SplitBranch {
            let w = splitbranch_merge_weights(&bundle)?;
            let path = dir.join("merge_weights.json");
            write_json(&w, &path)?;
        }
        rows.push(row);
    }
    write_ablation_report(&rows, &args.out.join("ablation_report.csv"))
}

fn write_variance(out: &Path, a: &VarianceProfile, b: &VarianceProfile, cos: f64) -> Result<()> {
    let path = out.join("variance_profile.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    let err = |e: csv::Error| Error::io(&path, e.into());
    w.write_record(["attribute", "train_variance", "test_variance"]).map_err(err)?;
    for (j, (x, y)) in a.variance.iter().zip(&b.variance).enumerate() {
        w.write_record([j.to_string(), x.to_string(), y.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = out.join("variance_cosine.txt");
    fs::write(&path, format!("{cos}\n")).map_err(|e| Error::io(&path, e))
}

/// Attribute-variance cosine between training and unseen-test classes.
pub fn analyze_attributes(args: &AnalyzeArgs) -> Result<(VarianceProfile, VarianceProfile, f64)> {
    let per_image = args.mode == "image";
    let source = if per_image { VarianceSource::PerImage } else { VarianceSource::PerClass };
    match (&args.dataset, &args.classes, &args.splits) {
        (Some(dir), _, _) => {
            let (ds, splits) = load(dir)?;
            let (a, b) = if per_image {
                (
                    splits.train_ids.iter().map(|&i| ds.labels[i]).collect::<Vec<_>>(),
                    splits.unseen_test_ids.iter().map(|&i| ds.labels[i]).collect(),
                )
            } else {
                (splits.seen_classes.clone(), splits.unseen_classes.clone())
            };
            variance_shift(ds.class_attributes.view(), &a, &b, source)
        }
        (None, Some(classes), Some(split_file)) => {
            let ext = load_external_attributes(classes, split_file)?;
            let (a, b) = if per_image && !ext.image_labels.is_empty() {
                let label = |id: &usize| ext.image_labels[id];
                (
                    ext.splits.train_ids.iter().map(label).collect::<Vec<_>>(),
                    ext.splits.unseen_test_ids.iter().map(label).collect(),
                )
            } else {
                (ext.splits.seen_classes.clone(), ext.splits.unseen_classes.clone())
            };
            let source = if ext.image_labels.is_empty() { VarianceSource::PerClass } else { source };
            variance_shift(ext.class_attributes.view(), &a, &b, source)
        }
        _ => Err(Error::Config("give either --dataset or both --classes and --splits".into())),
    }
}

pub fn cmd_analyze_attributes(args: &AnalyzeArgs) -> Result<()> {
    let (a, b, cos) = analyze_attributes(args)?;
    echo_config(&args.out, "analyze-attributes", args, None, None, None)?;
    write_variance(&args.out, &a, &b, cos)
}

pub fn cmd_sweep_alpha(args: &SweepArgs) -> Result<()> {
    let cfg = args.flags.train_config()?;
    if args.alphas.iter().any(|a| !(*a >= 0.0)) {
        return Err(Error::Config("alpha values must be >= 0".into()));
    }
    let (dataset, splits) = load(&args.dataset)?;
    let net = net_for(&dataset, cfg.seed)?;
    echo_config(&args.out, "sweep-alpha", args, Some(&cfg), Some(&net), None)?;
    let results = sweep_alpha(&dataset, &splits, &net, &cfg, &args.alphas)?;
    let path = args.out.join("recon_mse_vs_alpha.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    let err = |e: csv::Error| Error::io(&path, e.into());
    w.write_record(["alpha", "recon_mse"]).map_err(err)?;
    for (alpha, mse, bundle) in &results {
        w.write_record([alpha.to_string(), mse.to_string()]).map_err(err)?;
        let sheet = args.out.join(format!("recon_alpha_{alpha}.ppm"));
        write_reconstruction_sheet(bundle, &dataset, &splits.unseen_test_ids, 16, &sheet)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateData(a) => cmd_generate_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::AnalyzeAttributes(a) => cmd_analyze_attributes(a),
        Command::SweepAlpha(a) => cmd_sweep_alpha(a),
    }
}

/// Exit status for a command's result.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(Error::Config(_)) => EXIT_USAGE,
        Err(_) => EXIT_FAILURE,
    }
}
