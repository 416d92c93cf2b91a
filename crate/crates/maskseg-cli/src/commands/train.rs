use std::path::{Path, PathBuf};

use clap::Parser;
use maskseg::datagen::{gen_outlier_pool, read_dataset, Dataset};
use maskseg::model::{
    init_model, load_checkpoint, save_checkpoint, AttentionKind, Model, ModelConfig,
};
use maskseg::trainer::{
    finetune_contrastive, train_phase1, Phase2Objective, RunReport, TrainConfig,
};
use maskseg::{Error, Result};

use crate::config::FileConfig;
use crate::manifest::RunTracker;

#[derive(Parser, Debug)]
pub struct TrainArgs {
    /// Training dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (checkpoints + report)
    #[arg(long)]
    pub out: PathBuf,
    /// Optional evaluation dataset directory (for logged OOD metrics)
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Flat key = value config file; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Attention kind: gma, ma, or ca
    #[arg(long)]
    pub attention: Option<AttentionKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Phase-1 iterations
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
}

#[derive(Parser, Debug)]
pub struct FinetuneArgs {
    /// Training dataset directory (inlier scenes)
    #[arg(long)]
    pub data: PathBuf,
    /// Phase-1 checkpoint directory to start from
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory (checkpoints + report)
    #[arg(long)]
    pub out: PathBuf,
    /// Optional evaluation dataset directory (for logged OOD metrics)
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Flat key = value config file; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Phase-2 iterations
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Contrastive margin m
    #[arg(long)]
    pub margin: Option<f64>,
    /// Per-slot outlier probability
    #[arg(long)]
    pub p_outlier: Option<f64>,
    /// Outlier pool size
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// Phase-2 objective: cl, cl-shifted, or bce
    #[arg(long)]
    pub objective: Option<String>,
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(path).map_err(|e| match e {
        Error::Io(io) => Error::data(format!("dataset '{}': {}", path.display(), io)),
        other => other,
    })
}

fn finish_run(report: &RunReport, out: &Path) -> Result<()> {
    println!(
        "{} steps, final loss {:.6}, wall clock {:.1}s; outputs in {}",
        report.loss_curve.len(),
        report.loss_curve.last().copied().unwrap_or(f64::NAN),
        report.wall_clock_secs,
        out.display()
    );
    if report.diverged {
        return Err(Error::numeric(
            "training diverged (non-finite loss); partial report saved",
        ));
    }
    Ok(())
}

pub fn run_train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let train_data = load_data(&args.data)?;
    let eval_data = args.eval_data.as_deref().map(load_data).transpose()?;

    let defaults = TrainConfig::default();
    let attention = file.get("attention", &args.attention, AttentionKind::GMA)?;
    let seed = file.get("seed", &args.seed, 0)?;
    let config = TrainConfig {
        phase1_iters: file.get("phase1_iters", &args.iters, defaults.phase1_iters)?,
        batch_size: file.get("batch_size", &args.batch, defaults.batch_size)?,
        lr1: file.get("lr1", &args.lr, defaults.lr1)?,
        weight_decay: file.get("weight_decay", &args.weight_decay, defaults.weight_decay)?,
        eval_interval: file.get("eval_interval", &args.eval_interval, defaults.eval_interval)?,
        seed,
        attention,
        ..defaults
    };
    let model_defaults = ModelConfig::default();
    let model_config = ModelConfig {
        height: train_data.manifest.height,
        width: train_data.manifest.width,
        embed_dim: file.get("embed_dim", &args.embed_dim, model_defaults.embed_dim)?,
        num_queries: file.get("num_queries", &args.queries, model_defaults.num_queries)?,
        decoder_layers: file.get("decoder_layers", &args.layers, model_defaults.decoder_layers)?,
        num_classes: train_data.manifest.num_classes,
        attention,
        seed,
    };

    let mut tracker = RunTracker::start("train");
    tracker
        .config_path(args.config.as_deref())
        .seed(seed)
        .input(&args.data)
        .output(&args.out);
    let mut model = init_model(model_config)?;
    let report = train_phase1(
        &mut model,
        &train_data,
        &config,
        eval_data.as_ref(),
        Some(&args.out),
    )?;
    tracker.finish(&args.out)?;
    finish_run(&report, &args.out)
}

fn parse_objective(s: &str) -> Result<Phase2Objective> {
    match s.to_ascii_lowercase().as_str() {
        "cl" => Ok(Phase2Objective::Contrastive),
        "cl-shifted" => Ok(Phase2Objective::ContrastiveShifted),
        "bce" => Ok(Phase2Objective::OutlierBce),
        other => Err(Error::config(format!(
            "unknown objective '{}' (expected cl, cl-shifted, or bce)",
            other
        ))),
    }
}

pub fn run_finetune(args: FinetuneArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let train_data = load_data(&args.data)?;
    let eval_data = args.eval_data.as_deref().map(load_data).transpose()?;
    let mut model: Model = load_checkpoint(&args.checkpoint)?;
    if model.config.height != train_data.manifest.height
        || model.config.width != train_data.manifest.width
        || model.config.num_classes != train_data.manifest.num_classes
    {
        return Err(Error::config(format!(
            "checkpoint ({}x{}, {} classes) does not match dataset ({}x{}, {} classes)",
            model.config.height,
            model.config.width,
            model.config.num_classes,
            train_data.manifest.height,
            train_data.manifest.width,
            train_data.manifest.num_classes
        )));
    }

    let defaults = TrainConfig::default();
    let seed = file.get("seed", &args.seed, 0)?;
    let objective_name = file.get("objective", &args.objective, "cl".to_string())?;
    let config = TrainConfig {
        phase2_iters: file.get("phase2_iters", &args.iters, defaults.phase2_iters)?,
        batch_size: file.get("batch_size", &args.batch, defaults.batch_size)?,
        lr2: file.get("lr2", &args.lr, defaults.lr2)?,
        weight_decay: file.get("weight_decay", &args.weight_decay, defaults.weight_decay)?,
        eval_interval: file.get("eval_interval", &args.eval_interval, defaults.eval_interval)?,
        margin: file.get("margin", &args.margin, defaults.margin)?,
        p_outlier: file.get("p_outlier", &args.p_outlier, defaults.p_outlier)?,
        objective: parse_objective(&objective_name)?,
        seed,
        attention: model.config.attention,
        ..defaults
    };
    let pool_size = file.get("pool_size", &args.pool_size, 300)?;
    let pool = gen_outlier_pool(
        seed,
        pool_size,
        train_data.manifest.height,
        train_data.manifest.width,
    );

    let mut tracker = RunTracker::start("finetune");
    tracker
        .config_path(args.config.as_deref())
        .seed(seed)
        .input(&args.data)
        .input(&args.checkpoint)
        .output(&args.out);
    let report = finetune_contrastive(
        &mut model,
        &train_data,
        &pool,
        &config,
        eval_data.as_ref(),
        Some(&args.out),
    )?;
    // The fine-tuned checkpoint references the phase-1 checkpoint it
    // started from.
    save_checkpoint(
        args.out.join("final"),
        &model,
        Some(&args.checkpoint.display().to_string()),
    )?;
    tracker.finish(&args.out)?;
    finish_run(&report, &args.out)
}
