use std::path::PathBuf;

use clap::Parser;
use maskseg::datagen::{gen_outlier_pool, read_dataset};
use maskseg::model::{AttentionKind, ModelConfig};
use maskseg::refinement::RefineMode;
use maskseg::trainer::{ablation_csv, ablation_run, AblationCell, TrainConfig};
use maskseg::{Error, Result};

use crate::config::FileConfig;
use crate::manifest::RunTracker;

#[derive(Clone, Debug, clap::ValueEnum)]
pub enum Table {
    /// Component-wise grid: baseline vs +GMA vs +CL vs +RM
    Components,
    /// Margin sweep m ∈ {0.5, 0.75, 0.9, 1.0}
    Margin,
    /// Attention kinds {ca, ma, gma}
    Attention,
    /// Refinement mask off / formula / prose
    Refinement,
    /// Outlier probability sweep {0.1, 0.2, 0.5, 1.0}
    Outlier,
    /// All of the above
    All,
}

#[derive(Parser, Debug)]
pub struct Args {
    /// Training dataset directory (inlier scenes)
    #[arg(long)]
    pub data: PathBuf,
    /// Test dataset directory (scenes with pasted anomalies)
    #[arg(long)]
    pub test: PathBuf,
    /// Output directory for the CSV tables
    #[arg(long)]
    pub out: PathBuf,
    /// Which sub-table to produce
    #[arg(long, value_enum, default_value = "all")]
    pub table: Table,
    /// Flat key = value config file; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub phase1_iters: Option<usize>,
    #[arg(long)]
    pub phase2_iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
}

fn grid_for(table: &Table, base: &TrainConfig) -> Vec<(&'static str, Vec<AblationCell>)> {
    let cell = |attention, use_cl, refine, margin, p_outlier| AblationCell {
        attention,
        use_cl,
        refine,
        margin,
        p_outlier,
    };
    let (m, p) = (base.margin, base.p_outlier);
    let rm = Some(RefineMode::Prose);
    let components = (
        "components",
        vec![
            cell(AttentionKind::MA, false, None, m, p),
            cell(AttentionKind::GMA, false, None, m, p),
            cell(AttentionKind::GMA, true, None, m, p),
            cell(AttentionKind::GMA, true, rm, m, p),
        ],
    );
    let margin = (
        "margin",
        [0.5, 0.75, 0.9, 1.0]
            .iter()
            .map(|&mv| cell(AttentionKind::GMA, true, rm, mv, p))
            .collect(),
    );
    let attention = (
        "attention",
        [AttentionKind::CA, AttentionKind::MA, AttentionKind::GMA]
            .iter()
            .map(|&a| cell(a, true, None, m, p))
            .collect(),
    );
    let refinement = (
        "refinement",
        vec![
            cell(AttentionKind::GMA, true, None, m, p),
            cell(AttentionKind::GMA, true, Some(RefineMode::Formula), m, p),
            cell(AttentionKind::GMA, true, Some(RefineMode::Prose), m, p),
        ],
    );
    let outlier = (
        "outlier",
        [0.1, 0.2, 0.5, 1.0]
            .iter()
            .map(|&pv| cell(AttentionKind::GMA, true, rm, m, pv))
            .collect(),
    );
    match table {
        Table::Components => vec![components],
        Table::Margin => vec![margin],
        Table::Attention => vec![attention],
        Table::Refinement => vec![refinement],
        Table::Outlier => vec![outlier],
        Table::All => vec![components, margin, attention, refinement, outlier],
    }
}

pub fn run(args: Args) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let train = read_dataset(&args.data)?;
    let test = read_dataset(&args.test)?;
    if !test
        .scenes
        .iter()
        .any(|s| s.ood_mask.data().iter().any(|&v| v > 0.0))
    {
        return Err(Error::data("ablation test set has no OOD pixels"));
    }

    let defaults = TrainConfig::default();
    let seed = file.get("seed", &args.seed, 0)?;
    let base = TrainConfig {
        phase1_iters: file.get("phase1_iters", &args.phase1_iters, defaults.phase1_iters)?,
        phase2_iters: file.get("phase2_iters", &args.phase2_iters, defaults.phase2_iters)?,
        batch_size: file.get("batch_size", &args.batch, defaults.batch_size)?,
        eval_interval: usize::MAX / 2,
        seed,
        ..defaults
    };
    let model_defaults = ModelConfig::default();
    let model_config = ModelConfig {
        height: train.manifest.height,
        width: train.manifest.width,
        embed_dim: file.get("embed_dim", &args.embed_dim, model_defaults.embed_dim)?,
        num_queries: file.get("num_queries", &args.queries, model_defaults.num_queries)?,
        decoder_layers: file.get("decoder_layers", &args.layers, model_defaults.decoder_layers)?,
        num_classes: train.manifest.num_classes,
        attention: AttentionKind::GMA,
        seed,
    };
    let pool_size = file.get("pool_size", &args.pool_size, 300)?;
    let pool = gen_outlier_pool(seed, pool_size, train.manifest.height, train.manifest.width);

    std::fs::create_dir_all(&args.out)?;
    let mut tracker = RunTracker::start("ablate");
    tracker
        .config_path(args.config.as_deref())
        .seed(seed)
        .input(&args.data)
        .input(&args.test)
        .output(&args.out);
    for (name, grid) in grid_for(&args.table, &base) {
        let rows = ablation_run(&train, &test, &pool, &model_config, &base, &grid)?;
        let csv = ablation_csv(&rows);
        std::fs::write(args.out.join(format!("table_{}.csv", name)), &csv)?;
        println!("table_{}.csv:\n{}", name, csv);
    }
    tracker.finish(&args.out)?;
    Ok(())
}
