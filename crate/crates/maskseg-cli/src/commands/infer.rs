use std::path::PathBuf;

use clap::Parser;
use maskseg::attention::negative_attention_map;
use maskseg::datagen::read_dataset;
use maskseg::model::load_checkpoint;
use maskseg::refinement::{build_refinement_mask, refine_scores, RefineMode, Taxonomy};
use maskseg::scoring::{score_variant, InferenceVariant};
use maskseg::trainer::CONFIDENCE_THRESHOLD;
use maskseg::{mten, pgm, Error, Result, Tensor};

use crate::manifest::RunTracker;

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum RefineModeArg {
    Formula,
    Prose,
}

impl From<RefineModeArg> for RefineMode {
    fn from(v: RefineModeArg) -> Self {
        match v {
            RefineModeArg::Formula => RefineMode::Formula,
            RefineModeArg::Prose => RefineMode::Prose,
        }
    }
}

#[derive(Parser, Debug)]
pub struct Args {
    /// Model checkpoint directory
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory to score
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for score maps
    #[arg(long)]
    pub out: PathBuf,
    /// Also write refinement-masked scores (NNNN.refined.mten)
    #[arg(long)]
    pub refine: bool,
    /// Refinement-mask construction: keep confident thing/road coverage
    /// (formula) or zero confident stuff-not-road coverage (prose)
    #[arg(long, value_enum, default_value = "formula")]
    pub refine_mode: RefineModeArg,
    /// Inference variant "class,mask,outer" (default softmax,sigmoid,identity)
    #[arg(long)]
    pub variant: Option<String>,
    /// Export per-layer negative-attention maps
    #[arg(long)]
    pub negative_attention: bool,
    /// Also write 8-bit PGM heatmaps next to each tensor
    #[arg(long)]
    pub heatmap: bool,
}

pub fn run(args: Args) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let dataset = read_dataset(&args.data)?;
    if model.config.height != dataset.manifest.height
        || model.config.width != dataset.manifest.width
    {
        return Err(Error::config(format!(
            "checkpoint is {}x{} but dataset is {}x{}",
            model.config.height,
            model.config.width,
            dataset.manifest.height,
            dataset.manifest.width
        )));
    }
    let variant = match &args.variant {
        Some(s) => s.parse::<InferenceVariant>()?,
        None => InferenceVariant::default(),
    };
    let (h, w) = (model.config.height, model.config.width);
    let taxonomy = Taxonomy::synthetic_default();

    std::fs::create_dir_all(&args.out)?;
    let mut tracker = RunTracker::start("infer");
    tracker
        .input(&args.checkpoint)
        .input(&args.data)
        .output(&args.out);

    let write_map = |name: String, map: &Tensor| -> Result<()> {
        mten::write_f32(args.out.join(format!("{}.mten", name)), map)?;
        if args.heatmap {
            pgm::write(args.out.join(format!("{}.pgm", name)), map)?;
        }
        Ok(())
    };

    for (i, scene) in dataset.scenes.iter().enumerate() {
        let out = model.infer(&scene.image)?;
        let scores = score_variant(&out.class_logits, &out.mask_logits, h, w, variant)?;
        write_map(format!("{:04}.score", i), &scores)?;
        if args.refine {
            let r = build_refinement_mask(
                &out.class_logits,
                &out.mask_logits,
                &taxonomy,
                CONFIDENCE_THRESHOLD,
                args.refine_mode.into(),
            )?;
            let refined = refine_scores(&scores, &r)?;
            write_map(format!("{:04}.refined", i), &refined)?;
        }
        if args.negative_attention {
            for (l, layer_logits) in out.per_layer_mask_logits.iter().enumerate() {
                let probs = Tensor::new(
                    layer_logits.shape().to_vec(),
                    layer_logits
                        .data()
                        .iter()
                        .map(|&v| 1.0 / (1.0 + (-v).exp()))
                        .collect(),
                )?;
                let neg = negative_attention_map(&probs)?;
                let map = neg.reshape(vec![h, w])?;
                write_map(format!("{:04}.layer{}.negatt", i, l), &map)?;
            }
        }
    }
    tracker.finish(&args.out)?;
    println!(
        "scored {} scenes into {}",
        dataset.scenes.len(),
        args.out.display()
    );
    Ok(())
}
