use std::path::PathBuf;

use clap::Parser;
use maskseg::datagen::read_dataset;
use maskseg::metrics::{connected_components, default_tau_grid, f1_star, pixel_eval};
use maskseg::{mten, Error, Result, Tensor};
use serde::Serialize;

use crate::manifest::RunTracker;

#[derive(Clone, Debug, clap::ValueEnum)]
pub enum Mode {
    Pixel,
    Component,
}

#[derive(Parser, Debug)]
pub struct Args {
    /// Directory of NNNN.<suffix>.mten score maps (from `infer`)
    #[arg(long)]
    pub scores: PathBuf,
    /// Dataset directory the scores belong to
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation mode
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Output directory for metrics files
    #[arg(long)]
    pub out: PathBuf,
    /// Score-map file suffix: "score" or "refined"
    #[arg(long, default_value = "score")]
    pub suffix: String,
    /// Binarization threshold for component mode
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Component connectivity: 4 or 8
    #[arg(long, default_value_t = 8)]
    pub connectivity: u8,
}

#[derive(Serialize)]
struct PixelReport {
    per_image: Vec<PixelRow>,
    aggregate_auprc: f64,
    aggregate_fpr95: f64,
}

#[derive(Serialize)]
struct PixelRow {
    index: usize,
    auprc: Option<f64>,
    fpr95: Option<f64>,
}

#[derive(Serialize)]
struct ComponentReport {
    per_image: Vec<ComponentRow>,
    mean_siou: f64,
    mean_ppv: f64,
    f1_star_avg: f64,
}

#[derive(Serialize)]
struct ComponentRow {
    index: usize,
    mean_siou: f64,
    mean_ppv: f64,
    f1_star_avg: f64,
}

fn load_scores(args: &Args, index: usize, numel: usize) -> Result<Tensor> {
    let path = args
        .scores
        .join(format!("{:04}.{}.mten", index, args.suffix));
    let t = mten::read_f32(&path)
        .map_err(|e| Error::data(format!("score map '{}': {}", path.display(), e)))?;
    if t.numel() != numel {
        return Err(Error::shape(format!(
            "score map '{}' has {} entries, dataset image has {}",
            path.display(),
            t.numel(),
            numel
        )));
    }
    Ok(t)
}

pub fn run(args: Args) -> Result<()> {
    let dataset = read_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    let mut tracker = RunTracker::start("eval");
    tracker
        .input(&args.scores)
        .input(&args.data)
        .output(&args.out);

    match args.mode {
        Mode::Pixel => {
            let mut rows = Vec::new();
            let mut all_scores = Vec::new();
            let mut all_gt = Vec::new();
            for (i, scene) in dataset.scenes.iter().enumerate() {
                let scores = load_scores(&args, i, scene.ood_mask.numel())?;
                all_scores.extend_from_slice(scores.data());
                all_gt.extend_from_slice(scene.ood_mask.data());
                // per-image metrics need both classes present
                let pos = scene.ood_mask.data().iter().filter(|&&v| v > 0.5).count();
                let row = if pos > 0 && pos < scene.ood_mask.numel() {
                    let r = pixel_eval(&scores, &scene.ood_mask)?;
                    PixelRow {
                        index: i,
                        auprc: Some(r.auprc),
                        fpr95: Some(r.fpr95),
                    }
                } else {
                    PixelRow {
                        index: i,
                        auprc: None,
                        fpr95: None,
                    }
                };
                rows.push(row);
            }
            let s = Tensor::new(vec![all_scores.len()], all_scores)?;
            let g = Tensor::new(vec![all_gt.len()], all_gt)?;
            let agg = pixel_eval(&s, &g)?;
            let report = PixelReport {
                per_image: rows,
                aggregate_auprc: agg.auprc,
                aggregate_fpr95: agg.fpr95,
            };
            std::fs::write(
                args.out.join("pixel_metrics.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            let mut csv = String::from("index,auprc,fpr95\n");
            for r in &report.per_image {
                let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                csv.push_str(&format!("{},{},{}\n", r.index, opt(r.auprc), opt(r.fpr95)));
            }
            csv.push_str(&format!(
                "aggregate,{},{}\n",
                report.aggregate_auprc, report.aggregate_fpr95
            ));
            std::fs::write(args.out.join("pixel_metrics.csv"), csv)?;
            println!(
                "pixel: aggregate AuPRC {:.4}, FPR95 {:.4}",
                report.aggregate_auprc, report.aggregate_fpr95
            );
        }
        Mode::Component => {
            let taus = default_tau_grid();
            let mut rows = Vec::new();
            for (i, scene) in dataset.scenes.iter().enumerate() {
                let scores = load_scores(&args, i, scene.ood_mask.numel())?;
                let (h, w) = (scene.ood_mask.shape()[0], scene.ood_mask.shape()[1]);
                let binary = Tensor::new(
                    vec![h, w],
                    scores
                        .data()
                        .iter()
                        .map(|&v| if v as f64 > args.threshold { 1.0 } else { 0.0 })
                        .collect(),
                )?;
                let gt = connected_components(&scene.ood_mask, args.connectivity)?;
                let pred = connected_components(&binary, args.connectivity)?;
                let r = f1_star(&gt, &pred, &scene.ood_mask, &taus)?;
                rows.push(ComponentRow {
                    index: i,
                    mean_siou: r.mean_siou,
                    mean_ppv: r.mean_ppv,
                    f1_star_avg: r.f1_star_avg,
                });
            }
            let n = rows.len().max(1) as f64;
            let report = ComponentReport {
                mean_siou: rows.iter().map(|r| r.mean_siou).sum::<f64>() / n,
                mean_ppv: rows.iter().map(|r| r.mean_ppv).sum::<f64>() / n,
                f1_star_avg: rows.iter().map(|r| r.f1_star_avg).sum::<f64>() / n,
                per_image: rows,
            };
            std::fs::write(
                args.out.join("component_metrics.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            let mut csv = String::from("index,mean_siou,mean_ppv,f1_star_avg\n");
            for r in &report.per_image {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    r.index, r.mean_siou, r.mean_ppv, r.f1_star_avg
                ));
            }
            csv.push_str(&format!(
                "aggregate,{},{},{}\n",
                report.mean_siou, report.mean_ppv, report.f1_star_avg
            ));
            std::fs::write(args.out.join("component_metrics.csv"), csv)?;
            println!(
                "component: mean sIoU {:.4}, mean PPV {:.4}, F1* {:.4}",
                report.mean_siou, report.mean_ppv, report.f1_star_avg
            );
        }
    }
    tracker.finish(&args.out)?;
    Ok(())
}
