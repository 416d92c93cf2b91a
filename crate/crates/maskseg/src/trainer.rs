//! Two-phase training: phase 1 closed-set segmentation, phase 2 contrastive
//! fine-tuning with cut-paste outliers, plus a component/ablation harness.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_batch, semantic_masks, Dataset, SceneSample};
use crate::error::{Error, Result};
use crate::losses::{
    mask_contrastive_loss, neg_likelihood_map, outlier_bce_loss, segmentation_loss,
    total_loss_m2a, ContrastiveForm, LossWeights,
};
use crate::metrics::{self, PixelEvalResult};
use crate::model::{self, AttentionKind, Model, ModelConfig};
use crate::refinement::{build_refinement_mask, refine_scores, RefineMode, Taxonomy};
use crate::scoring::mask_anomaly_score;
use crate::tensor::Tensor;

pub const CONFIDENCE_THRESHOLD: f64 = 0.95;

/// The phase-2 outlier objective: the mask contrastive loss (default), its
/// shifted inlier-branch variant, or a plain outlier binary cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase2Objective {
    Contrastive,
    ContrastiveShifted,
    OutlierBce,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub batch_size: usize,
    pub lr1: f64,
    pub lr2: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub p_outlier: f64,
    pub seed: u64,
    pub attention: AttentionKind,
    pub eval_interval: usize,
    pub objective: Phase2Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_iters: 2000,
            phase2_iters: 400,
            batch_size: 8,
            lr1: 1e-4,
            lr2: 1e-5,
            weight_decay: 0.05,
            margin: 0.75,
            p_outlier: 0.2,
            seed: 0,
            attention: AttentionKind::GMA,
            eval_interval: 100,
            objective: Phase2Objective::Contrastive,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr1 <= 0.0 || self.lr2 <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.phase1_iters < 1 || self.phase2_iters < 1 {
            return Err(Error::config("iteration counts must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_outlier) {
            return Err(Error::config("p_outlier must lie in [0,1]"));
        }
        if self.eval_interval < 1 {
            return Err(Error::config("eval interval must be >= 1"));
        }
        Ok(())
    }
}

/// Metrics logged at one evaluation point. Pixel-level OOD metrics are
/// present only when the evaluation set contains OOD pixels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub auprc: Option<f64>,
    pub fpr95: Option<f64>,
    pub miou: f64,
    /// median OOD score − median inlier score.
    pub score_gap: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub loss_curve: Vec<f64>,
    pub eval_points: Vec<EvalPoint>,
    pub wall_clock_secs: f64,
    pub config: TrainConfig,
    pub diverged: bool,
}

impl RunReport {
    /// `report.json` plus `loss.csv` and `evals.csv` in `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        let mut loss = String::from("step,loss\n");
        for (i, l) in self.loss_curve.iter().enumerate() {
            loss.push_str(&format!("{},{}\n", i, l));
        }
        fs::write(dir.join("loss.csv"), loss)?;
        let mut evals = String::from("step,auprc,fpr95,miou,score_gap\n");
        for e in &self.eval_points {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            evals.push_str(&format!(
                "{},{},{},{},{}\n",
                e.step,
                opt(e.auprc),
                opt(e.fpr95),
                e.miou,
                opt(e.score_gap)
            ));
        }
        fs::write(dir.join("evals.csv"), evals)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Decoupled-weight-decay adaptive-moment optimizer state. Master parameter
/// copies and both moments are kept in f64; the model's f32 parameters are
/// refreshed from the masters after every step, so training is
/// bit-reproducible.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub master: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> Self {
        AdamState {
            step: 0,
            master: params.iter().map(|(_, t)| t.data_f64()).collect(),
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// One optimizer step: m̂/v̂ bias-corrected moments, then
/// p ← p − lr·m̂/(√v̂+ε) − lr·wd·p.
pub fn adamw_step(
    params: &mut [(String, Tensor)],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    hp: &AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || state.master.len() != params.len() {
        return Err(Error::shape("optimizer state/gradient arity mismatch"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, (_, tensor)) in params.iter_mut().enumerate() {
        if grads[i].len() != tensor.numel() {
            return Err(Error::shape(format!(
                "gradient {} has {} entries, parameter has {}",
                i,
                grads[i].len(),
                tensor.numel()
            )));
        }
        let master = &mut state.master[i];
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..master.len() {
            let g = grads[i][j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            master[j] -=
                hp.lr * m_hat / (v_hat.sqrt() + hp.eps) + hp.lr * hp.weight_decay * master[j];
        }
        for (dst, &src) in tensor.data_mut().iter_mut().zip(master.iter()) {
            *dst = src as f32;
        }
    }
    Ok(())
}

/// Forward one scene, return the phase-1 loss node (optionally with the
/// phase-2 contrastive/outlier term added) scaled by `scale`.
fn scene_loss(
    model: &Model,
    scene: &SceneSample,
    weights: &LossWeights,
    objective: Option<Phase2Objective>,
    scale: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut t = crate::tape::Tape::new();
    let fp = model.forward(&mut t, &scene.image)?;
    let (gt_masks, gt_classes) = semantic_masks(&scene.labels, model.config.num_classes);
    let has_ood = scene.ood_mask.data().iter().any(|&v| v > 0.0);
    // OOD pixels are excluded from the closed-set mask/class targets.
    let pixel_weights = if has_ood {
        Some(Tensor::new(
            vec![scene.ood_mask.numel()],
            scene.ood_mask.data().iter().map(|&v| 1.0 - v).collect(),
        )?)
    } else {
        None
    };
    let l = segmentation_loss(
        &mut t,
        fp.class_logits,
        fp.mask_logits,
        &gt_masks,
        &gt_classes,
        weights,
        pixel_weights.as_ref(),
    )?;
    let total = match objective {
        None => l,
        Some(obj) => {
            let l_n = neg_likelihood_map(&mut t, fp.class_logits, fp.mask_logits)?;
            let ood_flat = scene.ood_mask.clone().reshape(vec![scene.ood_mask.numel()])?;
            let l_cl = match obj {
                Phase2Objective::Contrastive => mask_contrastive_loss(
                    &mut t,
                    l_n,
                    &ood_flat,
                    weights.margin,
                    ContrastiveForm::Printed,
                )?,
                Phase2Objective::ContrastiveShifted => mask_contrastive_loss(
                    &mut t,
                    l_n,
                    &ood_flat,
                    weights.margin,
                    ContrastiveForm::Shifted,
                )?,
                Phase2Objective::OutlierBce => outlier_bce_loss(&mut t, l_n, &ood_flat)?,
            };
            total_loss_m2a(&mut t, l, l_cl)?
        }
    };
    let scaled = t.scale(total, scale);
    let loss_val = t.value_f64(scaled)[0];
    let grads = t.backward(scaled)?;
    Ok((
        loss_val,
        fp.param_ids.iter().map(|&id| grads.wrt_f64(id)).collect(),
    ))
}

fn accumulate(into: &mut [Vec<f64>], grads: &[Vec<f64>]) {
    for (acc, g) in into.iter_mut().zip(grads) {
        for (a, &x) in acc.iter_mut().zip(g) {
            *a += x;
        }
    }
}

/// Pixel scores and void-masked labels for one scene; anomaly pixels are
/// void (−1) for the closed-set labels.
fn eval_scene(
    model: &Model,
    scene: &SceneSample,
    refine: Option<RefineMode>,
) -> Result<(Tensor, Vec<i32>)> {
    let out = model.infer(&scene.image)?;
    let (h, w) = (model.config.height, model.config.width);
    let mut scores = mask_anomaly_score(&out.class_logits, &out.mask_logits, h, w)?;
    if let Some(mode) = refine {
        let taxonomy = Taxonomy::synthetic_default();
        let r = build_refinement_mask(
            &out.class_logits,
            &out.mask_logits,
            &taxonomy,
            CONFIDENCE_THRESHOLD,
            mode,
        )?;
        scores = refine_scores(&scores, &r)?;
    }
    let pred = crate::scoring::semantic_argmax(&out.class_logits, &out.mask_logits)?;
    Ok((scores, pred))
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub pixel: Option<PixelEvalResult>,
    pub miou: f64,
    pub score_gap: Option<f64>,
}

/// Evaluate a model over a dataset: global pixel-level OOD metrics (when
/// the set contains OOD pixels), closed-set mIoU with OOD pixels voided,
/// and the median OOD-vs-inlier score gap.
pub fn evaluate(model: &Model, dataset: &Dataset, refine: Option<RefineMode>) -> Result<EvalSummary> {
    let mut all_scores = Vec::new();
    let mut all_ood = Vec::new();
    let mut all_pred = Vec::new();
    let mut all_gt = Vec::new();
    for scene in &dataset.scenes {
        let (scores, pred) = eval_scene(model, scene, refine)?;
        all_scores.extend_from_slice(scores.data());
        all_ood.extend_from_slice(scene.ood_mask.data());
        all_pred.extend_from_slice(&pred);
        all_gt.extend(
            scene
                .labels
                .iter()
                .zip(scene.ood_mask.data())
                .map(|(&l, &o)| if o > 0.5 { -1 } else { l }),
        );
    }
    let miou = metrics::miou(&all_pred, &all_gt, model.config.num_classes)?;
    let has_ood = all_ood.iter().any(|&v| v > 0.0);
    let (pixel, score_gap) = if has_ood {
        let s = Tensor::new(vec![all_scores.len()], all_scores.clone())?;
        let g = Tensor::new(vec![all_ood.len()], all_ood.clone())?;
        let mut id: Vec<f32> = Vec::new();
        let mut ood: Vec<f32> = Vec::new();
        for (&sc, &o) in all_scores.iter().zip(&all_ood) {
            if o > 0.5 {
                ood.push(sc);
            } else {
                id.push(sc);
            }
        }
        let gap = median(&mut ood) - median(&mut id);
        (Some(metrics::pixel_eval(&s, &g)?), Some(gap))
    } else {
        (None, None)
    };
    Ok(EvalSummary {
        pixel,
        miou,
        score_gap,
    })
}

fn median(v: &mut [f32]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
    }
}

fn eval_point(
    step: usize,
    model: &Model,
    train: &Dataset,
    eval_set: Option<&Dataset>,
) -> Result<EvalPoint> {
    let summary = evaluate(model, eval_set.unwrap_or(train), None)?;
    Ok(EvalPoint {
        step,
        auprc: summary.pixel.as_ref().map(|p| p.auprc),
        fpr95: summary.pixel.as_ref().map(|p| p.fpr95),
        miou: summary.miou,
        score_gap: summary.score_gap,
    })
}

fn run_phase(
    model: &mut Model,
    train: &Dataset,
    outlier_pool: &[(Tensor, Tensor)],
    config: &TrainConfig,
    eval_set: Option<&Dataset>,
    out_dir: Option<&Path>,
    phase2: bool,
) -> Result<RunReport> {
    config.validate()?;
    if train.scenes.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let start = Instant::now();
    let weights = LossWeights {
        margin: config.margin,
        ..LossWeights::default()
    };
    let (iters, lr, seed_salt) = if phase2 {
        (config.phase2_iters, config.lr2, 0x0002u64)
    } else {
        (config.phase1_iters, config.lr1, 0x0001u64)
    };
    let hp = AdamHyper::new(lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (seed_salt << 32));
    let mut state = AdamState::new(&model.params);
    if let Some(dir) = out_dir {
        model::save_checkpoint(dir.join("initial"), model, None)?;
    }
    let mut loss_curve = Vec::with_capacity(iters);
    let mut eval_points = Vec::new();
    let mut diverged = false;
    eval_points.push(eval_point(0, model, train, eval_set)?);
    for it in 0..iters {
        let batch: Vec<SceneSample> = if phase2 {
            sample_batch(
                &train.scenes,
                outlier_pool,
                config.p_outlier,
                config.batch_size,
                &mut rng,
            )?
        } else {
            (0..config.batch_size)
                .map(|_| train.scenes[rng.gen_range(0..train.scenes.len())].clone())
                .collect()
        };
        let scale = 1.0 / batch.len() as f64;
        let objective = if phase2 { Some(config.objective) } else { None };
        let mut total = 0.0f64;
        let mut acc: Vec<Vec<f64>> = model
            .params
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        for scene in &batch {
            match scene_loss(model, scene, &weights, objective, scale) {
                Ok((l, g)) => {
                    total += l;
                    accumulate(&mut acc, &g);
                }
                // Non-finite intermediates (e.g. an overflowed matching
                // cost) are divergence, not a caller error.
                Err(Error::Numeric(_)) | Err(Error::Graph(_)) => {
                    total = f64::NAN;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        loss_curve.push(total);
        if !total.is_finite() {
            diverged = true;
            break;
        }
        adamw_step(&mut model.params, &acc, &mut state, &hp)?;
        if (it + 1) % config.eval_interval == 0 || it + 1 == iters {
            eval_points.push(eval_point(it + 1, model, train, eval_set)?);
        }
    }
    if let Some(dir) = out_dir {
        let parent = if phase2 {
            Some(dir.join("initial").to_string_lossy().to_string())
        } else {
            None
        };
        model::save_checkpoint(dir.join("final"), model, parent.as_deref())?;
    }
    let report = RunReport {
        loss_curve,
        eval_points,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: config.clone(),
        diverged,
    };
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// Phase 1: closed-set segmentation on inlier scenes.
pub fn train_phase1(
    model: &mut Model,
    train: &Dataset,
    config: &TrainConfig,
    eval_set: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    run_phase(model, train, &[], config, eval_set, out_dir, false)
}

/// Phase 2: fine-tuning on outlier-mixed batches with the contrastive (or
/// outlier-BCE) term added to the closed-set loss.
pub fn finetune_contrastive(
    model: &mut Model,
    train: &Dataset,
    outlier_pool: &[(Tensor, Tensor)],
    config: &TrainConfig,
    eval_set: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    if config.p_outlier > 0.0 && outlier_pool.is_empty() {
        return Err(Error::data("phase 2 with p_outlier > 0 needs an outlier pool"));
    }
    run_phase(model, train, outlier_pool, config, eval_set, out_dir, true)
}

/// One ablation-grid cell: attention kind × contrastive fine-tuning on/off
/// × refinement mode (off / formula / prose) × margin × outlier
/// probability.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AblationCell {
    pub attention: AttentionKind,
    pub use_cl: bool,
    pub refine: Option<RefineMode>,
    pub margin: f64,
    pub p_outlier: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub auprc: f64,
    pub fpr95: f64,
    pub miou: f64,
}

/// Train and evaluate every grid cell with a shared seed. `use_cl = false`
/// skips phase 2; `refine` applies that refinement mode at evaluation.
pub fn ablation_run(
    train: &Dataset,
    test: &Dataset,
    outlier_pool: &[(Tensor, Tensor)],
    model_config: &ModelConfig,
    base: &TrainConfig,
    grid: &[AblationCell],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for cell in grid {
        let mut mc = model_config.clone();
        mc.attention = cell.attention;
        let mut tc = base.clone();
        tc.attention = cell.attention;
        tc.margin = cell.margin;
        tc.p_outlier = cell.p_outlier;
        let mut model = model::init_model(mc)?;
        train_phase1(&mut model, train, &tc, None, None)?;
        if cell.use_cl {
            finetune_contrastive(&mut model, train, outlier_pool, &tc, None, None)?;
        }
        let summary = evaluate(&model, test, cell.refine)?;
        let pixel = summary
            .pixel
            .ok_or_else(|| Error::data("ablation test set has no OOD pixels"))?;
        rows.push(AblationRow {
            cell: *cell,
            auprc: pixel.auprc,
            fpr95: pixel.fpr95,
            miou: summary.miou,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("attention,cl,rm,margin,p_outlier,auprc,fpr95,miou\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.cell.attention,
            r.cell.use_cl,
            r.cell
                .refine
                .map_or_else(|| "off".to_string(), |m| m.to_string()),
            r.cell.margin,
            r.cell.p_outlier,
            r.auprc,
            r.fpr95,
            r.miou
        ));
    }
    out
}
