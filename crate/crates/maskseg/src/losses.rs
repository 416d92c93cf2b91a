//! Training objectives: mask BCE and dice, class cross-entropy with
//! no-object down-weighting, Hungarian set matching, the per-pixel negative
//! inlier likelihood, the mask contrastive loss, and the outlier BCE
//! comparison loss.

use crate::error::{Error, Result};
use crate::matching::{hungarian_match, MatchResult};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Loss weights and the contrastive margin.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub lambda_ce_matched: f64,
    pub lambda_ce_phi: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_bce: 5.0,
            lambda_dice: 5.0,
            lambda_ce_matched: 2.0,
            lambda_ce_phi: 0.1,
            margin: 0.75,
        }
    }
}

/// Which inlier branch the contrastive loss uses. `Printed` is the default
/// piecewise form; `Shifted` replaces the inlier term l_N by (1 + l_N) so
/// that an ideal inlier (l_N = -1) has zero loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastiveForm {
    Printed,
    Shifted,
}

/// Mean binary cross-entropy from logits against binary targets.
pub fn bce_loss(t: &mut Tape, logits: TensorId, targets: &Tensor) -> Result<TensorId> {
    t.bce_with_logits(logits, targets, None)
}

/// Soft dice loss: 1 - (2 Σ p t + ε) / (Σ p + Σ t + ε).
pub fn dice_loss(t: &mut Tape, probs: TensorId, targets: &Tensor, eps: f64) -> Result<TensorId> {
    dice_loss_weighted(t, probs, targets, None, eps)
}

pub fn dice_loss_weighted(
    t: &mut Tape,
    probs: TensorId,
    targets: &Tensor,
    weights: Option<&Tensor>,
    eps: f64,
) -> Result<TensorId> {
    let (p, sum_t) = match weights {
        Some(w) => {
            let pw = t.mul_const(probs, w)?;
            let st: f64 = targets
                .data_f64()
                .iter()
                .zip(w.data_f64())
                .map(|(a, b)| a * b)
                .sum();
            // targets are also masked so the intersection term is weighted once
            let tw: Vec<f32> = targets
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .collect();
            let tw = Tensor::new(targets.shape().to_vec(), tw)?;
            (t.mul_const(pw, &tw).map(|pt| (pw, pt))?, st)
        }
        None => {
            let pt = t.mul_const(probs, targets)?;
            ((probs, pt), targets.data_f64().iter().sum())
        }
    };
    let ((p_eff, pt), sum_t) = (p, sum_t);
    let spt = t.sum_all(pt);
    let spt2 = t.scale(spt, 2.0);
    let num = t.add_scalar(spt2, eps);
    let sp = t.sum_all(p_eff);
    let den = t.add_scalar(sp, sum_t + eps);
    let frac = t.div(num, den)?;
    let neg = t.scale(frac, -1.0);
    Ok(t.add_scalar(neg, 1.0))
}

/// Weighted cross-entropy over N queries: -log softmax at the target class,
/// weight λ_ce_matched for real classes and λ_ce_phi for the no-object
/// column, averaged over queries.
pub fn ce_loss(
    t: &mut Tape,
    class_logits: TensorId,
    target_classes: &[usize],
    w: &LossWeights,
) -> Result<TensorId> {
    let shape = t.shape(class_logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("class logits must be N×(K+1)"));
    }
    let (n, kp1) = (shape[0], shape[1]);
    if target_classes.len() != n {
        return Err(Error::shape("one target per query required"));
    }
    let phi = kp1 - 1;
    let mut sel = vec![0.0f64; n * kp1];
    for (i, &c) in target_classes.iter().enumerate() {
        if c >= kp1 {
            return Err(Error::data(format!("class target {} out of range", c)));
        }
        let weight = if c == phi {
            w.lambda_ce_phi
        } else {
            w.lambda_ce_matched
        };
        sel[i * kp1 + c] = -(weight / n as f64);
    }
    let logp = t.log_softmax_rows(class_logits)?;
    let sel_id = t.leaf_f64(vec![n, kp1], sel);
    let picked = t.mul(logp, sel_id)?;
    Ok(t.sum_all(picked))
}

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Matching cost between one predicted mask (logits) and one ground-truth
/// mask: λ_bce·BCE + λ_dice·dice, evaluated directly in f64.
pub fn match_cost(pred_logits: &Tensor, gt: &Tensor) -> f64 {
    match_cost_weighted(pred_logits, gt, None)
}

pub fn match_cost_weighted(pred_logits: &Tensor, gt: &Tensor, weights: Option<&Tensor>) -> f64 {
    let w = LossWeights::default();
    let eps = 1.0;
    let p64 = pred_logits.data_f64();
    let t64 = gt.data_f64();
    let w64: Vec<f64> = match weights {
        Some(w) => w.data_f64(),
        None => vec![1.0; p64.len()],
    };
    let wsum: f64 = w64.iter().sum::<f64>().max(1e-12);
    let mut bce = 0.0;
    let (mut spt, mut sp, mut st) = (0.0, 0.0, 0.0);
    for i in 0..p64.len() {
        let x = p64[i];
        let tv = t64[i];
        bce += w64[i] * (x.max(0.0) - x * tv + (-(x.abs())).exp().ln_1p());
        let s = sigmoid64(x) * w64[i];
        spt += s * tv;
        sp += s;
        st += tv * w64[i];
    }
    bce /= wsum;
    let dice = 1.0 - (2.0 * spt + eps) / (sp + st + eps);
    w.lambda_bce * bce + w.lambda_dice * dice
}

/// Extract row `i` of a 2-d node as a 1×C node.
fn slice_row(t: &mut Tape, m: TensorId, row: usize) -> Result<TensorId> {
    let tr = t.transpose(m)?;
    let col = t.slice_cols(tr, row, row + 1)?;
    t.transpose(col)
}

/// Set-prediction segmentation loss: Hungarian matching on the mask cost,
/// then matched mask losses plus weighted cross-entropy; unmatched queries
/// are supervised toward the no-object class. Optional per-pixel weights
/// exclude regions (e.g. pasted outliers) from the mask targets.
pub fn segmentation_loss(
    t: &mut Tape,
    class_logits: TensorId,
    mask_logits: TensorId,
    gt_masks: &[Tensor],
    gt_classes: &[usize],
    w: &LossWeights,
    pixel_weights: Option<&Tensor>,
) -> Result<TensorId> {
    let n = t.shape(class_logits)[0];
    let kp1 = t.shape(class_logits)[1];
    let p = t.shape(mask_logits)[1];
    let g = gt_masks.len();
    if g != gt_classes.len() {
        return Err(Error::data("gt masks and classes must align"));
    }
    if g > n {
        return Err(Error::data(format!(
            "{} ground-truth masks exceed {} queries",
            g, n
        )));
    }

    let (assignment, _) = match_gt_to_queries(t, mask_logits, gt_masks, pixel_weights)?;

    let flat_w: Option<Tensor> = match pixel_weights {
        Some(pw) => Some(pw.clone().reshape(vec![1, p])?),
        None => None,
    };

    // Mask losses over matched real pairs, averaged over ground-truth
    // masks. Pairs are accumulated in query order so the floating-point
    // sum is invariant under permutations of the ground-truth list.
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by_key(|&i| assignment[i]);
    let mut mask_term: Option<TensorId> = None;
    for &i in &order {
        let gt = &gt_masks[i];
        let q = assignment[i];
        let row = slice_row(t, mask_logits, q)?;
        let target = gt.clone().reshape(vec![1, p])?;
        let bce = t.bce_with_logits(row, &target, flat_w.as_ref())?;
        let probs = t.sigmoid(row);
        let dice = dice_loss_weighted(t, probs, &target, flat_w.as_ref(), 1.0)?;
        let bce_w = t.scale(bce, w.lambda_bce);
        let dice_w = t.scale(dice, w.lambda_dice);
        let pair = t.add(bce_w, dice_w)?;
        mask_term = Some(match mask_term {
            Some(acc) => t.add(acc, pair)?,
            None => pair,
        });
    }
    let mask_term = match mask_term {
        Some(acc) => t.scale(acc, 1.0 / g as f64),
        None => {
            let zero = t.leaf(&Tensor::zeros(&[1]));
            zero
        }
    };

    // Class targets: matched queries get the real class, the rest φ.
    let mut targets = vec![kp1 - 1; n];
    for (i, &c) in gt_classes.iter().enumerate() {
        if c >= kp1 - 1 {
            return Err(Error::data(format!("gt class {} out of range", c)));
        }
        targets[assignment[i]] = c;
    }
    let ce = ce_loss(t, class_logits, &targets, w)?;
    t.add(mask_term, ce)
}

/// Hungarian assignment of ground-truth slots (padded with φ) to queries.
/// Returns `assignment[i] = query for gt i` for the real slots only.
pub fn match_gt_to_queries(
    t: &Tape,
    mask_logits: TensorId,
    gt_masks: &[Tensor],
    pixel_weights: Option<&Tensor>,
) -> Result<(Vec<usize>, MatchResult)> {
    let n = t.shape(mask_logits)[0];
    let p = t.shape(mask_logits)[1];
    let g = gt_masks.len();
    let mask_vals = t.value(mask_logits);
    let mut cost = Tensor::zeros(&[n, n]);
    for i in 0..g {
        if gt_masks[i].numel() != p {
            return Err(Error::shape("gt mask size mismatch"));
        }
        for q in 0..n {
            let row = Tensor::new(
                vec![p],
                mask_vals.data()[q * p..(q + 1) * p].to_vec(),
            )?;
            let gt_flat = gt_masks[i].clone().reshape(vec![p])?;
            let wt = match pixel_weights {
                Some(pw) => Some(pw.clone().reshape(vec![p])?),
                None => None,
            };
            cost.set2(i, q, match_cost_weighted(&row, &gt_flat, wt.as_ref()) as f32);
        }
    }
    let result = hungarian_match(&cost)?;
    Ok((result.assignment[..g].to_vec(), result))
}

/// Per-pixel negative likelihood of in-distribution classes:
/// l_N = -clamp(max_k softmax(C)ᵀ·sigmoid(M), 0, 1), in [-1, 0].
pub fn neg_likelihood_map(
    t: &mut Tape,
    class_logits: TensorId,
    mask_logits: TensorId,
) -> Result<TensorId> {
    let kp1 = t.shape(class_logits)[1];
    let probs = t.softmax_rows(class_logits)?;
    let inlier = t.slice_cols(probs, 0, kp1 - 1)?; // drop the φ column
    let masks = t.sigmoid(mask_logits);
    let marginal = t.matmul_tn(inlier, masks)?; // K×P
    let best = t.max_axis0(marginal)?;
    let clamped = t.clamp(best, 0.0, 1.0);
    Ok(t.scale(clamped, -1.0))
}

/// Mask contrastive loss: l_CL = l_N on inlier pixels, max(0, m - l_N) on
/// outlier pixels; loss = mean(½ l_CL²).
pub fn mask_contrastive_loss(
    t: &mut Tape,
    l_n: TensorId,
    ood_mask: &Tensor,
    margin: f64,
    form: ContrastiveForm,
) -> Result<TensorId> {
    let shape = t.shape(l_n).to_vec();
    if ood_mask.numel() != shape.iter().product::<usize>() {
        return Err(Error::shape("OOD mask size mismatch"));
    }
    let ood = ood_mask.clone().reshape(shape.clone())?;
    let inlier_sel = Tensor::new(
        shape.clone(),
        ood.data().iter().map(|&v| 1.0 - v).collect(),
    )?;
    let inlier_val = match form {
        ContrastiveForm::Printed => l_n,
        ContrastiveForm::Shifted => t.add_scalar(l_n, 1.0),
    };
    let inlier_term = t.mul_const(inlier_val, &inlier_sel)?;
    let neg = t.scale(l_n, -1.0);
    let hinge_arg = t.add_scalar(neg, margin);
    let hinge = t.relu(hinge_arg);
    let ood_term = t.mul_const(hinge, &ood)?;
    let l_cl = t.add(inlier_term, ood_term)?;
    let sq = t.mul(l_cl, l_cl)?;
    let mean = t.mean_all(sq);
    Ok(t.scale(mean, 0.5))
}

/// Binary cross-entropy outlier loss over the anomaly probability
/// p = clamp(1 + l_N, 1e-6, 1 - 1e-6).
pub fn outlier_bce_loss(t: &mut Tape, l_n: TensorId, ood_mask: &Tensor) -> Result<TensorId> {
    let shape = t.shape(l_n).to_vec();
    if ood_mask.numel() != shape.iter().product::<usize>() {
        return Err(Error::shape("OOD mask size mismatch"));
    }
    let ood = ood_mask.clone().reshape(shape.clone())?;
    let inlier_sel = Tensor::new(
        shape.clone(),
        ood.data().iter().map(|&v| 1.0 - v).collect(),
    )?;
    let shifted = t.add_scalar(l_n, 1.0);
    let p = t.clamp(shifted, 1e-6, 1.0 - 1e-6);
    let logp = t.ln(p);
    let negp = t.scale(p, -1.0);
    let one_minus = t.add_scalar(negp, 1.0);
    let log1m = t.ln(one_minus);
    let pos = t.mul_const(logp, &ood)?;
    let neg = t.mul_const(log1m, &inlier_sel)?;
    let sum = t.add(pos, neg)?;
    let mean = t.mean_all(sum);
    Ok(t.scale(mean, -1.0))
}

/// L_M2A = L + L_CL.
pub fn total_loss_m2a(t: &mut Tape, l: TensorId, l_cl: TensorId) -> Result<TensorId> {
    t.add(l, l_cl)
}
