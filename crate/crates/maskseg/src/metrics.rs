//! Evaluation metrics: pixel-level precision-recall (AuPRC, FPR at 95%
//! TPR), connected components, component-level sIoU / PPV / averaged F1*,
//! and in-distribution mIoU.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One point of the precision-recall curve at threshold γ, for the
/// prediction {score ≥ γ}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct PixelEvalResult {
    pub auprc: f64,
    pub fpr95: f64,
    pub pr_points: Vec<PrPoint>,
}

/// Connected regions of a binary map; label 0 is background, component ids
/// are contiguous 1..count in raster order of first appearance.
#[derive(Debug, Clone)]
pub struct ComponentSet {
    pub labels: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    /// Pixel indices (row-major) per component, index 0 = component id 1.
    pub pixels: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct ComponentEvalResult {
    pub mean_siou: f64,
    pub mean_ppv: f64,
    pub f1_star_avg: f64,
    pub per_tau: Vec<(f64, f64)>,
}

fn check_binary_pair(scores: &Tensor, gt: &Tensor) -> Result<(Vec<f32>, Vec<bool>)> {
    if scores.numel() != gt.numel() {
        return Err(Error::shape(format!(
            "scores {:?} vs gt {:?}",
            scores.shape(),
            gt.shape()
        )));
    }
    if !scores.all_finite() {
        return Err(Error::numeric("non-finite score"));
    }
    let gtb: Vec<bool> = gt.data().iter().map(|&v| v > 0.5).collect();
    let pos = gtb.iter().filter(|&&b| b).count();
    if pos == 0 || pos == gtb.len() {
        return Err(Error::data(
            "ground truth must contain both positives and negatives",
        ));
    }
    Ok((scores.data().to_vec(), gtb))
}

/// Precision-recall curve: one point per distinct score value, descending.
pub fn pr_curve(scores: &Tensor, gt: &Tensor) -> Result<Vec<PrPoint>> {
    let (s, g) = check_binary_pair(scores, gt)?;
    let total_pos = g.iter().filter(|&&b| b).count() as f64;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).expect("finite scores"));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let gamma = s[order[i]];
        // consume the whole tie group at this threshold
        while i < order.len() && s[order[i]] == gamma {
            if g[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / total_pos,
            threshold: gamma as f64,
        });
    }
    Ok(points)
}

/// Average precision Σ_n (R_n − R_{n−1}) P_n over the descending curve.
pub fn auprc(scores: &Tensor, gt: &Tensor) -> Result<f64> {
    let points = pr_curve(scores, gt)?;
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for p in &points {
        area += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    Ok(area)
}

/// False-positive rate at the largest threshold γ* with TPR ≥ 0.95; no
/// interpolation.
pub fn fpr_at_95tpr(scores: &Tensor, gt: &Tensor) -> Result<f64> {
    let (s, g) = check_binary_pair(scores, gt)?;
    let total_pos = g.iter().filter(|&&b| b).count() as f64;
    let total_neg = g.len() as f64 - total_pos;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).expect("finite scores"));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let gamma = s[order[i]];
        while i < order.len() && s[order[i]] == gamma {
            if g[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp as f64 / total_pos >= 0.95 {
            return Ok(fp as f64 / total_neg);
        }
    }
    // TPR ≥ 0.95 is always reached at the lowest threshold (TPR = 1).
    Ok(1.0)
}

pub fn pixel_eval(scores: &Tensor, gt: &Tensor) -> Result<PixelEvalResult> {
    Ok(PixelEvalResult {
        auprc: auprc(scores, gt)?,
        fpr95: fpr_at_95tpr(scores, gt)?,
        pr_points: pr_curve(scores, gt)?,
    })
}

/// Maximal connected regions of a binary H×W map under 4- or
/// 8-connectivity, labeled in raster order of first appearance.
pub fn connected_components(binary: &Tensor, connectivity: u8) -> Result<ComponentSet> {
    let shape = binary.shape();
    if shape.len() != 2 {
        return Err(Error::shape("component input must be H×W"));
    }
    if connectivity != 4 && connectivity != 8 {
        return Err(Error::config("connectivity must be 4 or 8"));
    }
    let (h, w) = (shape[0], shape[1]);
    let fg: Vec<bool> = binary.data().iter().map(|&v| v > 0.5).collect();
    let mut labels = vec![0u32; h * w];
    let mut pixels: Vec<Vec<usize>> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        let id = pixels.len() as u32 + 1;
        let mut comp = Vec::new();
        labels[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    if connectivity == 4 && dy != 0 && dx != 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if fg[q] && labels[q] == 0 {
                        labels[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        pixels.push(comp);
    }
    Ok(ComponentSet {
        labels,
        height: h,
        width: w,
        count: pixels.len(),
        pixels,
    })
}

/// Adjusted IoU of ground-truth component `k_idx` against the union K̂(k)
/// of predicted components intersecting it:
/// |k ∩ K̂(k)| / |(k ∪ K̂(k)) \ A(k)| with A(k) = pixels of K̂(k)\k that lie
/// inside a different ground-truth component.
pub fn siou(gt: &ComponentSet, k_idx: usize, pred: &ComponentSet) -> Result<f64> {
    let k = gt
        .pixels
        .get(k_idx)
        .ok_or_else(|| Error::data("ground-truth component index out of range"))?;
    if k.is_empty() {
        return Err(Error::data("empty ground-truth component"));
    }
    let k_id = k_idx as u32 + 1;
    let in_k = |p: usize| gt.labels[p] == k_id;
    // K̂(k): union of predicted components that intersect k.
    let mut khat = vec![false; gt.labels.len()];
    for comp in &pred.pixels {
        if comp.iter().any(|&p| in_k(p)) {
            for &p in comp {
                khat[p] = true;
            }
        }
    }
    let mut inter = 0usize;
    let mut denom = 0usize;
    for p in 0..gt.labels.len() {
        let ink = in_k(p);
        if ink && khat[p] {
            inter += 1;
        }
        if ink || khat[p] {
            // exclude A(k): K̂(k) pixels inside another gt component
            let adjustment = !ink && khat[p] && gt.labels[p] != 0;
            if !adjustment {
                denom += 1;
            }
        }
    }
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / denom as f64)
}

/// Positive predictive value of predicted component `k_idx` against the
/// full ground-truth anomaly mask.
pub fn ppv(pred: &ComponentSet, k_idx: usize, gt_mask: &Tensor) -> Result<f64> {
    let comp = pred
        .pixels
        .get(k_idx)
        .ok_or_else(|| Error::data("predicted component index out of range"))?;
    if comp.is_empty() {
        return Err(Error::data("empty predicted component"));
    }
    if gt_mask.numel() != pred.labels.len() {
        return Err(Error::shape("gt mask size mismatch"));
    }
    let hits = comp
        .iter()
        .filter(|&&p| gt_mask.data()[p] > 0.5)
        .count();
    Ok(hits as f64 / comp.len() as f64)
}

/// The τ grid {0.25, 0.30, …, 0.75}.
pub fn default_tau_grid() -> Vec<f64> {
    (0..11).map(|i| 0.25 + 0.05 * i as f64).collect()
}

/// Component-level evaluation: per τ, TP = gt components with sIoU > τ,
/// FN = the rest, FP = predicted components with PPV ≤ τ;
/// F1*(τ) = 2TP/(2TP+FN+FP), averaged over the grid. Degenerate images with
/// neither gt nor predicted components score 1.
pub fn f1_star(
    gt: &ComponentSet,
    pred: &ComponentSet,
    gt_mask: &Tensor,
    taus: &[f64],
) -> Result<ComponentEvalResult> {
    let sious: Vec<f64> = (0..gt.count)
        .map(|i| siou(gt, i, pred))
        .collect::<Result<_>>()?;
    let ppvs: Vec<f64> = (0..pred.count)
        .map(|i| ppv(pred, i, gt_mask))
        .collect::<Result<_>>()?;
    let mut per_tau = Vec::with_capacity(taus.len());
    for &tau in taus {
        let tp = sious.iter().filter(|&&s| s > tau).count();
        let fn_ = gt.count - tp;
        let fp = ppvs.iter().filter(|&&p| p <= tau).count();
        let f1 = if 2 * tp + fn_ + fp == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fn_ + fp) as f64
        };
        per_tau.push((tau, f1));
    }
    let f1_star_avg = per_tau.iter().map(|&(_, f)| f).sum::<f64>() / per_tau.len().max(1) as f64;
    let mean_siou = if sious.is_empty() {
        1.0
    } else {
        sious.iter().sum::<f64>() / sious.len() as f64
    };
    let mean_ppv = if ppvs.is_empty() {
        1.0
    } else {
        ppvs.iter().sum::<f64>() / ppvs.len() as f64
    };
    Ok(ComponentEvalResult {
        mean_siou,
        mean_ppv,
        f1_star_avg,
        per_tau,
    })
}

/// Mean IoU over the classes present in the ground truth; label `void`
/// (−1) pixels are ignored everywhere.
pub fn miou(pred_labels: &[i32], gt_labels: &[i32], num_classes: usize) -> Result<f64> {
    if pred_labels.len() != gt_labels.len() {
        return Err(Error::shape("label map size mismatch"));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    let mut present = vec![false; num_classes];
    for (&p, &g) in pred_labels.iter().zip(gt_labels) {
        if g < 0 {
            continue; // void
        }
        let g = g as usize;
        if g >= num_classes {
            return Err(Error::data(format!("gt label {} out of range", g)));
        }
        present[g] = true;
        if p == g as i32 {
            inter[g] += 1;
            union[g] += 1;
        } else {
            union[g] += 1;
            if p >= 0 && (p as usize) < num_classes {
                union[p as usize] += 1;
            }
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..num_classes {
        if present[c] {
            sum += inter[c] as f64 / union[c] as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::data("no non-void ground-truth pixels"));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t1(data: Vec<f32>) -> Tensor {
        let n = data.len();
        Tensor::new(vec![n], data).unwrap()
    }

    #[test]
    fn pr_perfect_and_degenerate() {
        let p = pr_curve(&t1(vec![1.0, 0.0]), &t1(vec![1.0, 0.0])).unwrap();
        assert_eq!(p[0].precision, 1.0);
        assert_eq!(p.last().unwrap().recall, 1.0);

        // all scores equal → one point: precision = prevalence, recall 1
        let p = pr_curve(&t1(vec![0.5; 4]), &t1(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].precision, 0.25);
        assert_eq!(p[0].recall, 1.0);

        // degenerate gt rejected
        assert!(pr_curve(&t1(vec![1.0, 0.0]), &t1(vec![1.0, 1.0])).is_err());
        assert!(pr_curve(&t1(vec![1.0, 0.0]), &t1(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn pr_exhaustive_sweep_example() {
        let s = t1(vec![0.8, 0.6, 0.4, 0.2]);
        let g = t1(vec![1.0, 0.0, 1.0, 0.0]);
        let p = pr_curve(&s, &g).unwrap();
        let expect = [
            (1.0, 0.5),
            (0.5, 0.5),
            (2.0 / 3.0, 1.0),
            (0.5, 1.0),
        ];
        assert_eq!(p.len(), 4);
        for (pt, &(pr, rc)) in p.iter().zip(&expect) {
            assert!((pt.precision - pr).abs() < 1e-12);
            assert!((pt.recall - rc).abs() < 1e-12);
        }
        let a = auprc(&s, &g).unwrap();
        assert!((a - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn auprc_boundaries() {
        // perfect separation → 1
        let a = auprc(
            &t1(vec![0.9, 0.8, 0.2, 0.1]),
            &t1(vec![1.0, 1.0, 0.0, 0.0]),
        )
        .unwrap();
        assert!((a - 1.0).abs() < 1e-12);
        // all equal → prevalence
        let a = auprc(&t1(vec![0.3; 5]), &t1(vec![1.0, 1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!((a - 0.4).abs() < 1e-12);
    }

    #[test]
    fn fpr95_cases() {
        let perfect = fpr_at_95tpr(
            &t1(vec![0.9, 0.8, 0.2, 0.1]),
            &t1(vec![1.0, 1.0, 0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(perfect, 0.0);

        let inverted = fpr_at_95tpr(
            &t1(vec![0.1, 0.2, 0.8, 0.9]),
            &t1(vec![1.0, 1.0, 0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(inverted, 1.0);

        let mixed = fpr_at_95tpr(
            &t1(vec![0.9, 0.8, 0.7, 0.3]),
            &t1(vec![1.0, 0.0, 1.0, 0.0]),
        )
        .unwrap();
        assert_eq!(mixed, 0.5);
    }

    #[test]
    fn rank_statistics_are_monotone_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let s: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g: Vec<f32> = (0..64)
            .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
            .collect();
        let scores = t1(s.clone());
        let gt = t1(g);
        let trans = t1(s.iter().map(|&x| (3.0 * x + 1.0).exp()).collect());
        assert!((auprc(&scores, &gt).unwrap() - auprc(&trans, &gt).unwrap()).abs() < 1e-12);
        assert!(
            (fpr_at_95tpr(&scores, &gt).unwrap() - fpr_at_95tpr(&trans, &gt).unwrap()).abs()
                < 1e-12
        );
    }

    /// Exhaustive oracle: precision/recall at every distinct threshold by
    /// direct counting, integrated the same way.
    fn auprc_oracle(s: &[f32], g: &[bool]) -> f64 {
        let mut thresholds: Vec<f32> = s.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let total_pos = g.iter().filter(|&&b| b).count() as f64;
        let mut area = 0.0;
        let mut prev_r = 0.0;
        for &gamma in &thresholds {
            let tp = s
                .iter()
                .zip(g)
                .filter(|&(&x, &y)| x >= gamma && y)
                .count() as f64;
            let fp = s
                .iter()
                .zip(g)
                .filter(|&(&x, &y)| x >= gamma && !y)
                .count() as f64;
            let p = tp / (tp + fp);
            let r = tp / total_pos;
            area += (r - prev_r) * p;
            prev_r = r;
        }
        area
    }

    fn fpr95_oracle(s: &[f32], g: &[bool]) -> f64 {
        let mut thresholds: Vec<f32> = s.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let total_pos = g.iter().filter(|&&b| b).count() as f64;
        let total_neg = g.len() as f64 - total_pos;
        for &gamma in &thresholds {
            let tp = s
                .iter()
                .zip(g)
                .filter(|&(&x, &y)| x >= gamma && y)
                .count() as f64;
            if tp / total_pos >= 0.95 {
                let fp = s
                    .iter()
                    .zip(g)
                    .filter(|&(&x, &y)| x >= gamma && !y)
                    .count() as f64;
                return fp / total_neg;
            }
        }
        1.0
    }

    #[test]
    fn pixel_metrics_match_exhaustive_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        for _ in 0..20 {
            let s: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut g: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.4)).collect();
            g[0] = true;
            g[1] = false; // guarantee both classes
            let scores = t1(s.clone());
            let gt = t1(g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
            assert!((auprc(&scores, &gt).unwrap() - auprc_oracle(&s, &g)).abs() < 1e-9);
            assert!(
                (fpr_at_95tpr(&scores, &gt).unwrap() - fpr95_oracle(&s, &g)).abs() < 1e-9
            );
        }
    }

    #[test]
    fn components_basic_cases() {
        let zeros = Tensor::zeros(&[3, 3]);
        assert_eq!(connected_components(&zeros, 8).unwrap().count, 0);

        let ones = Tensor::full(&[3, 3], 1.0);
        let c = connected_components(&ones, 8).unwrap();
        assert_eq!(c.count, 1);
        assert_eq!(c.pixels[0].len(), 9);

        // diagonal-touching pixels
        let diag = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(connected_components(&diag, 8).unwrap().count, 1);
        assert_eq!(connected_components(&diag, 4).unwrap().count, 2);
    }

    /// Flood-fill oracle by iterated label relaxation (different algorithm
    /// from the stack-based implementation).
    fn component_count_oracle(fg: &[bool], h: usize, w: usize, conn: u8) -> usize {
        let mut label: Vec<usize> = (0..h * w).collect();
        loop {
            let mut changed = false;
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    if !fg[p] {
                        continue;
                    }
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dy == 0 && dx == 0 {
                                continue;
                            }
                            if conn == 4 && dy != 0 && dx != 0 {
                                continue;
                            }
                            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                                continue;
                            }
                            let q = ny as usize * w + nx as usize;
                            if fg[q] && label[q] < label[p] {
                                label[p] = label[q];
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut roots: Vec<usize> = (0..h * w).filter(|&p| fg[p]).map(|p| label[p]).collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }

    #[test]
    fn components_match_oracle_on_all_3x3_maps() {
        for bits in 0..512u32 {
            let fg: Vec<bool> = (0..9).map(|i| bits >> i & 1 == 1).collect();
            let t = Tensor::new(
                vec![3, 3],
                fg.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )
            .unwrap();
            for conn in [4u8, 8] {
                let got = connected_components(&t, conn).unwrap();
                let want = component_count_oracle(&fg, 3, 3, conn);
                assert_eq!(got.count, want, "bits {:09b} conn {}", bits, conn);
                // labels contiguous and pixels partition the foreground
                let covered: usize = got.pixels.iter().map(|v| v.len()).sum();
                assert_eq!(covered, fg.iter().filter(|&&b| b).count());
            }
        }
    }

    #[test]
    fn siou_basic_cases() {
        // prediction exactly k → 1
        let gt = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let gtc = connected_components(&gt, 8).unwrap();
        let pc = connected_components(&gt, 8).unwrap();
        assert_eq!(siou(&gtc, 0, &pc).unwrap(), 1.0);

        // no predicted overlap → 0
        let empty = connected_components(&Tensor::zeros(&[2, 3]), 8).unwrap();
        assert_eq!(siou(&gtc, 0, &empty).unwrap(), 0.0);
    }

    #[test]
    fn siou_adjustment_strictly_improves_on_plain_iou() {
        // 8×8: two adjacent gt components (left/right blocks of row 3),
        // one prediction covering both.
        let (h, w) = (8, 8);
        let mut gt = Tensor::zeros(&[h, w]);
        for x in 0..3 {
            gt.set2(3, x, 1.0);
        }
        for x in 5..8 {
            gt.set2(3, x, 1.0);
        }
        let mut pred = Tensor::new(
            vec![h, w],
            vec![0.0; h * w],
        )
        .unwrap();
        for x in 0..8 {
            pred.set2(3, x, 1.0);
        }
        let gtc = connected_components(&gt, 8).unwrap();
        let pc = connected_components(&pred, 8).unwrap();
        assert_eq!(gtc.count, 2);
        assert_eq!(pc.count, 1);
        // brute-force pixel counting for k = left block
        // k = {(3,0..3)}, K̂(k) = entire row 3, A(k) = {(3,5..8)}
        // inter = 3; union = 8; union \ A = 5 → sIoU = 3/5; plain IoU = 3/8.
        let s = siou(&gtc, 0, &pc).unwrap();
        assert!((s - 3.0 / 5.0).abs() < 1e-12);
        assert!(s > 3.0 / 8.0, "adjustment must improve on plain IoU");
    }

    #[test]
    fn ppv_cases() {
        let mut gt = Tensor::zeros(&[2, 4]);
        for x in 0..4 {
            gt.set2(0, x, 1.0);
        }
        // component inside gt
        let inside = Tensor::new(vec![2, 4], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let pc = connected_components(&inside, 8).unwrap();
        assert_eq!(ppv(&pc, 0, &gt).unwrap(), 1.0);

        // disjoint component
        let out = Tensor::new(vec![2, 4], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0])
            .unwrap();
        let pc = connected_components(&out, 8).unwrap();
        assert_eq!(ppv(&pc, 0, &gt).unwrap(), 0.0);

        // half overlap (4-pixel component, 2 inside)
        let half = Tensor::new(vec![2, 4], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0])
            .unwrap();
        let pc = connected_components(&half, 8).unwrap();
        assert_eq!(ppv(&pc, 0, &gt).unwrap(), 0.5);
    }

    #[test]
    fn f1_star_perfect_and_empty() {
        let gt = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let gtc = connected_components(&gt, 8).unwrap();
        let taus = default_tau_grid();
        assert_eq!(taus.len(), 11);
        assert!((taus[0] - 0.25).abs() < 1e-12 && (taus[10] - 0.75).abs() < 1e-12);

        // perfect prediction
        let r = f1_star(&gtc, &gtc, &gt, &taus).unwrap();
        for &(_, f) in &r.per_tau {
            assert_eq!(f, 1.0);
        }
        assert_eq!(r.f1_star_avg, 1.0);
        assert_eq!(r.mean_siou, 1.0);
        assert_eq!(r.mean_ppv, 1.0);

        // empty prediction
        let empty = connected_components(&Tensor::zeros(&[2, 3]), 8).unwrap();
        let r = f1_star(&gtc, &empty, &gt, &taus).unwrap();
        assert_eq!(r.f1_star_avg, 0.0);
    }

    #[test]
    fn f1_star_matched_plus_spurious_matches_hand_count() {
        // 8×8: one gt blob perfectly predicted, plus one spurious predicted
        // blob far away.
        let (h, w) = (8, 8);
        let mut gt = Tensor::zeros(&[h, w]);
        for y in 1..3 {
            for x in 1..3 {
                gt.set2(y, x, 1.0);
            }
        }
        let mut pred = gt.clone();
        for y in 5..7 {
            for x in 5..7 {
                pred.set2(y, x, 1.0);
            }
        }
        let gtc = connected_components(&gt, 8).unwrap();
        let pc = connected_components(&pred, 8).unwrap();
        let r = f1_star(&gtc, &pc, &gt, &default_tau_grid()).unwrap();
        // For every τ in the grid: TP=1 (sIoU=1>τ), FN=0, FP=1 (spurious
        // PPV=0≤τ) → F1 = 2/(2+0+1) = 2/3.
        for &(_, f) in &r.per_tau {
            assert!((f - 2.0 / 3.0).abs() < 1e-12);
        }
        assert!((r.mean_siou - 1.0).abs() < 1e-12);
        assert!((r.mean_ppv - 0.5).abs() < 1e-12);
    }

    #[test]
    fn siou_bounded_and_at_least_plain_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        for _ in 0..20 {
            let gt = Tensor::new(
                vec![8, 8],
                (0..64)
                    .map(|_| if rng.gen_bool(0.25) { 1.0 } else { 0.0 })
                    .collect::<Vec<f32>>(),
            )
            .unwrap();
            let pred = Tensor::new(
                vec![8, 8],
                (0..64)
                    .map(|_| if rng.gen_bool(0.25) { 1.0 } else { 0.0 })
                    .collect::<Vec<f32>>(),
            )
            .unwrap();
            let gtc = connected_components(&gt, 8).unwrap();
            let pc = connected_components(&pred, 8).unwrap();
            for k in 0..gtc.count {
                let s = siou(&gtc, k, &pc).unwrap();
                assert!((0.0..=1.0).contains(&s));
                // plain IoU against the same K̂(k)
                let k_id = k as u32 + 1;
                let mut khat = vec![false; 64];
                for comp in &pc.pixels {
                    if comp.iter().any(|&p| gtc.labels[p] == k_id) {
                        for &p in comp {
                            khat[p] = true;
                        }
                    }
                }
                let inter = (0..64)
                    .filter(|&p| gtc.labels[p] == k_id && khat[p])
                    .count() as f64;
                let uni = (0..64)
                    .filter(|&p| gtc.labels[p] == k_id || khat[p])
                    .count() as f64;
                let plain = if uni == 0.0 { 0.0 } else { inter / uni };
                assert!(s >= plain - 1e-12);
            }
        }
    }

    #[test]
    fn miou_cases() {
        let gt = vec![0, 0, 1, 1];
        assert_eq!(miou(&gt, &gt, 3).unwrap(), 1.0);

        let disjoint = vec![2, 2, 0, 0];
        assert_eq!(miou(&disjoint, &gt, 3).unwrap(), 0.0);

        // 4×4 case against a hand count:
        // gt: class 0 on 8 px, class 1 on 8 px; pred gets 6/8 of class 0
        // right (2 px as class 1) and all of class 1 right.
        let gt: Vec<i32> = (0..16).map(|i| if i < 8 { 0 } else { 1 }).collect();
        let mut pred = gt.clone();
        pred[0] = 1;
        pred[1] = 1;
        // class 0: inter 6, union 8 → 0.75; class 1: inter 8, union 10 → 0.8
        let m = miou(&pred, &gt, 2).unwrap();
        assert!((m - (0.75 + 0.8) / 2.0).abs() < 1e-12);

        // void ignored
        let gt_v = vec![0, -1, 1, 1];
        let pred_v = vec![0, 0, 1, 1];
        assert_eq!(miou(&pred_v, &gt_v, 2).unwrap(), 1.0);
    }
}
