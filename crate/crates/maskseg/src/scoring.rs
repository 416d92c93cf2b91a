//! Anomaly-score computation: per-pixel maximum-softmax-probability
//! scoring, mask-based scoring from class and mask logits, and the
//! inference-variant grid over class/mask/outer transforms.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassTransform {
    Identity,
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskTransform {
    Identity,
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterTransform {
    Identity,
    Softmax,
}

/// Axis for `MaskTransform::Softmax`: across queries per pixel (default) or
/// across pixels per query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSoftmaxAxis {
    Queries,
    Pixels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceVariant {
    pub class_transform: ClassTransform,
    pub mask_transform: MaskTransform,
    pub outer_transform: OuterTransform,
    pub mask_softmax_axis: MaskSoftmaxAxis,
}

impl Default for InferenceVariant {
    fn default() -> Self {
        InferenceVariant {
            class_transform: ClassTransform::Softmax,
            mask_transform: MaskTransform::Sigmoid,
            outer_transform: OuterTransform::Identity,
            mask_softmax_axis: MaskSoftmaxAxis::Queries,
        }
    }
}

impl std::str::FromStr for InferenceVariant {
    type Err = Error;
    /// Parses "class,mask,outer" with class, mask ∈ {identity, softmax,
    /// sigmoid} and outer ∈ {identity, softmax}.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::config(format!(
                "variant '{}' must be class,mask,outer",
                s
            )));
        }
        let class_transform = match parts[0] {
            "identity" => ClassTransform::Identity,
            "softmax" => ClassTransform::Softmax,
            "sigmoid" => ClassTransform::Sigmoid,
            other => return Err(Error::config(format!("unknown class transform '{}'", other))),
        };
        let mask_transform = match parts[1] {
            "identity" => MaskTransform::Identity,
            "softmax" => MaskTransform::Softmax,
            "sigmoid" => MaskTransform::Sigmoid,
            other => return Err(Error::config(format!("unknown mask transform '{}'", other))),
        };
        let outer_transform = match parts[2] {
            "identity" => OuterTransform::Identity,
            "softmax" => OuterTransform::Softmax,
            other => return Err(Error::config(format!("unknown outer transform '{}'", other))),
        };
        Ok(InferenceVariant {
            class_transform,
            mask_transform,
            outer_transform,
            mask_softmax_axis: MaskSoftmaxAxis::Queries,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_inplace(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::MIN, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Per-pixel 1 − max_k of class probabilities S: K×(H·W) → H×W.
pub fn msp_pixel(class_probs: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let shape = class_probs.shape();
    if shape.len() != 2 || shape[1] != h * w {
        return Err(Error::shape(format!(
            "class probs {:?} vs {}x{} pixels",
            shape, h, w
        )));
    }
    let k = shape[0];
    let mut out = vec![0.0f32; h * w];
    for p in 0..h * w {
        let mx = (0..k)
            .map(|c| class_probs.at2(c, p) as f64)
            .fold(f64::MIN, f64::max);
        out[p] = (1.0 - mx) as f32;
    }
    Tensor::new(vec![h, w], out)
}

/// Marginal inlier-class evidence softmax(C)ᵀ·sigmoid(M) with the φ column
/// dropped after the softmax: K×(H·W).
pub fn semantic_marginal(class_logits: &Tensor, mask_logits: &Tensor) -> Result<Tensor> {
    let (sc, sm) = (class_logits.shape(), mask_logits.shape());
    if sc.len() != 2 || sm.len() != 2 || sc[0] != sm[0] {
        return Err(Error::shape(format!(
            "class logits {:?} vs mask logits {:?}",
            sc, sm
        )));
    }
    let (n, kp1, p) = (sc[0], sc[1], sm[1]);
    let k = kp1 - 1;
    let mut probs = vec![0.0f64; n * kp1];
    for q in 0..n {
        let row: Vec<f64> = (0..kp1).map(|c| class_logits.at2(q, c) as f64).collect();
        let mut r = row;
        softmax_inplace(&mut r);
        probs[q * kp1..(q + 1) * kp1].copy_from_slice(&r);
    }
    let mut out = vec![0.0f32; k * p];
    for q in 0..n {
        for c in 0..k {
            let pc = probs[q * kp1 + c];
            if pc == 0.0 {
                continue;
            }
            for j in 0..p {
                out[c * p + j] += (pc * sigmoid(mask_logits.at2(q, j) as f64)) as f32;
            }
        }
    }
    Tensor::new(vec![k, p], out)
}

/// Per-pixel argmax over the semantic marginal: the predicted semantic
/// class map (values in 0..K), H×W as i32.
pub fn semantic_argmax(class_logits: &Tensor, mask_logits: &Tensor) -> Result<Vec<i32>> {
    let marginal = semantic_marginal(class_logits, mask_logits)?;
    let (k, p) = (marginal.shape()[0], marginal.shape()[1]);
    let mut out = vec![0i32; p];
    for j in 0..p {
        let mut best = 0usize;
        for c in 1..k {
            if marginal.at2(c, j) > marginal.at2(best, j) {
                best = c;
            }
        }
        out[j] = best as i32;
    }
    Ok(out)
}

/// Mask-based anomaly score f = 1 − clamp(max_k softmax(C)ᵀ·sigmoid(M), 0, 1),
/// reshaped to H×W.
pub fn mask_anomaly_score(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    score_variant(class_logits, mask_logits, h, w, InferenceVariant::default())
}

/// Anomaly score under an arbitrary inference variant.
pub fn score_variant(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    h: usize,
    w: usize,
    variant: InferenceVariant,
) -> Result<Tensor> {
    let (sc, sm) = (class_logits.shape(), mask_logits.shape());
    if sc.len() != 2 || sm.len() != 2 || sc[0] != sm[0] || sm[1] != h * w {
        return Err(Error::shape(format!(
            "class logits {:?} / mask logits {:?} vs {}x{} pixels",
            sc, sm, h, w
        )));
    }
    let (n, kp1, p) = (sc[0], sc[1], sm[1]);
    let k = kp1 - 1;

    // Class evidence per query, φ column dropped after the transform.
    let mut cls = vec![0.0f64; n * k];
    for q in 0..n {
        let mut row: Vec<f64> = (0..kp1).map(|c| class_logits.at2(q, c) as f64).collect();
        match variant.class_transform {
            ClassTransform::Identity => {}
            ClassTransform::Softmax => softmax_inplace(&mut row),
            ClassTransform::Sigmoid => {
                for v in row.iter_mut() {
                    *v = sigmoid(*v);
                }
            }
        }
        cls[q * k..(q + 1) * k].copy_from_slice(&row[..k]);
    }

    // Mask evidence.
    let mut mask = vec![0.0f64; n * p];
    for q in 0..n {
        for j in 0..p {
            mask[q * p + j] = mask_logits.at2(q, j) as f64;
        }
    }
    match variant.mask_transform {
        MaskTransform::Identity => {}
        MaskTransform::Sigmoid => {
            for v in mask.iter_mut() {
                *v = sigmoid(*v);
            }
        }
        MaskTransform::Softmax => match variant.mask_softmax_axis {
            MaskSoftmaxAxis::Pixels => {
                for q in 0..n {
                    softmax_inplace(&mut mask[q * p..(q + 1) * p]);
                }
            }
            MaskSoftmaxAxis::Queries => {
                for j in 0..p {
                    let mut col: Vec<f64> = (0..n).map(|q| mask[q * p + j]).collect();
                    softmax_inplace(&mut col);
                    for q in 0..n {
                        mask[q * p + j] = col[q];
                    }
                }
            }
        },
    }

    // Marginalize over queries: K×P.
    let mut marginal = vec![0.0f64; k * p];
    for q in 0..n {
        for c in 0..k {
            let pc = cls[q * k + c];
            if pc == 0.0 {
                continue;
            }
            for j in 0..p {
                marginal[c * p + j] += pc * mask[q * p + j];
            }
        }
    }

    if variant.outer_transform == OuterTransform::Softmax {
        for j in 0..p {
            let mut col: Vec<f64> = (0..k).map(|c| marginal[c * p + j]).collect();
            softmax_inplace(&mut col);
            for c in 0..k {
                marginal[c * p + j] = col[c];
            }
        }
    }

    let mut out = vec![0.0f32; p];
    for j in 0..p {
        let mx = (0..k).map(|c| marginal[c * p + j]).fold(f64::MIN, f64::max);
        out[j] = (1.0 - mx.clamp(0.0, 1.0)) as f32;
    }
    Tensor::new(vec![h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn msp_cases() {
        // one-hot pixel → 0
        let mut s = Tensor::zeros(&[3, 1]);
        s.set2(1, 0, 1.0);
        let m = msp_pixel(&s, 1, 1).unwrap();
        assert_eq!(m.data()[0], 0.0);

        // uniform over K=4 → 0.75
        let u = Tensor::full(&[4, 2], 0.25);
        let m = msp_pixel(&u, 1, 2).unwrap();
        for &v in m.data() {
            assert!((v - 0.75).abs() < 1e-7);
        }

        // random probabilities against the direct max oracle
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let s = rand_tensor(&mut rng, &[5, 6], 0.0, 1.0);
        let m = msp_pixel(&s, 2, 3).unwrap();
        for j in 0..6 {
            let mx = (0..5).map(|c| s.at2(c, j)).fold(f32::MIN, f32::max);
            assert!((m.data()[j] - (1.0 - mx)).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_score_ideal_inlier_and_empty_masks() {
        // N=1, class prob ≈1 on a real class, mask prob ≈1 → score ≈ 0.
        let c = Tensor::new(vec![1, 3], vec![40.0, 0.0, 0.0]).unwrap();
        let m = Tensor::new(vec![1, 1], vec![40.0]).unwrap();
        let f = mask_anomaly_score(&c, &m, 1, 1).unwrap();
        assert!(f.data()[0] < 1e-6);

        // all mask logits −50 → score ≈ 1 everywhere
        let m2 = Tensor::full(&[1, 4], -50.0);
        let f2 = mask_anomaly_score(&c, &m2, 2, 2).unwrap();
        for &v in f2.data() {
            assert!(v > 1.0 - 1e-6);
        }
    }

    #[test]
    fn mask_score_two_query_enumeration() {
        // query probs over (k1,k2): (0.9, 0.05) and (0.1, 0.7); mask probs
        // 1.0 and 0.5 → marginals (0.95, 0.40) → f = 1 − 0.95 = 0.05.
        let kp1 = 3;
        let mut c = Tensor::zeros(&[2, kp1]);
        // logits reproducing softmax (0.9, 0.05, 0.05)
        let l = |p: f64| p.ln();
        c.set2(0, 0, l(0.9) as f32);
        c.set2(0, 1, l(0.05) as f32);
        c.set2(0, 2, l(0.05) as f32);
        // softmax (0.1, 0.7, 0.2)
        c.set2(1, 0, l(0.1) as f32);
        c.set2(1, 1, l(0.7) as f32);
        c.set2(1, 2, l(0.2) as f32);
        let m = Tensor::new(vec![2, 1], vec![40.0, 0.0]).unwrap(); // probs 1.0, 0.5
        let f = mask_anomaly_score(&c, &m, 1, 1).unwrap();
        assert!((f.data()[0] as f64 - 0.05).abs() < 1e-6);
    }

    #[test]
    fn default_variant_equals_mask_anomaly_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let c = rand_tensor(&mut rng, &[4, 5], -2.0, 2.0);
        let m = rand_tensor(&mut rng, &[4, 12], -3.0, 3.0);
        let a = mask_anomaly_score(&c, &m, 3, 4).unwrap();
        let b = score_variant(&c, &m, 3, 4, InferenceVariant::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_variant_on_zero_logits() {
        let c = Tensor::zeros(&[2, 4]);
        let m = Tensor::zeros(&[2, 6]);
        let v = InferenceVariant {
            class_transform: ClassTransform::Identity,
            mask_transform: MaskTransform::Identity,
            outer_transform: OuterTransform::Identity,
            mask_softmax_axis: MaskSoftmaxAxis::Queries,
        };
        let f = score_variant(&c, &m, 2, 3, v).unwrap();
        for &x in f.data() {
            assert_eq!(x, 1.0); // 1 − clamp(0) = 1
        }
    }

    #[test]
    fn variant_matches_composed_oracle() {
        // (sigmoid, softmax-over-queries, softmax) on a random instance,
        // composed step by step in the test.
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let (n, kp1, p) = (3, 4, 5);
        let c = rand_tensor(&mut rng, &[n, kp1], -2.0, 2.0);
        let m = rand_tensor(&mut rng, &[n, p], -2.0, 2.0);
        let v = InferenceVariant {
            class_transform: ClassTransform::Sigmoid,
            mask_transform: MaskTransform::Softmax,
            outer_transform: OuterTransform::Softmax,
            mask_softmax_axis: MaskSoftmaxAxis::Queries,
        };
        let f = score_variant(&c, &m, 1, p, v).unwrap();

        let k = kp1 - 1;
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        // oracle
        for j in 0..p {
            // mask softmax over queries at pixel j
            let logits: Vec<f64> = (0..n).map(|q| m.at2(q, j) as f64).collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let marg: Vec<f64> = (0..k)
                .map(|cc| {
                    (0..n)
                        .map(|q| sig(c.at2(q, cc) as f64) * e[q] / z)
                        .sum()
                })
                .collect();
            let mut om = marg.clone();
            let mmx = om.iter().cloned().fold(f64::MIN, f64::max);
            let oz: f64 = om.iter().map(|x| (x - mmx).exp()).sum();
            for x in om.iter_mut() {
                *x = (*x - mmx).exp() / oz;
            }
            let best = om.iter().cloned().fold(f64::MIN, f64::max);
            let expect = 1.0 - best.clamp(0.0, 1.0);
            assert!((f.data()[j] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn scores_stay_in_unit_interval_for_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let c = rand_tensor(&mut rng, &[4, 5], -5.0, 5.0);
        let m = rand_tensor(&mut rng, &[4, 8], -5.0, 5.0);
        let classes = [
            ClassTransform::Identity,
            ClassTransform::Softmax,
            ClassTransform::Sigmoid,
        ];
        let masks = [
            MaskTransform::Identity,
            MaskTransform::Softmax,
            MaskTransform::Sigmoid,
        ];
        let outers = [OuterTransform::Identity, OuterTransform::Softmax];
        for ct in classes {
            for mt in masks {
                for ot in outers {
                    let v = InferenceVariant {
                        class_transform: ct,
                        mask_transform: mt,
                        outer_transform: ot,
                        mask_softmax_axis: MaskSoftmaxAxis::Queries,
                    };
                    let f = score_variant(&c, &m, 2, 4, v).unwrap();
                    for &x in f.data() {
                        assert!((0.0..=1.0).contains(&x), "variant {:?} gave {}", v, x);
                    }
                }
            }
        }
    }

    #[test]
    fn query_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let c = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let m = rand_tensor(&mut rng, &[3, 6], -2.0, 2.0);
        let a = mask_anomaly_score(&c, &m, 2, 3).unwrap();
        // permute queries (rows) the same way in both tensors
        let perm = [2usize, 0, 1];
        let cp = Tensor::new(
            vec![3, 4],
            perm.iter()
                .flat_map(|&q| (0..4).map(move |j| (q, j)))
                .map(|(q, j)| c.at2(q, j))
                .collect(),
        )
        .unwrap();
        let mp = Tensor::new(
            vec![3, 6],
            perm.iter()
                .flat_map(|&q| (0..6).map(move |j| (q, j)))
                .map(|(q, j)| m.at2(q, j))
                .collect(),
        )
        .unwrap();
        let b = mask_anomaly_score(&cp, &mp, 2, 3).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-7);
    }

    #[test]
    fn class_logit_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let c = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let m = rand_tensor(&mut rng, &[3, 6], -2.0, 2.0);
        let a = mask_anomaly_score(&c, &m, 2, 3).unwrap();
        let mut c2 = c.clone();
        for j in 0..4 {
            let v = c2.at2(1, j);
            c2.set2(1, j, v + 3.5); // shift every class logit of query 1
        }
        let b = mask_anomaly_score(&c2, &m, 2, 3).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn variant_parsing() {
        let v: InferenceVariant = "softmax,sigmoid,identity".parse().unwrap();
        assert_eq!(v, InferenceVariant::default());
        assert!("softmax,sigmoid".parse::<InferenceVariant>().is_err());
        assert!("foo,sigmoid,identity".parse::<InferenceVariant>().is_err());
    }

    #[test]
    fn semantic_argmax_picks_dominant_class() {
        // query 0 → class 0 with full mask on pixel 0; query 1 → class 2 on
        // pixel 1.
        let mut c = Tensor::zeros(&[2, 4]);
        c.set2(0, 0, 40.0);
        c.set2(1, 2, 40.0);
        let m = Tensor::new(vec![2, 2], vec![40.0, -40.0, -40.0, 40.0]).unwrap();
        let arg = semantic_argmax(&c, &m).unwrap();
        assert_eq!(arg, vec![0, 2]);
    }
}
