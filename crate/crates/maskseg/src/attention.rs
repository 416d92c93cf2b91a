//! Cross-attention, masked-attention, and global masked-attention, plus
//! additive attention-mask construction and the negative-attention map used
//! for visualization. Single-head, unscaled logits.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Additive foreground/background attention masks with entries in {0, −∞},
/// partitioning the key positions per query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaskPair {
    pub foreground: Tensor,
    pub background: Tensor,
}

/// Threshold prior mask probabilities into additive masks: foreground is 0
/// where prob ≥ 0.5 (else −∞), background is the complement.
pub fn build_attention_masks(prior_mask_probs: &Tensor) -> Result<AttentionMaskPair> {
    if prior_mask_probs.shape().len() != 2 {
        return Err(Error::shape("prior mask probs must be N×P"));
    }
    if prior_mask_probs
        .data()
        .iter()
        .any(|&p| !(0.0..=1.0).contains(&p))
    {
        return Err(Error::data("prior mask probabilities must lie in [0,1]"));
    }
    let shape = prior_mask_probs.shape().to_vec();
    let fg: Vec<f32> = prior_mask_probs
        .data()
        .iter()
        .map(|&p| if p >= 0.5 { 0.0 } else { f32::NEG_INFINITY })
        .collect();
    let bg: Vec<f32> = prior_mask_probs
        .data()
        .iter()
        .map(|&p| if p < 0.5 { 0.0 } else { f32::NEG_INFINITY })
        .collect();
    Ok(AttentionMaskPair {
        foreground: Tensor::new(shape.clone(), fg)?,
        background: Tensor::new(shape, bg)?,
    })
}

fn check_shapes(t: &Tape, x_in: TensorId, q: TensorId, k: TensorId, v: TensorId) -> Result<()> {
    let (sx, sq, sk, sv) = (t.shape(x_in), t.shape(q), t.shape(k), t.shape(v));
    if sx.len() != 2 || sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
        return Err(Error::shape("attention operands must be 2-d"));
    }
    if sq[1] != sk[1] || sk[0] != sv[0] || sx[0] != sq[0] || sx[1] != sv[1] {
        return Err(Error::shape(format!(
            "attention shapes x{:?} q{:?} k{:?} v{:?}",
            sx, sq, sk, sv
        )));
    }
    Ok(())
}

/// Attention probabilities softmax(q·kᵀ + mask): N×P rows summing to one,
/// or all-zero where fully masked.
pub fn attention_probs(
    t: &mut Tape,
    q: TensorId,
    k: TensorId,
    mask: Option<&Tensor>,
) -> Result<TensorId> {
    let scores = t.matmul_nt(q, k)?;
    t.softmax_masked(scores, mask)
}

/// softmax(q·kᵀ)·v + x_in.
pub fn cross_attention(
    t: &mut Tape,
    x_in: TensorId,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> Result<TensorId> {
    check_shapes(t, x_in, q, k, v)?;
    let attn = attention_probs(t, q, k, None)?;
    let out = t.matmul(attn, v)?;
    t.add(out, x_in)
}

/// softmax(fg + q·kᵀ)·v + x_in; fully-masked rows contribute zero.
pub fn masked_attention(
    t: &mut Tape,
    x_in: TensorId,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    fg: &Tensor,
) -> Result<TensorId> {
    check_shapes(t, x_in, q, k, v)?;
    let attn = attention_probs(t, q, k, Some(fg))?;
    let out = t.matmul(attn, v)?;
    t.add(out, x_in)
}

/// softmax(fg + q·kᵀ)·v + softmax(bg + q·kᵀ)·v + x_in.
pub fn global_masked_attention(
    t: &mut Tape,
    x_in: TensorId,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    masks: &AttentionMaskPair,
) -> Result<TensorId> {
    check_shapes(t, x_in, q, k, v)?;
    let fg_attn = attention_probs(t, q, k, Some(&masks.foreground))?;
    let bg_attn = attention_probs(t, q, k, Some(&masks.background))?;
    let fg_out = t.matmul(fg_attn, v)?;
    let bg_out = t.matmul(bg_attn, v)?;
    let sum = t.add(fg_out, bg_out)?;
    t.add(sum, x_in)
}

/// Per-position 1 − mean-over-queries attention weight, clamped to [0,1].
pub fn negative_attention_map(attn_weights: &Tensor) -> Result<Tensor> {
    if attn_weights.shape().len() != 2 {
        return Err(Error::shape("attention weights must be N×P"));
    }
    let (n, p) = (attn_weights.shape()[0], attn_weights.shape()[1]);
    let mut out = vec![0.0f32; p];
    for j in 0..p {
        let mean: f64 = (0..n)
            .map(|i| attn_weights.at2(i, j) as f64)
            .sum::<f64>()
            / n as f64;
        out[j] = (1.0 - mean).clamp(0.0, 1.0) as f32;
    }
    Tensor::new(vec![p], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;
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
    fn mask_construction_boundaries() {
        let ones = Tensor::full(&[2, 3], 1.0);
        let m = build_attention_masks(&ones).unwrap();
        assert!(m.foreground.data().iter().all(|&v| v == 0.0));
        assert!(m.background.data().iter().all(|&v| v == f32::NEG_INFINITY));

        let zeros = Tensor::zeros(&[2, 3]);
        let m = build_attention_masks(&zeros).unwrap();
        assert!(m.foreground.data().iter().all(|&v| v == f32::NEG_INFINITY));
        assert!(m.background.data().iter().all(|&v| v == 0.0));

        // prob exactly 0.5 falls on the foreground side
        let half = Tensor::full(&[1, 1], 0.5);
        let m = build_attention_masks(&half).unwrap();
        assert_eq!(m.foreground.data()[0], 0.0);
        assert_eq!(m.background.data()[0], f32::NEG_INFINITY);
    }

    #[test]
    fn mask_pair_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let probs = rand_tensor(&mut rng, &[4, 9], 0.0, 1.0);
        let m = build_attention_masks(&probs).unwrap();
        for (f, b) in m.foreground.data().iter().zip(m.background.data()) {
            assert!((*f == 0.0) != (*b == 0.0));
        }
    }

    #[test]
    fn mask_construction_rejects_out_of_range() {
        let bad = Tensor::new(vec![1, 2], vec![0.2, 1.5]).unwrap();
        assert!(build_attention_masks(&bad).is_err());
    }

    #[test]
    fn cross_attention_single_key_and_zero_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let q = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[1, 4], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[1, 3], -1.0, 1.0);
        let mut t = Tape::new();
        let (xi, qi, ki, vi) = (t.leaf(&x), t.leaf(&q), t.leaf(&k), t.leaf(&v));
        let out = cross_attention(&mut t, xi, qi, ki, vi).unwrap();
        // single key → output row = v + x row
        for i in 0..2 {
            for c in 0..3 {
                let expect = v.at2(0, c) as f64 + x.at2(i, c) as f64;
                assert!((t.value_f64(out)[i * 3 + c] - expect).abs() < 1e-7);
            }
        }

        // zero values → residual only
        let k2 = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let z = t.leaf(&Tensor::zeros(&[5, 3]));
        let k2i = t.leaf(&k2);
        let out2 = cross_attention(&mut t, xi, qi, k2i, z).unwrap();
        assert!(t.value(out2).max_abs_diff(&x) < 1e-7);
    }

    #[test]
    fn cross_attention_matches_reference_oracle() {
        // 2 queries, 3 keys: direct 64-bit softmax(QKᵀ)V + X.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = rand_tensor(&mut rng, &[2, 2], -1.0, 1.0);
        let q = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        let mut oracle = vec![0.0f64; 4];
        for i in 0..2 {
            let scores: Vec<f64> = (0..3)
                .map(|j| {
                    (0..3)
                        .map(|d| q.at2(i, d) as f64 * k.at2(j, d) as f64)
                        .sum()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..2 {
                oracle[i * 2 + c] = (0..3)
                    .map(|j| e[j] / z * v.at2(j, c) as f64)
                    .sum::<f64>()
                    + x.at2(i, c) as f64;
            }
        }
        let mut t = Tape::new();
        let (xi, qi, ki, vi) = (t.leaf(&x), t.leaf(&q), t.leaf(&k), t.leaf(&v));
        let out = cross_attention(&mut t, xi, qi, ki, vi).unwrap();
        for (a, b) in t.value_f64(out).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn masked_attention_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let x = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let q = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let mut t = Tape::new();
        let (xi, qi, ki, vi) = (t.leaf(&x), t.leaf(&q), t.leaf(&k), t.leaf(&v));

        // zero mask equals cross attention
        let zeros = Tensor::zeros(&[2, 2]);
        let ma = masked_attention(&mut t, xi, qi, ki, vi, &zeros).unwrap();
        let ca = cross_attention(&mut t, xi, qi, ki, vi).unwrap();
        let (ma_v, ca_v) = (t.value(ma), t.value(ca));
        assert!(ma_v.max_abs_diff(&ca_v) < 1e-9);

        // fully masked → residual only
        let ninf = Tensor::full(&[2, 2], f32::NEG_INFINITY);
        let ma2 = masked_attention(&mut t, xi, qi, ki, vi, &ninf).unwrap();
        assert!(t.value(ma2).max_abs_diff(&x) < 1e-9);

        // masking one of two keys collapses onto the other
        let one = Tensor::new(
            vec![2, 2],
            vec![0.0, f32::NEG_INFINITY, 0.0, f32::NEG_INFINITY],
        )
        .unwrap();
        let ma3 = masked_attention(&mut t, xi, qi, ki, vi, &one).unwrap();
        for i in 0..2 {
            for c in 0..3 {
                let expect = v.at2(0, c) as f64 + x.at2(i, c) as f64;
                assert!((t.value_f64(ma3)[i * 3 + c] - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn gma_hand_and_reduction_cases() {
        // qkᵀ = 0 (zero queries), fg=[0,−∞], bg=[−∞,0] → v1 + v2 + x.
        let x = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
        let q = Tensor::zeros(&[1, 3]);
        let k = Tensor::zeros(&[2, 3]);
        let v = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let masks = AttentionMaskPair {
            foreground: Tensor::new(vec![1, 2], vec![0.0, f32::NEG_INFINITY]).unwrap(),
            background: Tensor::new(vec![1, 2], vec![f32::NEG_INFINITY, 0.0]).unwrap(),
        };
        let mut t = Tape::new();
        let (xi, qi, ki, vi) = (t.leaf(&x), t.leaf(&q), t.leaf(&k), t.leaf(&v));
        let out = global_masked_attention(&mut t, xi, qi, ki, vi, &masks).unwrap();
        assert!((t.value_f64(out)[0] - (1.0 + 3.0 + 0.5)).abs() < 1e-7);
        assert!((t.value_f64(out)[1] - (2.0 + 4.0 - 0.5)).abs() < 1e-7);

        // all-foreground prior reduces to cross attention
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let q = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let masks = build_attention_masks(&Tensor::full(&[3, 5], 1.0)).unwrap();
        let (xi, qi, ki, vi) = (t.leaf(&x), t.leaf(&q), t.leaf(&k), t.leaf(&v));
        let gma = global_masked_attention(&mut t, xi, qi, ki, vi, &masks).unwrap();
        let ca = cross_attention(&mut t, xi, qi, ki, vi).unwrap();
        let (gma_v, ca_v) = (t.value(gma), t.value(ca));
        assert!(gma_v.max_abs_diff(&ca_v) < 1e-6);
    }

    #[test]
    fn gma_foreground_term_matches_masked_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let x = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let q = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[6, 4], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[6, 3], -1.0, 1.0);
        let probs = rand_tensor(&mut rng, &[2, 6], 0.0, 1.0);
        let masks = build_attention_masks(&probs).unwrap();
        let mut t = Tape::new();
        let (xi, qi, ki, vi) = (t.leaf(&x), t.leaf(&q), t.leaf(&k), t.leaf(&v));
        // MA − x equals GMA's foreground term computed directly
        let ma = masked_attention(&mut t, xi, qi, ki, vi, &masks.foreground).unwrap();
        let fg_attn = attention_probs(&mut t, qi, ki, Some(&masks.foreground)).unwrap();
        let fg_term = t.matmul(fg_attn, vi).unwrap();
        let ma_minus_x = t.sub(ma, xi).unwrap();
        let (a, b) = (t.value(ma_minus_x), t.value(fg_term));
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn gma_complement_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let q = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[7, 5], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[7, 4], -1.0, 1.0);
        let probs = rand_tensor(&mut rng, &[3, 7], 0.0, 1.0);
        let flipped = Tensor::new(
            vec![3, 7],
            probs.data().iter().map(|&p| 1.0 - p).collect(),
        )
        .unwrap();
        let m1 = build_attention_masks(&probs).unwrap();
        let m2 = build_attention_masks(&flipped).unwrap();
        let mut t = Tape::new();
        let (xi, qi, ki, vi) = (t.leaf(&x), t.leaf(&q), t.leaf(&k), t.leaf(&v));
        let g1 = global_masked_attention(&mut t, xi, qi, ki, vi, &m1).unwrap();
        let g2 = global_masked_attention(&mut t, xi, qi, ki, vi, &m2).unwrap();
        let (a, b) = (t.value(g1), t.value(g2));
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn negative_attention_cases() {
        // uniform attention → constant 1 − 1/P
        let p = 4;
        let uniform = Tensor::full(&[3, p], 1.0 / p as f32);
        let m = negative_attention_map(&uniform).unwrap();
        for &v in m.data() {
            assert!((v as f64 - (1.0 - 1.0 / p as f64)).abs() < 1e-6);
        }

        // one position taking all attention → 0 there, 1 elsewhere
        let mut conc = Tensor::zeros(&[2, 3]);
        conc.set2(0, 1, 1.0);
        conc.set2(1, 1, 1.0);
        let m = negative_attention_map(&conc).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 1.0]);

        // random weights against the direct mean oracle
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let w = rand_tensor(&mut rng, &[4, 5], 0.0, 0.3);
        let m = negative_attention_map(&w).unwrap();
        for j in 0..5 {
            let mean: f64 = (0..4).map(|i| w.at2(i, j) as f64).sum::<f64>() / 4.0;
            assert!((m.data()[j] as f64 - (1.0 - mean)).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_mechanisms_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let x = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let q = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        let probs = rand_tensor(&mut rng, &[2, 5], 0.0, 1.0);
        let masks = build_attention_masks(&probs).unwrap();
        let inputs = [x, q, k, v];

        let err = grad_check(
            |t, ids| {
                let out = cross_attention(t, ids[0], ids[1], ids[2], ids[3])?;
                Ok(t.mean_all(out))
            },
            &inputs,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "CA grad err {}", err);

        let fg = masks.foreground.clone();
        let err = grad_check(
            |t, ids| {
                let out = masked_attention(t, ids[0], ids[1], ids[2], ids[3], &fg)?;
                Ok(t.mean_all(out))
            },
            &inputs,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "MA grad err {}", err);

        let err = grad_check(
            |t, ids| {
                let out = global_masked_attention(t, ids[0], ids[1], ids[2], ids[3], &masks)?;
                Ok(t.mean_all(out))
            },
            &inputs,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "GMA grad err {}", err);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::zeros(&[2, 3]));
        let q = t.leaf(&Tensor::zeros(&[2, 4]));
        let k = t.leaf(&Tensor::zeros(&[5, 4]));
        let v_bad = t.leaf(&Tensor::zeros(&[4, 3])); // key count mismatch
        assert!(cross_attention(&mut t, x, q, k, v_bad).is_err());
    }
}
