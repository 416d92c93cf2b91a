//! Refinement-mask inference: binarize predicted masks, gate queries by a
//! confidence-and-role class filter, assemble the binary refinement mask,
//! and filter anomaly scores with it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Thing,
    Stuff,
    Road,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyEntry {
    pub class_id: usize,
    pub name: String,
    pub role: Role,
}

/// Class-id → role mapping covering all K known classes, with exactly one
/// road class.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    roles: Vec<Role>,
}

impl Taxonomy {
    pub fn from_entries(entries: &[TaxonomyEntry], num_classes: usize) -> Result<Self> {
        let mut roles = vec![None; num_classes];
        for e in entries {
            if e.class_id >= num_classes {
                return Err(Error::config(format!(
                    "taxonomy class id {} out of range (K={})",
                    e.class_id, num_classes
                )));
            }
            if roles[e.class_id].is_some() {
                return Err(Error::config(format!(
                    "duplicate taxonomy entry for class {}",
                    e.class_id
                )));
            }
            roles[e.class_id] = Some(e.role);
        }
        let roles: Vec<Role> = roles
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| Error::config(format!("class {} has no role", i))))
            .collect::<Result<_>>()?;
        if roles.iter().filter(|&&r| r == Role::Road).count() != 1 {
            return Err(Error::config("taxonomy must have exactly one road class"));
        }
        Ok(Taxonomy { roles })
    }

    pub fn role(&self, class_id: usize) -> Option<Role> {
        self.roles.get(class_id).copied()
    }

    pub fn num_classes(&self) -> usize {
        self.roles.len()
    }

    /// Taxonomy of the synthetic road-scene dataset: 0=road, 1=sky,
    /// 2=building, 3=vegetation, 4=car, 5=person.
    pub fn synthetic_default() -> Self {
        Taxonomy {
            roles: vec![
                Role::Road,
                Role::Stuff,
                Role::Stuff,
                Role::Stuff,
                Role::Thing,
                Role::Thing,
            ],
        }
    }

    pub fn entries(&self, names: &[&str]) -> Vec<TaxonomyEntry> {
        self.roles
            .iter()
            .enumerate()
            .map(|(i, &role)| TaxonomyEntry {
                class_id: i,
                name: names.get(i).unwrap_or(&"").to_string(),
                role,
            })
            .collect()
    }
}

/// Which refinement-mask construction to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMode {
    /// R_M = C̄ · M̄ binarized: keep only pixels covered by some confident
    /// thing-or-road query's binary mask; uncovered pixels get 0.
    Formula,
    /// Zero only pixels covered by a confident stuff-not-road query's
    /// binary mask; every other pixel keeps its score.
    Prose,
}

impl std::fmt::Display for RefineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RefineMode::Formula => "formula",
            RefineMode::Prose => "prose",
        })
    }
}

/// Full refinement-mask construction for one scene's model outputs.
pub fn build_refinement_mask(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    taxonomy: &Taxonomy,
    threshold: f64,
    mode: RefineMode,
) -> Result<Tensor> {
    let m_bar = binarize_masks(mask_logits);
    match mode {
        RefineMode::Formula => {
            let c_bar = class_filter(class_logits, taxonomy, threshold)?;
            refinement_mask(&c_bar, &m_bar)
        }
        RefineMode::Prose => {
            let s_bar = stuff_filter(class_logits, taxonomy, threshold)?;
            refinement_mask_prose(&s_bar, &m_bar)
        }
    }
}

/// Binarize mask logits: 1 where sigmoid > 0.5, i.e. logit > 0 (strict).
pub fn binarize_masks(mask_logits: &Tensor) -> Tensor {
    Tensor::new(
        mask_logits.shape().to_vec(),
        mask_logits
            .data()
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect(),
    )
    .expect("same shape")
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Per query: 1 iff the argmax over K+1 classes is a thing-or-road class
/// with probability above the threshold.
pub fn class_filter(class_logits: &Tensor, taxonomy: &Taxonomy, threshold: f64) -> Result<Tensor> {
    query_filter(class_logits, taxonomy, threshold, |r| {
        matches!(r, Role::Thing | Role::Road)
    })
}

/// Per query: 1 iff the argmax is a confident stuff-not-road class; used by
/// the prose-consistent refinement mode.
pub fn stuff_filter(class_logits: &Tensor, taxonomy: &Taxonomy, threshold: f64) -> Result<Tensor> {
    query_filter(class_logits, taxonomy, threshold, |r| r == Role::Stuff)
}

fn query_filter(
    class_logits: &Tensor,
    taxonomy: &Taxonomy,
    threshold: f64,
    role_ok: impl Fn(Role) -> bool,
) -> Result<Tensor> {
    let shape = class_logits.shape();
    if shape.len() != 2 {
        return Err(Error::shape("class logits must be N×(K+1)"));
    }
    let (n, kp1) = (shape[0], shape[1]);
    if taxonomy.num_classes() + 1 != kp1 {
        return Err(Error::config(format!(
            "taxonomy covers {} classes but logits have {} columns",
            taxonomy.num_classes(),
            kp1
        )));
    }
    let mut out = vec![0.0f32; n];
    for q in 0..n {
        let row: Vec<f64> = (0..kp1).map(|c| class_logits.at2(q, c) as f64).collect();
        let probs = softmax_row(&row);
        let (best, &p) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
            .expect("nonempty row");
        if p > threshold {
            if let Some(role) = taxonomy.role(best) {
                if role_ok(role) {
                    out[q] = 1.0;
                }
            }
        }
    }
    Tensor::new(vec![n], out)
}

/// Binary refinement mask: per pixel, 1 iff some passing query's binary
/// mask covers it (the query-sum binarized at ≥ 1).
pub fn refinement_mask(c_bar: &Tensor, m_bar: &Tensor) -> Result<Tensor> {
    let (sc, sm) = (c_bar.shape(), m_bar.shape());
    if sc.len() != 1 || sm.len() != 2 || sc[0] != sm[0] {
        return Err(Error::shape(format!(
            "filter {:?} vs binary masks {:?}",
            sc, sm
        )));
    }
    let (n, p) = (sm[0], sm[1]);
    let mut out = vec![0.0f32; p];
    for q in 0..n {
        if c_bar.data()[q] == 0.0 {
            continue;
        }
        for j in 0..p {
            if m_bar.at2(q, j) > 0.0 {
                out[j] = 1.0;
            }
        }
    }
    Tensor::new(vec![p], out)
}

/// Prose-consistent refinement mask: 1 everywhere except pixels covered by
/// a confident stuff-not-road query's binary mask.
pub fn refinement_mask_prose(stuff_bar: &Tensor, m_bar: &Tensor) -> Result<Tensor> {
    let covered = refinement_mask(stuff_bar, m_bar)?;
    Tensor::new(
        covered.shape().to_vec(),
        covered.data().iter().map(|&v| 1.0 - v).collect(),
    )
}

/// Elementwise score filtering f^r = r ⊙ f.
pub fn refine_scores(scores: &Tensor, refinement: &Tensor) -> Result<Tensor> {
    if scores.numel() != refinement.numel() {
        return Err(Error::shape(format!(
            "scores {:?} vs refinement {:?}",
            scores.shape(),
            refinement.shape()
        )));
    }
    Tensor::new(
        scores.shape().to_vec(),
        scores
            .data()
            .iter()
            .zip(refinement.data())
            .map(|(a, b)| a * b)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits_for_top(kp1: usize, top: usize, prob: f64) -> Vec<f32> {
        // softmax gives `prob` on `top` and the rest uniform.
        let rest = (1.0 - prob) / (kp1 - 1) as f64;
        (0..kp1)
            .map(|c| if c == top { prob.ln() } else { rest.ln() } as f32)
            .collect()
    }

    #[test]
    fn binarize_boundary() {
        let m = Tensor::new(vec![1, 3], vec![0.0, 3.0, -3.0]).unwrap();
        let b = binarize_masks(&m);
        assert_eq!(b.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn class_filter_cases() {
        let tax = Taxonomy::synthetic_default();
        let kp1 = 7;
        // car (thing, id 4) at 0.99 → 1
        let mut data = logits_for_top(kp1, 4, 0.99);
        // sky (stuff, id 1) at 0.99 → 0
        data.extend(logits_for_top(kp1, 1, 0.99));
        // road (id 0) at 0.90 → 0 (confidence fails)
        data.extend(logits_for_top(kp1, 0, 0.90));
        // road at 0.97 → 1
        data.extend(logits_for_top(kp1, 0, 0.97));
        // φ at 0.99 → 0 (no role)
        data.extend(logits_for_top(kp1, 6, 0.99));
        let c = Tensor::new(vec![5, kp1], data).unwrap();
        let f = class_filter(&c, &tax, 0.95).unwrap();
        assert_eq!(f.data(), &[1.0, 0.0, 0.0, 1.0, 0.0]);

        let s = stuff_filter(&c, &tax, 0.95).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn refinement_mask_cases() {
        // no passing query → all zero
        let c0 = Tensor::zeros(&[2]);
        let m = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let r = refinement_mask(&c0, &m).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 0.0]);

        // one passing query covering everything → all one
        let c1 = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let full = Tensor::new(vec![2, 3], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let r = refinement_mask(&c1, &full).unwrap();
        assert_eq!(r.data(), &[1.0, 1.0, 1.0]);

        // overlapping passing queries stay binary
        let c2 = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let r = refinement_mask(&c2, &m).unwrap();
        assert_eq!(r.data(), &[1.0, 1.0, 1.0]);
        assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn prose_mode_complements_coverage() {
        let stuff = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let m = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = refinement_mask_prose(&stuff, &m).unwrap();
        // only query 0 is confident stuff; it covers pixel 0
        assert_eq!(r.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn refine_scores_cases() {
        let f = Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        let ones = Tensor::full(&[4], 1.0);
        assert_eq!(refine_scores(&f, &ones).unwrap().data(), f.data());
        let zeros = Tensor::zeros(&[4]);
        assert!(refine_scores(&f, &zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let mixed = Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let r = refine_scores(&f, &mixed).unwrap();
        for (i, &v) in r.data().iter().enumerate() {
            assert!(v == 0.0 || v == f.data()[i]);
        }
    }

    #[test]
    fn refined_scores_never_exceed_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let f = Tensor::new(
            vec![4, 4],
            (0..16).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let r = Tensor::new(
            vec![16],
            (0..16)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let fr = refine_scores(&f, &r).unwrap();
        for (a, b) in fr.data().iter().zip(f.data()) {
            assert!(a <= b);
        }
    }

    #[test]
    fn taxonomy_validation() {
        let entries = vec![
            TaxonomyEntry {
                class_id: 0,
                name: "road".into(),
                role: Role::Road,
            },
            TaxonomyEntry {
                class_id: 1,
                name: "sky".into(),
                role: Role::Stuff,
            },
        ];
        assert!(Taxonomy::from_entries(&entries, 2).is_ok());
        // missing class
        assert!(Taxonomy::from_entries(&entries, 3).is_err());
        // no road
        let no_road = vec![TaxonomyEntry {
            class_id: 0,
            name: "sky".into(),
            role: Role::Stuff,
        }];
        assert!(Taxonomy::from_entries(&no_road, 1).is_err());
        // two roads
        let two = vec![
            TaxonomyEntry {
                class_id: 0,
                name: "r1".into(),
                role: Role::Road,
            },
            TaxonomyEntry {
                class_id: 1,
                name: "r2".into(),
                role: Role::Road,
            },
        ];
        assert!(Taxonomy::from_entries(&two, 2).is_err());
    }
}
