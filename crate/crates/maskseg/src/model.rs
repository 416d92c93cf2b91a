//! Toy mask-classification model: a strided patch-average encoder, a pixel
//! decoder producing per-pixel embeddings, and an L-layer transformer
//! decoder with learnable queries emitting class logits and mask logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    build_attention_masks, cross_attention, global_masked_attention, masked_attention,
};
use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Attention mechanism used inside the transformer decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    CA,
    MA,
    GMA,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ca" => Ok(AttentionKind::CA),
            "ma" => Ok(AttentionKind::MA),
            "gma" => Ok(AttentionKind::GMA),
            other => Err(Error::config(format!("unknown attention kind '{}'", other))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AttentionKind::CA => "ca",
            AttentionKind::MA => "ma",
            AttentionKind::GMA => "gma",
        };
        write!(f, "{}", s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub num_classes: usize,
    pub attention: AttentionKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 48,
            width: 64,
            embed_dim: 32,
            num_queries: 8,
            decoder_layers: 3,
            num_classes: 6,
            attention: AttentionKind::GMA,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::config(format!(
                "image size {}x{} must be divisible by 8",
                self.height, self.width
            )));
        }
        if self.decoder_layers < 1 {
            return Err(Error::config("decoder_layers must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if self.num_queries == 0 || self.embed_dim == 0 {
            return Err(Error::config("num_queries and embed_dim must be positive"));
        }
        Ok(())
    }
}

/// Final class logits, mask logits, and per-decoder-layer mask logits.
#[derive(Debug, Clone)]
pub struct QueryOutput {
    /// N×(K+1); the last column is the no-object class φ.
    pub class_logits: Tensor,
    /// N×(H·W).
    pub mask_logits: Tensor,
    /// One N×(H·W) tensor per decoder layer.
    pub per_layer_mask_logits: Vec<Tensor>,
}

/// Tape node ids of one differentiable forward pass.
pub struct ForwardPass {
    pub class_logits: TensorId,
    pub mask_logits: TensorId,
    pub per_layer_mask_logits: Vec<TensorId>,
    /// Leaf ids aligned with `Model::params` order.
    pub param_ids: Vec<TensorId>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    /// Ordered named parameters; the order is the checkpoint and optimizer
    /// state order.
    pub params: Vec<(String, Tensor)>,
}

/// Uniform initialization half-width a = 1/√fan_in.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| rng.gen_range(-bound..bound) as f32)
            .collect(),
    )
    .expect("shape/data consistent")
}

pub fn init_model(config: ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ce = config.embed_dim;
    let ff = 2 * ce;
    let kp1 = config.num_classes + 1;
    let mut params: Vec<(String, Tensor)> = Vec::new();

    for lvl in 0..3 {
        params.push((
            format!("enc.w{}", lvl),
            uniform(&mut rng, &[3, ce], init_bound(3)),
        ));
        params.push((format!("enc.b{}", lvl), Tensor::zeros(&[ce])));
    }
    params.push(("pix.w".into(), uniform(&mut rng, &[ce, ce], init_bound(ce))));
    params.push(("pix.b".into(), Tensor::zeros(&[ce])));
    params.push((
        "query".into(),
        uniform(&mut rng, &[config.num_queries, ce], init_bound(ce)),
    ));
    for l in 0..config.decoder_layers {
        params.push((
            format!("dec{}.kw", l),
            uniform(&mut rng, &[ce, ce], init_bound(ce)),
        ));
        params.push((
            format!("dec{}.vw", l),
            uniform(&mut rng, &[ce, ce], init_bound(ce)),
        ));
        params.push((format!("dec{}.vb", l), Tensor::zeros(&[ce])));
        params.push((
            format!("dec{}.ffn_w1", l),
            uniform(&mut rng, &[ce, ff], init_bound(ce)),
        ));
        params.push((format!("dec{}.ffn_b1", l), Tensor::zeros(&[ff])));
        params.push((
            format!("dec{}.ffn_w2", l),
            uniform(&mut rng, &[ff, ce], init_bound(ff)),
        ));
        params.push((format!("dec{}.ffn_b2", l), Tensor::zeros(&[ce])));
    }
    params.push(("cls.w".into(), uniform(&mut rng, &[ce, kp1], init_bound(ce))));
    params.push(("cls.b".into(), Tensor::zeros(&[kp1])));

    Ok(Model { config, params })
}

impl Model {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    fn param_index(&self, ids: &[TensorId], name: &str) -> TensorId {
        let i = self
            .params
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("parameter {} missing", name));
        ids[i]
    }

    /// Differentiable forward pass; image is 3×H×W.
    pub fn forward(&self, t: &mut Tape, image: &Tensor) -> Result<ForwardPass> {
        self.forward_inner(t, image, false)
    }

    /// Forward with every per-layer prior mask probability complemented;
    /// used to verify the complement invariance of global masked attention.
    pub fn forward_complemented_priors(
        &self,
        t: &mut Tape,
        image: &Tensor,
    ) -> Result<ForwardPass> {
        self.forward_inner(t, image, true)
    }

    fn forward_inner(
        &self,
        t: &mut Tape,
        image: &Tensor,
        complement_priors: bool,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let (h, w) = (cfg.height, cfg.width);
        if image.shape() != [3, h, w] {
            return Err(Error::shape(format!(
                "image {:?}, expected [3, {}, {}]",
                image.shape(),
                h,
                w
            )));
        }
        let param_ids: Vec<TensorId> = self.params.iter().map(|(_, p)| t.leaf(p)).collect();
        let ids = &param_ids;

        // Image as (H·W)×3 pixels.
        let mut pix = vec![0.0f32; h * w * 3];
        for c in 0..3 {
            for p in 0..h * w {
                pix[p * 3 + c] = image.data()[c * h * w + p];
            }
        }
        let pixels = t.leaf(&Tensor::new(vec![h * w, 3], pix)?);

        // Encoder: patch averages at 1/2, 1/4, 1/8 plus per-level affine maps.
        let mut pyramid = Vec::new(); // (features (P_l×C_e), h_l, w_l)
        for lvl in 0..3 {
            let f = 2usize << lvl; // 2, 4, 8
            let pooled = t.avg_pool(pixels, h, w, f)?;
            let wl = self.param_index(ids, &format!("enc.w{}", lvl));
            let bl = self.param_index(ids, &format!("enc.b{}", lvl));
            let proj = t.matmul(pooled, wl)?;
            let feat = t.add_row_bias(proj, bl)?;
            pyramid.push((feat, h / f, w / f));
        }

        // Pixel decoder: upsample each level to full resolution, sum, project.
        let mut summed: Option<TensorId> = None;
        for &(feat, hl, wl) in &pyramid {
            let up = t.upsample_bilinear(feat, hl, wl, h, w)?;
            summed = Some(match summed {
                Some(acc) => t.add(acc, up)?,
                None => up,
            });
        }
        let summed = summed.expect("three pyramid levels");
        let pw = self.param_index(ids, "pix.w");
        let pb = self.param_index(ids, "pix.b");
        let proj = t.matmul(summed, pw)?;
        let emb = t.add_row_bias(proj, pb)?; // (H·W)×C_e

        // Transformer decoder.
        let mut queries = self.param_index(ids, "query");
        // First-layer prior: mask head (query·embᵀ) on the initial queries.
        let mut prior_logits = t.matmul_nt(queries, emb)?;
        let mut per_layer_mask_logits = Vec::new();
        for l in 0..cfg.decoder_layers {
            let lvl = l % 3;
            let (feat, hl, wl) = pyramid[lvl];
            let kw = self.param_index(ids, &format!("dec{}.kw", l));
            let vw = self.param_index(ids, &format!("dec{}.vw", l));
            let vb = self.param_index(ids, &format!("dec{}.vb", l));
            let k = t.matmul(feat, kw)?;
            let v0 = t.matmul(feat, vw)?;
            let v = t.add_row_bias(v0, vb)?;

            // Detached prior mask probabilities pooled to the key resolution.
            let mut prior = prior_probs_at_level(&t.value(prior_logits), h, w, hl, wl);
            if complement_priors {
                for v in prior.data_mut() {
                    *v = 1.0 - *v;
                }
            }
            let attn_out = match cfg.attention {
                AttentionKind::CA => cross_attention(t, queries, queries, k, v)?,
                AttentionKind::MA => {
                    let masks = build_attention_masks(&prior)?;
                    masked_attention(t, queries, queries, k, v, &masks.foreground)?
                }
                AttentionKind::GMA => {
                    let masks = build_attention_masks(&prior)?;
                    global_masked_attention(t, queries, queries, k, v, &masks)?
                }
            };

            // Feed-forward block with residual.
            let w1 = self.param_index(ids, &format!("dec{}.ffn_w1", l));
            let b1 = self.param_index(ids, &format!("dec{}.ffn_b1", l));
            let w2 = self.param_index(ids, &format!("dec{}.ffn_w2", l));
            let b2 = self.param_index(ids, &format!("dec{}.ffn_b2", l));
            let h1 = t.matmul(attn_out, w1)?;
            let h1b = t.add_row_bias(h1, b1)?;
            let act = t.relu(h1b);
            let h2 = t.matmul(act, w2)?;
            let h2b = t.add_row_bias(h2, b2)?;
            queries = t.add(attn_out, h2b)?;

            let mask_logits = t.matmul_nt(queries, emb)?;
            per_layer_mask_logits.push(mask_logits);
            prior_logits = mask_logits;
        }

        let cw = self.param_index(ids, "cls.w");
        let cb = self.param_index(ids, "cls.b");
        let cl0 = t.matmul(queries, cw)?;
        let class_logits = t.add_row_bias(cl0, cb)?;
        let mask_logits = *per_layer_mask_logits.last().expect("L >= 1 layers");

        Ok(ForwardPass {
            class_logits,
            mask_logits,
            per_layer_mask_logits,
            param_ids,
        })
    }

    /// Inference-only forward returning plain tensors.
    pub fn infer(&self, image: &Tensor) -> Result<QueryOutput> {
        let mut t = Tape::new();
        let fp = self.forward(&mut t, image)?;
        Ok(QueryOutput {
            class_logits: t.value(fp.class_logits),
            mask_logits: t.value(fp.mask_logits),
            per_layer_mask_logits: fp
                .per_layer_mask_logits
                .iter()
                .map(|&id| t.value(id))
                .collect(),
        })
    }
}

/// Checkpoint manifest: the model config plus an ordered list of parameter
/// tensors stored as sibling MTEN files, with an optional parent reference
/// (e.g. the phase-1 checkpoint a fine-tuned model started from).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// Write a checkpoint directory: `manifest.json` plus one MTEN file per
/// parameter, in parameter order.
pub fn save_checkpoint(
    dir: impl AsRef<std::path::Path>,
    model: &Model,
    parent: Option<&str>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(model.params.len());
    for (i, (name, tensor)) in model.params.iter().enumerate() {
        let file = format!("{:03}.{}.mten", i, name);
        crate::mten::write_f32(dir.join(&file), tensor)?;
        entries.push(ParamEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        params: entries,
        parent: parent.map(|s| s.to_string()),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<std::path::Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest.config.validate()?;
    let mut params = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let tensor = crate::mten::read_f32(dir.join(&entry.file))?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::data(format!(
                "checkpoint param '{}' has shape {:?}, manifest says {:?}",
                entry.name,
                tensor.shape(),
                entry.shape
            )));
        }
        params.push((entry.name.clone(), tensor));
    }
    let reference = init_model(manifest.config.clone())?;
    if reference.params.len() != params.len()
        || reference
            .params
            .iter()
            .zip(&params)
            .any(|(a, b)| a.0 != b.0 || a.1.shape() != b.1.shape())
    {
        return Err(Error::data("checkpoint parameters do not match the config"));
    }
    Ok(Model {
        config: manifest.config,
        params,
    })
}

/// Read only the manifest of a checkpoint directory.
pub fn read_checkpoint_manifest(dir: impl AsRef<std::path::Path>) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    Ok(serde_json::from_str(&std::fs::read_to_string(
        dir.join("manifest.json"),
    )?)?)
}

/// Sigmoid of full-resolution mask logits, average-pooled to a pyramid
/// level's resolution. Detached: a plain tensor, not a tape node.
fn prior_probs_at_level(
    mask_logits: &Tensor,
    h: usize,
    w: usize,
    hl: usize,
    wl: usize,
) -> Tensor {
    let n = mask_logits.shape()[0];
    let f = h / hl;
    debug_assert_eq!(w / wl, f);
    let mut out = vec![0.0f32; n * hl * wl];
    let inv = 1.0 / (f * f) as f64;
    for q in 0..n {
        let row = &mask_logits.data()[q * h * w..(q + 1) * h * w];
        for oy in 0..hl {
            for ox in 0..wl {
                let mut s = 0.0f64;
                for dy in 0..f {
                    for dx in 0..f {
                        let v = row[(oy * f + dy) * w + ox * f + dx] as f64;
                        s += 1.0 / (1.0 + (-v).exp());
                    }
                }
                out[q * hl * wl + oy * wl + ox] = (s * inv) as f32;
            }
        }
    }
    Tensor::new(vec![n, hl * wl], out).expect("pooled shape")
}
