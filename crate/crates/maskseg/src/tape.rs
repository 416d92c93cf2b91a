//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Forward values and gradients are held in f64 inside the tape so that
//! central finite differences at eps = 1e-3 resolve gradients to the 1e-4
//! tolerances the test suite pins; tensors at rest (inputs, checkpoints,
//! MTEN files) stay f32.
//!
//! Every primitive records its inputs; `backward` replays the tape in
//! reverse, accumulating one gradient per node. Tapes are single-threaded
//! values, created per forward/backward pass and dropped afterwards.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type TensorId = usize;

enum Op {
    Leaf,
    /// (m×k)·(k×n)
    Matmul { a: TensorId, b: TensorId },
    /// (m×k)·(n×k)ᵀ
    MatmulNt { a: TensorId, b: TensorId },
    /// (k×m)ᵀ·(k×n)
    MatmulTn { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    AddScalar { a: TensorId },
    Scale { a: TensorId, c: f64 },
    /// a: R×C plus a C-vector bias broadcast over rows.
    AddRowBias { a: TensorId, bias: TensorId },
    Sigmoid { a: TensorId },
    Relu { a: TensorId },
    /// Softmax over the last axis with an optional additive constant mask
    /// (entries 0 or -inf). A fully-masked row maps to the all-zero row.
    SoftmaxRows { a: TensorId },
    LogSoftmaxRows { a: TensorId },
    Transpose { a: TensorId },
    SliceCols { a: TensorId, start: usize, end: usize },
    /// rows×cols -> cols, max over rows; argmax recorded for backward.
    MaxAxis0 { a: TensorId, argmax: Vec<usize> },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    Clamp { a: TensorId, lo: f64, hi: f64 },
    Ln { a: TensorId },
    /// Elementwise product with a constant (non-differentiated) tensor.
    MulConst { a: TensorId, c: Vec<f64> },
    /// Stable binary cross-entropy from logits, reduced to a scalar.
    BceLogits {
        logits: TensorId,
        targets: Vec<f64>,
        weights: Option<Vec<f64>>,
        denom: f64,
    },
    /// (in_h·in_w)×C -> (out_h·out_w)×C, bilinear per channel column.
    Upsample {
        a: TensorId,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },
    /// (in_h·in_w)×C -> ((in_h/f)·(in_w/f))×C, mean over f×f blocks.
    AvgPool {
        a: TensorId,
        in_h: usize,
        in_w: usize,
        factor: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by tape node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient w.r.t. a node, zero-filled if the loss does not reach it.
    pub fn wrt_f64(&self, id: TensorId) -> Vec<f64> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[id].iter().product()],
        }
    }

    pub fn wrt(&self, id: TensorId) -> Tensor {
        Tensor::from_f64(self.shapes[id].clone(), &self.wrt_f64(id)).expect("gradient shape")
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap();
    let rows = shape.iter().rev().skip(1).product::<usize>().max(1);
    (rows, cols)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> TensorId {
        self.nodes.push(Node { shape, value, op });
        self.nodes.len() - 1
    }

    fn check(&self, id: TensorId) -> Result<()> {
        if id >= self.nodes.len() {
            Err(Error::Graph(format!("tensor id {} not on tape", id)))
        } else {
            Ok(())
        }
    }

    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data_f64(), Op::Leaf)
    }

    pub fn leaf_f64(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value_f64(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn value(&self, id: TensorId) -> Tensor {
        Tensor::from_f64(self.nodes[id].shape.clone(), &self.nodes[id].value)
            .expect("node shape consistent")
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    // ── primitives ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        for i in 0..m {
            for p in 0..k {
                let aip = va[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &vb[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b }))
    }

    /// a·bᵀ for a: m×k, b: n×k.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(format!("matmul_nt {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        for i in 0..m {
            let arow = &va[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &vb[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += arow[p] * brow[p];
                }
                out[i * n + j] = s;
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatmulNt { a, b }))
    }

    /// aᵀ·b for a: k×m, b: k×n.
    pub fn matmul_tn(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape(format!("matmul_tn {:?} x {:?}", sa, sb)));
        }
        let (k, m, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        for p in 0..k {
            let arow = &va[p * m..(p + 1) * m];
            let brow = &vb[p * n..(p + 1) * n];
            for i in 0..m {
                let aip = arow[i];
                if aip == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatmulTn { a, b }))
    }

    fn binary_same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa != sb {
            return Err(Error::shape(format!("{} {:?} vs {:?}", what, sa, sb)));
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_same_shape(a, b, "add")?;
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(shape, v, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_same_shape(a, b, "sub")?;
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(shape, v, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_same_shape(a, b, "mul")?;
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(shape, v, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_same_shape(a, b, "div")?;
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x / y)
            .collect();
        Ok(self.push(shape, v, Op::Div { a, b }))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.nodes[a].shape.clone();
        let v: Vec<f64> = self.nodes[a].value.iter().map(|x| x + c).collect();
        self.push(shape, v, Op::AddScalar { a })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.nodes[a].shape.clone();
        let v: Vec<f64> = self.nodes[a].value.iter().map(|x| x * c).collect();
        self.push(shape, v, Op::Scale { a, c })
    }

    pub fn add_row_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let sa = self.nodes[a].shape.clone();
        let sb = &self.nodes[bias].shape;
        let (rows, cols) = rows_cols(&sa);
        if sb.len() != 1 || sb[0] != cols {
            return Err(Error::shape(format!("row bias {:?} for {:?}", sb, sa)));
        }
        let mut v = self.nodes[a].value.clone();
        let bv = &self.nodes[bias].value;
        for r in 0..rows {
            for c in 0..cols {
                v[r * cols + c] += bv[c];
            }
        }
        Ok(self.push(sa, v, Op::AddRowBias { a, bias }))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a].shape.clone();
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(shape, v, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a].shape.clone();
        let v: Vec<f64> = self.nodes[a].value.iter().map(|&x| x.max(0.0)).collect();
        self.push(shape, v, Op::Relu { a })
    }

    /// Softmax along the last axis with an optional additive mask (entries 0
    /// or -inf). Rows whose masked logits are all -inf become all-zero.
    pub fn softmax_masked(&mut self, a: TensorId, mask: Option<&Tensor>) -> Result<TensorId> {
        let shape = self.nodes[a].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        if self.nodes[a].value.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("NaN input to softmax"));
        }
        let mask_v: Option<Vec<f64>> = match mask {
            Some(m) => {
                if m.shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "softmax mask {:?} for logits {:?}",
                        m.shape(),
                        shape
                    )));
                }
                Some(m.data_f64())
            }
            None => None,
        };
        let va = &self.nodes[a].value;
        let mut out = vec![0.0; va.len()];
        for r in 0..rows {
            let base = r * cols;
            let mut mx = f64::NEG_INFINITY;
            for c in 0..cols {
                let l = va[base + c] + mask_v.as_ref().map_or(0.0, |m| m[base + c]);
                mx = mx.max(l);
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully-masked row stays zero
            }
            let mut sum = 0.0;
            for c in 0..cols {
                let l = va[base + c] + mask_v.as_ref().map_or(0.0, |m| m[base + c]);
                let e = if l == f64::NEG_INFINITY {
                    0.0
                } else {
                    (l - mx).exp()
                };
                out[base + c] = e;
                sum += e;
            }
            for c in 0..cols {
                out[base + c] /= sum;
            }
        }
        Ok(self.push(shape, out, Op::SoftmaxRows { a }))
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        self.softmax_masked(a, None)
    }

    /// Softmax over one axis of a 2-d tensor. Axis 0 goes through a
    /// transpose pair.
    pub fn softmax_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        match (self.nodes[a].shape.len(), axis) {
            (2, 1) | (1, 0) => self.softmax_rows(a),
            (2, 0) => {
                let t = self.transpose(a)?;
                let s = self.softmax_rows(t)?;
                self.transpose(s)
            }
            (nd, ax) => Err(Error::shape(format!("softmax axis {} of {}-d", ax, nd))),
        }
    }

    pub fn log_softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.nodes[a].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        if self.nodes[a].value.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("NaN input to log-softmax"));
        }
        let va = &self.nodes[a].value;
        let mut out = vec![0.0; va.len()];
        for r in 0..rows {
            let base = r * cols;
            let mx = va[base..base + cols].iter().cloned().fold(f64::MIN, f64::max);
            let lse: f64 = va[base..base + cols]
                .iter()
                .map(|&x| (x - mx).exp())
                .sum::<f64>()
                .ln()
                + mx;
            for c in 0..cols {
                out[base + c] = va[base + c] - lse;
            }
        }
        Ok(self.push(shape, out, Op::LogSoftmaxRows { a }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.nodes[a].shape.clone();
        if sa.len() != 2 {
            return Err(Error::shape(format!("transpose of {:?}", sa)));
        }
        let (r, c) = (sa[0], sa[1]);
        let va = &self.nodes[a].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose { a }))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let sa = self.nodes[a].shape.clone();
        if sa.len() != 2 || end > sa[1] || start >= end {
            return Err(Error::shape(format!(
                "slice cols {}..{} of {:?}",
                start, end, sa
            )));
        }
        let (r, c) = (sa[0], sa[1]);
        let w = end - start;
        let va = &self.nodes[a].value;
        let mut out = vec![0.0; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&va[i * c + start..i * c + end]);
        }
        Ok(self.push(vec![r, w], out, Op::SliceCols { a, start, end }))
    }

    /// rows×cols -> cols vector of column maxima (first row wins ties).
    pub fn max_axis0(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.nodes[a].shape.clone();
        if sa.len() != 2 {
            return Err(Error::shape(format!("max_axis0 of {:?}", sa)));
        }
        let (r, c) = (sa[0], sa[1]);
        let va = &self.nodes[a].value;
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for i in 0..r {
            for j in 0..c {
                let v = va[i * c + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(vec![c], out, Op::MaxAxis0 { a, argmax }))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a].value.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a].value.len() as f64;
        let s: f64 = self.nodes[a].value.iter().sum::<f64>() / n;
        self.push(vec![1], vec![s], Op::MeanAll { a })
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let shape = self.nodes[a].shape.clone();
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .map(|&x| x.clamp(lo, hi))
            .collect();
        self.push(shape, v, Op::Clamp { a, lo, hi })
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a].shape.clone();
        let v: Vec<f64> = self.nodes[a].value.iter().map(|&x| x.ln()).collect();
        self.push(shape, v, Op::Ln { a })
    }

    pub fn mul_const(&mut self, a: TensorId, c: &Tensor) -> Result<TensorId> {
        let shape = self.nodes[a].shape.clone();
        if c.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "mul_const {:?} vs {:?}",
                c.shape(),
                shape
            )));
        }
        let cv = c.data_f64();
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&cv)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(shape, v, Op::MulConst { a, c: cv }))
    }

    /// Mean binary cross-entropy from logits, in the stable logit form.
    /// With weights, the reduction is a weighted mean over the weight sum.
    pub fn bce_with_logits(
        &mut self,
        logits: TensorId,
        targets: &Tensor,
        weights: Option<&Tensor>,
    ) -> Result<TensorId> {
        let shape = self.nodes[logits].shape.clone();
        if targets.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "bce targets {:?} vs logits {:?}",
                targets.shape(),
                shape
            )));
        }
        let tv = targets.data_f64();
        let wv = match weights {
            Some(w) => {
                if w.shape() != shape.as_slice() {
                    return Err(Error::shape("bce weights shape"));
                }
                Some(w.data_f64())
            }
            None => None,
        };
        let denom = match &wv {
            Some(w) => w.iter().sum::<f64>().max(1e-12),
            None => tv.len() as f64,
        };
        let va = &self.nodes[logits].value;
        let mut total = 0.0;
        for i in 0..va.len() {
            let x = va[i];
            let t = tv[i];
            // max(x,0) - x t + ln(1 + e^{-|x|})
            let l = x.max(0.0) - x * t + (-(x.abs())).exp().ln_1p();
            let w = wv.as_ref().map_or(1.0, |w| w[i]);
            total += w * l;
        }
        Ok(self.push(
            vec![1],
            vec![total / denom],
            Op::BceLogits {
                logits,
                targets: tv,
                weights: wv,
                denom,
            },
        ))
    }

    /// Bilinear upsampling of per-pixel channels: (in_h·in_w)×C to
    /// (out_h·out_w)×C. Interpolation weights sum to one per output pixel,
    /// so constants are preserved.
    pub fn upsample_bilinear(
        &mut self,
        a: TensorId,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId> {
        let sa = self.nodes[a].shape.clone();
        if sa.len() != 2 || sa[0] != in_h * in_w {
            return Err(Error::shape(format!(
                "upsample input {:?} vs {}x{}",
                sa, in_h, in_w
            )));
        }
        let c = sa[1];
        let taps_h = axis_taps(in_h, out_h);
        let taps_w = axis_taps(in_w, out_w);
        let va = &self.nodes[a].value;
        let mut out = vec![0.0; out_h * out_w * c];
        for oy in 0..out_h {
            let (y0, y1, wy) = taps_h[oy];
            for ox in 0..out_w {
                let (x0, x1, wx) = taps_w[ox];
                let obase = (oy * out_w + ox) * c;
                for ((iy, fy), (ix, fx)) in [(y0, 1.0 - wy), (y1, wy)]
                    .iter()
                    .flat_map(|&p| [(x0, 1.0 - wx), (x1, wx)].map(move |q| (p, q)))
                {
                    let w = fy * fx;
                    if w == 0.0 {
                        continue;
                    }
                    let ibase = (iy * in_w + ix) * c;
                    for ch in 0..c {
                        out[obase + ch] += w * va[ibase + ch];
                    }
                }
            }
        }
        Ok(self.push(
            vec![out_h * out_w, c],
            out,
            Op::Upsample {
                a,
                in_h,
                in_w,
                out_h,
                out_w,
            },
        ))
    }

    /// Mean over factor×factor blocks: (in_h·in_w)×C to reduced resolution.
    pub fn avg_pool(
        &mut self,
        a: TensorId,
        in_h: usize,
        in_w: usize,
        factor: usize,
    ) -> Result<TensorId> {
        let sa = self.nodes[a].shape.clone();
        if sa.len() != 2 || sa[0] != in_h * in_w {
            return Err(Error::shape(format!(
                "avg_pool input {:?} vs {}x{}",
                sa, in_h, in_w
            )));
        }
        if in_h % factor != 0 || in_w % factor != 0 {
            return Err(Error::shape(format!(
                "avg_pool {}x{} not divisible by {}",
                in_h, in_w, factor
            )));
        }
        let c = sa[1];
        let (oh, ow) = (in_h / factor, in_w / factor);
        let va = &self.nodes[a].value;
        let mut out = vec![0.0; oh * ow * c];
        let inv = 1.0 / (factor * factor) as f64;
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = (oy * ow + ox) * c;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let ibase = ((oy * factor + dy) * in_w + ox * factor + dx) * c;
                        for ch in 0..c {
                            out[obase + ch] += va[ibase + ch] * inv;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![oh * ow, c],
            out,
            Op::AvgPool {
                a,
                in_h,
                in_w,
                factor,
            },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar node w.r.t. every node on the tape.
    pub fn backward(&self, loss: TensorId) -> Result<Grads> {
        self.check(loss)?;
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::Graph("backward target must be scalar".into()));
        }
        if !self.nodes[loss].value[0].is_finite() {
            return Err(Error::numeric("non-finite loss in backward"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            macro_rules! acc {
                ($pid:expr, $f:expr) => {{
                    let pid = $pid;
                    let n: usize = self.nodes[pid].shape.iter().product();
                    let slot = grads[pid].get_or_insert_with(|| vec![0.0; n]);
                    $f(slot);
                }};
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep leaf gradient for readout
                    continue;
                }
                Op::Matmul { a, b } => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let k = self.nodes[*a].shape[1];
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    acc!(*a, |ga: &mut Vec<f64>| {
                        // dA = G · Bᵀ
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * vb[p * n + j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    });
                    acc!(*b, |gb: &mut Vec<f64>| {
                        // dB = Aᵀ · G
                        for p in 0..k {
                            for i in 0..m {
                                let aip = va[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    });
                }
                Op::MatmulNt { a, b } => {
                    // out = A·Bᵀ, A: m×k, B: n×k
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let k = self.nodes[*a].shape[1];
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    acc!(*a, |ga: &mut Vec<f64>| {
                        // dA = G · B
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    ga[i * k + p] += gij * vb[j * k + p];
                                }
                            }
                        }
                    });
                    acc!(*b, |gb: &mut Vec<f64>| {
                        // dB = Gᵀ · A
                        for j in 0..n {
                            for i in 0..m {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    gb[j * k + p] += gij * va[i * k + p];
                                }
                            }
                        }
                    });
                }
                Op::MatmulTn { a, b } => {
                    // out = Aᵀ·B, A: k×m, B: k×n
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let k = self.nodes[*a].shape[0];
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    acc!(*a, |ga: &mut Vec<f64>| {
                        // dA = B · Gᵀ  (k×m)
                        for p in 0..k {
                            for i in 0..m {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += vb[p * n + j] * g[i * n + j];
                                }
                                ga[p * m + i] += s;
                            }
                        }
                    });
                    acc!(*b, |gb: &mut Vec<f64>| {
                        // dB = A · G  (k×n)
                        for p in 0..k {
                            for i in 0..m {
                                let aip = va[p * m + i];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    });
                }
                Op::Add { a, b } => {
                    acc!(*a, |ga: &mut Vec<f64>| for (x, y) in ga.iter_mut().zip(&g) {
                        *x += y
                    });
                    acc!(*b, |gb: &mut Vec<f64>| for (x, y) in gb.iter_mut().zip(&g) {
                        *x += y
                    });
                }
                Op::Sub { a, b } => {
                    acc!(*a, |ga: &mut Vec<f64>| for (x, y) in ga.iter_mut().zip(&g) {
                        *x += y
                    });
                    acc!(*b, |gb: &mut Vec<f64>| for (x, y) in gb.iter_mut().zip(&g) {
                        *x -= y
                    });
                }
                Op::Mul { a, b } => {
                    let vb = self.nodes[*b].value.clone();
                    let va = self.nodes[*a].value.clone();
                    acc!(*a, |ga: &mut Vec<f64>| for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i]
                    });
                    acc!(*b, |gb: &mut Vec<f64>| for i in 0..gb.len() {
                        gb[i] += g[i] * va[i]
                    });
                }
                Op::Div { a, b } => {
                    let vb = self.nodes[*b].value.clone();
                    let va = self.nodes[*a].value.clone();
                    acc!(*a, |ga: &mut Vec<f64>| for i in 0..ga.len() {
                        ga[i] += g[i] / vb[i]
                    });
                    acc!(*b, |gb: &mut Vec<f64>| for i in 0..gb.len() {
                        gb[i] -= g[i] * va[i] / (vb[i] * vb[i])
                    });
                }
                Op::AddScalar { a } => {
                    acc!(*a, |ga: &mut Vec<f64>| for (x, y) in ga.iter_mut().zip(&g) {
                        *x += y
                    });
                }
                Op::Scale { a, c } => {
                    let c = *c;
                    acc!(*a, |ga: &mut Vec<f64>| for (x, y) in ga.iter_mut().zip(&g) {
                        *x += c * y
                    });
                }
                Op::AddRowBias { a, bias } => {
                    let (rows, cols) = rows_cols(&self.nodes[*a].shape);
                    acc!(*a, |ga: &mut Vec<f64>| for (x, y) in ga.iter_mut().zip(&g) {
                        *x += y
                    });
                    acc!(*bias, |gb: &mut Vec<f64>| {
                        for r in 0..rows {
                            for c in 0..cols {
                                gb[c] += g[r * cols + c];
                            }
                        }
                    });
                }
                Op::Sigmoid { a } => {
                    let y = node.value.clone();
                    acc!(*a, |ga: &mut Vec<f64>| for i in 0..ga.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i])
                    });
                }
                Op::Relu { a } => {
                    let va = self.nodes[*a].value.clone();
                    acc!(*a, |ga: &mut Vec<f64>| for i in 0..ga.len() {
                        if va[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    });
                }
                Op::SoftmaxRows { a } => {
                    let y = &node.value;
                    let (rows, cols) = rows_cols(&node.shape);
                    acc!(*a, |ga: &mut Vec<f64>| {
                        for r in 0..rows {
                            let base = r * cols;
                            let dot: f64 =
                                (0..cols).map(|c| g[base + c] * y[base + c]).sum();
                            for c in 0..cols {
                                ga[base + c] += y[base + c] * (g[base + c] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmaxRows { a } => {
                    let y = &node.value;
                    let (rows, cols) = rows_cols(&node.shape);
                    acc!(*a, |ga: &mut Vec<f64>| {
                        for r in 0..rows {
                            let base = r * cols;
                            let gsum: f64 = (0..cols).map(|c| g[base + c]).sum();
                            for c in 0..cols {
                                ga[base + c] += g[base + c] - y[base + c].exp() * gsum;
                            }
                        }
                    });
                }
                Op::Transpose { a } => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    acc!(*a, |ga: &mut Vec<f64>| {
                        for i in 0..r {
                            for j in 0..c {
                                ga[j * r + i] += g[i * c + j];
                            }
                        }
                    });
                }
                Op::SliceCols { a, start, end } => {
                    let c_full = self.nodes[*a].shape[1];
                    let w = end - start;
                    let rows = node.shape[0];
                    let start = *start;
                    acc!(*a, |ga: &mut Vec<f64>| {
                        for i in 0..rows {
                            for j in 0..w {
                                ga[i * c_full + start + j] += g[i * w + j];
                            }
                        }
                    });
                }
                Op::MaxAxis0 { a, argmax } => {
                    let cols = node.shape[0];
                    let c_in = self.nodes[*a].shape[1];
                    debug_assert_eq!(cols, c_in);
                    acc!(*a, |ga: &mut Vec<f64>| for j in 0..cols {
                        ga[argmax[j] * c_in + j] += g[j]
                    });
                }
                Op::SumAll { a } => {
                    let gv = g[0];
                    acc!(*a, |ga: &mut Vec<f64>| for x in ga.iter_mut() {
                        *x += gv
                    });
                }
                Op::MeanAll { a } => {
                    let n = self.nodes[*a].value.len() as f64;
                    let gv = g[0] / n;
                    acc!(*a, |ga: &mut Vec<f64>| for x in ga.iter_mut() {
                        *x += gv
                    });
                }
                Op::Clamp { a, lo, hi } => {
                    let va = self.nodes[*a].value.clone();
                    let (lo, hi) = (*lo, *hi);
                    acc!(*a, |ga: &mut Vec<f64>| for i in 0..ga.len() {
                        if va[i] >= lo && va[i] <= hi {
                            ga[i] += g[i];
                        }
                    });
                }
                Op::Ln { a } => {
                    let va = self.nodes[*a].value.clone();
                    acc!(*a, |ga: &mut Vec<f64>| for i in 0..ga.len() {
                        ga[i] += g[i] / va[i]
                    });
                }
                Op::MulConst { a, c } => {
                    acc!(*a, |ga: &mut Vec<f64>| for i in 0..ga.len() {
                        ga[i] += g[i] * c[i]
                    });
                }
                Op::BceLogits {
                    logits,
                    targets,
                    weights,
                    denom,
                } => {
                    let va = self.nodes[*logits].value.clone();
                    let gv = g[0] / denom;
                    acc!(*logits, |gl: &mut Vec<f64>| {
                        for i in 0..gl.len() {
                            let sig = 1.0 / (1.0 + (-va[i]).exp());
                            let w = weights.as_ref().map_or(1.0, |w| w[i]);
                            gl[i] += gv * w * (sig - targets[i]);
                        }
                    });
                }
                Op::Upsample {
                    a,
                    in_h,
                    in_w,
                    out_h,
                    out_w,
                } => {
                    let c = node.shape[1];
                    let taps_h = axis_taps(*in_h, *out_h);
                    let taps_w = axis_taps(*in_w, *out_w);
                    let in_w = *in_w;
                    let out_w = *out_w;
                    acc!(*a, |ga: &mut Vec<f64>| {
                        for oy in 0..*out_h {
                            let (y0, y1, wy) = taps_h[oy];
                            for ox in 0..out_w {
                                let (x0, x1, wx) = taps_w[ox];
                                let obase = (oy * out_w + ox) * c;
                                for ((iy, fy), (ix, fx)) in [(y0, 1.0 - wy), (y1, wy)]
                                    .iter()
                                    .flat_map(|&p| {
                                        [(x0, 1.0 - wx), (x1, wx)].map(move |q| (p, q))
                                    })
                                {
                                    let w = fy * fx;
                                    if w == 0.0 {
                                        continue;
                                    }
                                    let ibase = (iy * in_w + ix) * c;
                                    for ch in 0..c {
                                        ga[ibase + ch] += w * g[obase + ch];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::AvgPool {
                    a,
                    in_h,
                    in_w,
                    factor,
                } => {
                    let c = node.shape[1];
                    let (oh, ow) = (in_h / factor, in_w / factor);
                    let f = *factor;
                    let inv = 1.0 / (f * f) as f64;
                    let in_w = *in_w;
                    acc!(*a, |ga: &mut Vec<f64>| {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = &g[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                                for dy in 0..f {
                                    for dx in 0..f {
                                        let ibase =
                                            ((oy * f + dy) * in_w + ox * f + dx) * c;
                                        for ch in 0..c {
                                            ga[ibase + ch] += gv[ch] * inv;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
        }

        // Leaves consumed their gradient above; restore into the vector.
        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Grads { grads, shapes })
    }

    /// Gradients of a scalar output w.r.t. an explicit list of inputs.
    pub fn gradient(&self, scalar_output: TensorId, inputs: &[TensorId]) -> Result<Vec<Tensor>> {
        for &id in inputs {
            self.check(id)?;
        }
        let grads = self.backward(scalar_output)?;
        Ok(inputs.iter().map(|&id| grads.wrt(id)).collect())
    }
}

/// Bilinear source taps for one axis: (lo index, hi index, hi weight).
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                .clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

// ── finite-difference verification ──────────────────────────────────

/// Max relative error between reverse-mode and central-difference gradients:
/// max over parameters of |analytic - difference| / max(1e-8, |analytic| + |difference|).
pub fn grad_check<F>(loss_fn: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if eps <= 0.0 {
        return Err(Error::config("grad_check eps must be positive"));
    }
    let base: Vec<(Vec<usize>, Vec<f64>)> = inputs
        .iter()
        .map(|t| (t.shape().to_vec(), t.data_f64()))
        .collect();

    let eval = |data: &[(Vec<usize>, Vec<f64>)]| -> Result<(Tape, Vec<TensorId>, TensorId)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = data
            .iter()
            .map(|(s, d)| tape.leaf_f64(s.clone(), d.clone()))
            .collect();
        let loss = loss_fn(&mut tape, &ids)?;
        if tape.value_f64(loss).len() != 1 {
            return Err(Error::Graph("grad_check loss must be scalar".into()));
        }
        if !tape.scalar(loss).is_finite() {
            return Err(Error::numeric("non-finite loss in grad_check"));
        }
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = eval(&base)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| grads.wrt_f64(id)).collect();

    let mut max_rel = 0.0f64;
    for (ti, (_, data)) in base.iter().enumerate() {
        for ei in 0..data.len() {
            let mut plus = base.clone();
            plus[ti].1[ei] += eps;
            let (tp, _, lp) = eval(&plus)?;
            let mut minus = base.clone();
            minus[ti].1[ei] -= eps;
            let (tm, _, lm) = eval(&minus)?;
            let diff = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * eps);
            let a = analytic[ti][ei];
            let rel = (a - diff).abs() / (a.abs() + diff.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
