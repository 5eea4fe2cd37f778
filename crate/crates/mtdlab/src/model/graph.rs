//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a single-use tape: forward values are computed eagerly as
//! nodes are pushed, and [`Graph::backward`] walks the tape once in reverse,
//! returning dense gradients for every model parameter. The op set is exactly
//! what the transformer variants in this crate need — fused attention,
//! RMSNorm, rotary embedding, cross-entropy, the two KL losses — with
//! gradients hand-derived per op and verified by finite differences both
//! here (per-op probes) and end to end in the model tests.
//!
//! Batches are *ragged*: a batch is a row-concatenation of sequences, and
//! [`Batch::bounds`] records each sequence's row range. Attention, rotary
//! positions, and row shifting all respect those boundaries, so sequences of
//! different lengths share one matrix without padding.

use ndarray::{s, Array2};

pub type NodeId = usize;

/// Row layout of a ragged batch: half-open row ranges, one per sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub bounds: Vec<(usize, usize)>,
}

impl Batch {
    pub fn new(bounds: Vec<(usize, usize)>) -> Self {
        Self { bounds }
    }

    /// Builds bounds for sequences of the given lengths, packed in order.
    pub fn from_lens(lens: &[usize]) -> Self {
        let mut bounds = Vec::with_capacity(lens.len());
        let mut start = 0;
        for &len in lens {
            bounds.push((start, start + len));
            start += len;
        }
        Self { bounds }
    }

    pub fn n_rows(&self) -> usize {
        self.bounds.last().map_or(0, |&(_, e)| e)
    }

    /// In-sequence position of every row.
    pub fn positions(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_rows()];
        for &(s, e) in &self.bounds {
            for (p, slot) in out[s..e].iter_mut().enumerate() {
                *slot = p;
            }
        }
        out
    }
}

enum Op {
    /// External constant; no gradient flows out.
    Constant,
    /// Leaf bound to model parameter `idx`.
    Param(usize),
    /// Row lookup: `out[i] = table[ids[i]]`.
    Gather { table: NodeId, ids: Vec<usize> },
    /// `a · b`
    MatMul { a: NodeId, b: NodeId },
    /// `a · bᵀ` (shared output head against the embedding table).
    MatMulBt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    /// Elementwise product with a constant matrix (reparameterization noise).
    MulConst { a: NodeId, c: Array2<f64> },
    /// `x · σ(x)`
    Silu { a: NodeId },
    /// `exp(a / 2)` (log-variance → standard deviation).
    ExpHalf { a: NodeId },
    /// Per-row RMS normalization with a learned `[1, d]` gain.
    RmsNorm { x: NodeId, gain: NodeId, inv_rms: Vec<f64> },
    /// Rotary position encoding applied per `head_dim` column block.
    Rope { x: NodeId, positions: Vec<usize>, head_dim: usize },
    /// Fused causal multi-head attention within each sequence block.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        batch: Batch,
        /// Cached softmax probabilities, one `[len, len]` matrix per
        /// (sequence, head), indexed `seq * n_heads + head`.
        probs: Vec<Array2<f64>>,
    },
    /// Within each sequence, `out[i] = x[i-1]`, with the learned `[1, d]`
    /// `init` row at each sequence start.
    ShiftRows { x: NodeId, init: NodeId, batch: Batch },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { x: NodeId, from: usize },
    /// Per-target-row negative log-likelihood; output `[targets.len(), 1]`.
    CrossEntropy {
        logits: NodeId,
        /// (row into `logits`, target token) pairs.
        targets: Vec<(usize, usize)>,
        probs: Array2<f64>,
    },
    /// Per-row `KL(target ‖ softmax(logits[row]))` against a constant target
    /// distribution; the stop-gradient side of the divergence training loss.
    KlToConst {
        logits: NodeId,
        rows: Vec<usize>,
        target: Array2<f64>,
        probs: Array2<f64>,
    },
    /// Mean over dimensions of the elementwise diagonal-Gaussian KL, floored
    /// per dimension at `free_bits`; output `[rows.len(), 1]`.
    GaussKlFloored {
        mu_q: NodeId,
        logvar_q: NodeId,
        mu_p: NodeId,
        logvar_p: NodeId,
        rows: Vec<usize>,
        free_bits: f64,
    },
    /// Mean of all entries; output `[1, 1]`.
    Mean { a: NodeId },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p [Array2<f64>],
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub(crate) const RMS_EPS: f64 = 1e-12;

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Array2<f64>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Scalar convenience for `[1, 1]` nodes.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[(0, 0)]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// One node per parameter, cached so every use shares the gradient.
    pub fn param(&mut self, idx: usize) -> NodeId {
        if let Some(id) = self.param_nodes[idx] {
            return id;
        }
        let id = self.push(self.params[idx].clone(), Op::Param(idx));
        self.param_nodes[idx] = Some(id);
        id
    }

    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let t = &self.nodes[table].value;
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t.row(id));
        }
        self.push(out, Op::Gather { table, ids })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul { a, b })
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value.t());
        self.push(v, Op::MatMulBt { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::Scale { a, c })
    }

    pub fn mul_const(&mut self, a: NodeId, c: Array2<f64>) -> NodeId {
        let v = &self.nodes[a].value * &c;
        self.push(v, Op::MulConst { a, c })
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu { a })
    }

    pub fn exp_half(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| (0.5 * x).exp());
        self.push(v, Op::ExpHalf { a })
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let g = &self.nodes[gain].value;
        let d = xv.ncols() as f64;
        let mut inv_rms = Vec::with_capacity(xv.nrows());
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(r);
            for (v, gj) in row.iter_mut().zip(g.row(0)) {
                *v *= r * gj;
            }
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms })
    }

    pub fn rope(&mut self, x: NodeId, batch: &Batch, head_dim: usize) -> NodeId {
        let positions = batch.positions();
        let v = rope_apply(&self.nodes[x].value, &positions, head_dim, false);
        self.push(v, Op::Rope { x, positions, head_dim })
    }

    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, batch: &Batch, n_heads: usize) -> NodeId {
        let (qv, kv, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let d = qv.ncols();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros(qv.raw_dim());
        let mut probs = Vec::with_capacity(batch.bounds.len() * n_heads);
        for &(s0, e0) in &batch.bounds {
            let len = e0 - s0;
            for h in 0..n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![s0..e0, cols.clone()]);
                let ks = kv.slice(s![s0..e0, cols.clone()]);
                let vs = vv.slice(s![s0..e0, cols.clone()]);
                let mut scores = qs.dot(&ks.t());
                scores *= scale;
                // Causal mask, then a row softmax over the allowed prefix.
                let mut p = Array2::zeros((len, len));
                for i in 0..len {
                    let row = scores.row(i);
                    let max = row.iter().take(i + 1).cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for j in 0..=i {
                        let e = (row[j] - max).exp();
                        p[(i, j)] = e;
                        sum += e;
                    }
                    for j in 0..=i {
                        p[(i, j)] /= sum;
                    }
                }
                let mixed = p.dot(&vs);
                out.slice_mut(s![s0..e0, cols]).assign(&mixed);
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention { q, k, v, n_heads, batch: batch.clone(), probs },
        )
    }

    pub fn shift_rows(&mut self, x: NodeId, init: NodeId, batch: &Batch) -> NodeId {
        let xv = &self.nodes[x].value;
        let iv = &self.nodes[init].value;
        let mut out = Array2::zeros(xv.raw_dim());
        for &(s0, e0) in &batch.bounds {
            out.row_mut(s0).assign(&iv.row(0));
            for i in s0 + 1..e0 {
                out.row_mut(i).assign(&xv.row(i - 1));
            }
        }
        self.push(out, Op::ShiftRows { x, init, batch: batch.clone() })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let mut out = Array2::zeros((av.nrows(), av.ncols() + bv.ncols()));
        out.slice_mut(s![.., ..av.ncols()]).assign(av);
        out.slice_mut(s![.., av.ncols()..]).assign(bv);
        self.push(out, Op::ConcatCols { a, b })
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let v = self.nodes[x].value.slice(s![.., from..to]).to_owned();
        self.push(v, Op::SliceCols { x, from })
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<(usize, usize)>) -> NodeId {
        let lv = &self.nodes[logits].value;
        let mut rows = Array2::zeros((targets.len(), lv.ncols()));
        for (i, &(row, _)) in targets.iter().enumerate() {
            rows.row_mut(i).assign(&lv.row(row));
        }
        let probs = softmax_rows(&rows);
        let mut out = Array2::zeros((targets.len(), 1));
        for (i, &(row, tok)) in targets.iter().enumerate() {
            let r = lv.row(row);
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out[(i, 0)] = lse - r[tok];
        }
        self.push(out, Op::CrossEntropy { logits, targets, probs })
    }

    /// `KL(target_row ‖ softmax(logits[rows[i]]))` per row. `target` is a
    /// plain probability matrix, not a graph node: gradients flow only into
    /// `logits`, which is exactly the stop-gradient the divergence training
    /// loss requires.
    pub fn kl_to_const(&mut self, logits: NodeId, rows: Vec<usize>, target: Array2<f64>) -> NodeId {
        assert_eq!(target.nrows(), rows.len(), "target rows must match row list");
        let lv = &self.nodes[logits].value;
        let mut picked = Array2::zeros((rows.len(), lv.ncols()));
        for (i, &row) in rows.iter().enumerate() {
            picked.row_mut(i).assign(&lv.row(row));
        }
        let probs = softmax_rows(&picked);
        let mut out = Array2::zeros((rows.len(), 1));
        for i in 0..rows.len() {
            let mut kl = 0.0;
            for (t, p) in target.row(i).iter().zip(probs.row(i)) {
                if *t > 0.0 {
                    kl += t * (t.ln() - p.ln());
                }
            }
            out[(i, 0)] = kl.max(0.0);
        }
        self.push(out, Op::KlToConst { logits, rows, target, probs })
    }

    pub fn gauss_kl_floored(
        &mut self,
        mu_q: NodeId,
        logvar_q: NodeId,
        mu_p: NodeId,
        logvar_p: NodeId,
        rows: Vec<usize>,
        free_bits: f64,
    ) -> NodeId {
        let (mq, lq) = (&self.nodes[mu_q].value, &self.nodes[logvar_q].value);
        let (mp, lp) = (&self.nodes[mu_p].value, &self.nodes[logvar_p].value);
        let z = mq.ncols() as f64;
        let mut out = Array2::zeros((rows.len(), 1));
        for (i, &row) in rows.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..mq.ncols() {
                let (a, la) = (mq[(row, j)], lq[(row, j)]);
                let (b, lb) = (mp[(row, j)], lp[(row, j)]);
                let kl = 0.5 * ((la - lb).exp() + (a - b) * (a - b) * (-lb).exp() - 1.0 + lb - la);
                acc += kl.max(free_bits);
            }
            out[(i, 0)] = acc / z;
        }
        self.push(
            out,
            Op::GaussKlFloored { mu_q, logvar_q, mu_p, logvar_p, rows, free_bits },
        )
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mean().unwrap();
        self.push(Array2::from_elem((1, 1), v), Op::Mean { a })
    }

    /// Reverse pass from a `[1, 1]` root; returns one dense gradient per
    /// model parameter (zeros where the parameter was unused).
    pub fn backward(&mut self, root: NodeId) -> Vec<Array2<f64>> {
        assert_eq!(self.nodes[root].value.dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array2::from_elem((1, 1), 1.0));
        let mut param_grads: Vec<Array2<f64>> =
            self.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();

        for id in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let add_to = |grads: &mut Vec<Option<Array2<f64>>>, target: NodeId, delta: Array2<f64>| {
                match &mut grads[target] {
                    Some(g) => *g += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &self.nodes[id].op {
                Op::Constant => {}
                Op::Param(idx) => param_grads[*idx] += &gy,
                Op::Gather { table, ids } => {
                    let mut gt = Array2::zeros(self.nodes[*table].value.raw_dim());
                    for (i, &row) in ids.iter().enumerate() {
                        let mut slot = gt.row_mut(row);
                        slot += &gy.row(i);
                    }
                    add_to(&mut grads, *table, gt);
                }
                Op::MatMul { a, b } => {
                    let ga = gy.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&gy);
                    add_to(&mut grads, *a, ga);
                    add_to(&mut grads, *b, gb);
                }
                Op::MatMulBt { a, b } => {
                    let ga = gy.dot(&self.nodes[*b].value);
                    let gb = gy.t().dot(&self.nodes[*a].value);
                    add_to(&mut grads, *a, ga);
                    add_to(&mut grads, *b, gb);
                }
                Op::Add { a, b } => {
                    add_to(&mut grads, *a, gy.clone());
                    add_to(&mut grads, *b, gy);
                }
                Op::Mul { a, b } => {
                    let ga = &gy * &self.nodes[*b].value;
                    let gb = &gy * &self.nodes[*a].value;
                    add_to(&mut grads, *a, ga);
                    add_to(&mut grads, *b, gb);
                }
                Op::Scale { a, c } => add_to(&mut grads, *a, &gy * *c),
                Op::MulConst { a, c } => add_to(&mut grads, *a, &gy * c),
                Op::Silu { a } => {
                    let av = &self.nodes[*a].value;
                    let g = av.mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    add_to(&mut grads, *a, &gy * &g);
                }
                Op::ExpHalf { a } => {
                    // y = exp(a/2) → dy/da = y/2
                    let g = &gy * &self.nodes[id].value * 0.5;
                    add_to(&mut grads, *a, g);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = &self.nodes[*x].value;
                    let g = &self.nodes[*gain].value;
                    let d = xv.ncols() as f64;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let mut gg = Array2::zeros((1, xv.ncols()));
                    for i in 0..xv.nrows() {
                        let r = inv_rms[i];
                        // dot = Σ_j dy_j g_j x_j
                        let mut dot = 0.0;
                        for j in 0..xv.ncols() {
                            dot += gy[(i, j)] * g[(0, j)] * xv[(i, j)];
                            gg[(0, j)] += gy[(i, j)] * xv[(i, j)] * r;
                        }
                        for j in 0..xv.ncols() {
                            gx[(i, j)] = r * g[(0, j)] * gy[(i, j)] - r * r * r / d * xv[(i, j)] * dot;
                        }
                    }
                    add_to(&mut grads, *x, gx);
                    add_to(&mut grads, *gain, gg);
                }
                Op::Rope { x, positions, head_dim } => {
                    // Rotation is orthogonal: the adjoint rotates by −angle.
                    let gx = rope_apply(&gy, positions, *head_dim, true);
                    add_to(&mut grads, *x, gx);
                }
                Op::Attention { q, k, v, n_heads, batch, probs } => {
                    let (qv, kv, vv) = (
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                    );
                    let d = qv.ncols();
                    let dh = d / n_heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros(qv.raw_dim());
                    let mut gk = Array2::zeros(kv.raw_dim());
                    let mut gv = Array2::zeros(vv.raw_dim());
                    for (si, &(s0, e0)) in batch.bounds.iter().enumerate() {
                        for h in 0..*n_heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[si * n_heads + h];
                            let qs = qv.slice(s![s0..e0, cols.clone()]);
                            let ks = kv.slice(s![s0..e0, cols.clone()]);
                            let vs = vv.slice(s![s0..e0, cols.clone()]);
                            let go = gy.slice(s![s0..e0, cols.clone()]);
                            // O = P V
                            let gvs = p.t().dot(&go);
                            let gp = go.dot(&vs.t());
                            // dS = P ∘ (dP − rowsum(dP ∘ P))
                            let mut gs = Array2::zeros(p.raw_dim());
                            for i in 0..p.nrows() {
                                let mut rowsum = 0.0;
                                for j in 0..=i {
                                    rowsum += gp[(i, j)] * p[(i, j)];
                                }
                                for j in 0..=i {
                                    gs[(i, j)] = p[(i, j)] * (gp[(i, j)] - rowsum);
                                }
                            }
                            gs *= scale;
                            let gqs = gs.dot(&ks);
                            let gks = gs.t().dot(&qs);
                            let mut slot = gq.slice_mut(s![s0..e0, cols.clone()]);
                            slot += &gqs;
                            let mut slot = gk.slice_mut(s![s0..e0, cols.clone()]);
                            slot += &gks;
                            let mut slot = gv.slice_mut(s![s0..e0, cols]);
                            slot += &gvs;
                        }
                    }
                    add_to(&mut grads, *q, gq);
                    add_to(&mut grads, *k, gk);
                    add_to(&mut grads, *v, gv);
                }
                Op::ShiftRows { x, init, batch } => {
                    let mut gx = Array2::zeros(self.nodes[*x].value.raw_dim());
                    let mut gi = Array2::zeros(self.nodes[*init].value.raw_dim());
                    for &(s0, e0) in &batch.bounds {
                        {
                            let mut slot = gi.row_mut(0);
                            slot += &gy.row(s0);
                        }
                        for i in s0 + 1..e0 {
                            let mut slot = gx.row_mut(i - 1);
                            slot += &gy.row(i);
                        }
                    }
                    add_to(&mut grads, *x, gx);
                    add_to(&mut grads, *init, gi);
                }
                Op::ConcatCols { a, b } => {
                    let ca = self.nodes[*a].value.ncols();
                    let ga = gy.slice(s![.., ..ca]).to_owned();
                    let gb = gy.slice(s![.., ca..]).to_owned();
                    add_to(&mut grads, *a, ga);
                    add_to(&mut grads, *b, gb);
                }
                Op::SliceCols { x, from } => {
                    let mut gx = Array2::zeros(self.nodes[*x].value.raw_dim());
                    let mut slot = gx.slice_mut(s![.., *from..*from + gy.ncols()]);
                    slot += &gy;
                    add_to(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let mut gl = Array2::zeros(self.nodes[*logits].value.raw_dim());
                    for (i, &(row, tok)) in targets.iter().enumerate() {
                        let gyi = gy[(i, 0)];
                        for j in 0..probs.ncols() {
                            gl[(row, j)] += gyi * (probs[(i, j)] - if j == tok { 1.0 } else { 0.0 });
                        }
                    }
                    add_to(&mut grads, *logits, gl);
                }
                Op::KlToConst { logits, rows, target, probs } => {
                    // ∂/∂l_k KL(t ‖ softmax(l)) = softmax(l)_k − t_k
                    let mut gl = Array2::zeros(self.nodes[*logits].value.raw_dim());
                    for (i, &row) in rows.iter().enumerate() {
                        let gyi = gy[(i, 0)];
                        for j in 0..probs.ncols() {
                            gl[(row, j)] += gyi * (probs[(i, j)] - target[(i, j)]);
                        }
                    }
                    add_to(&mut grads, *logits, gl);
                }
                Op::GaussKlFloored { mu_q, logvar_q, mu_p, logvar_p, rows, free_bits } => {
                    let (mq, lq) = (&self.nodes[*mu_q].value, &self.nodes[*logvar_q].value);
                    let (mp, lp) = (&self.nodes[*mu_p].value, &self.nodes[*logvar_p].value);
                    let z = mq.ncols() as f64;
                    let mut gmq = Array2::zeros(mq.raw_dim());
                    let mut glq = Array2::zeros(lq.raw_dim());
                    let mut gmp = Array2::zeros(mp.raw_dim());
                    let mut glp = Array2::zeros(lp.raw_dim());
                    for (i, &row) in rows.iter().enumerate() {
                        let gyi = gy[(i, 0)] / z;
                        for j in 0..mq.ncols() {
                            let (a, la) = (mq[(row, j)], lq[(row, j)]);
                            let (b, lb) = (mp[(row, j)], lp[(row, j)]);
                            let ratio = (la - lb).exp();
                            let dmu = a - b;
                            let kl = 0.5 * (ratio + dmu * dmu * (-lb).exp() - 1.0 + lb - la);
                            if kl <= *free_bits {
                                continue; // floored: locally constant
                            }
                            gmq[(row, j)] += gyi * dmu * (-lb).exp();
                            gmp[(row, j)] -= gyi * dmu * (-lb).exp();
                            glq[(row, j)] += gyi * 0.5 * (ratio - 1.0);
                            glp[(row, j)] += gyi * 0.5 * (1.0 - ratio - dmu * dmu * (-lb).exp());
                        }
                    }
                    add_to(&mut grads, *mu_q, gmq);
                    add_to(&mut grads, *logvar_q, glq);
                    add_to(&mut grads, *mu_p, gmp);
                    add_to(&mut grads, *logvar_p, glp);
                }
                Op::Mean { a } => {
                    let n = self.nodes[*a].value.len() as f64;
                    let g = Array2::from_elem(self.nodes[*a].value.raw_dim(), gy[(0, 0)] / n);
                    add_to(&mut grads, *a, g);
                }
            }
        }
        param_grads
    }
}

/// Applies (or, with `inverse`, un-applies) rotary position encoding: within
/// each `head_dim` column block, coordinate pairs `(2j, 2j+1)` are rotated by
/// `pos · base^(−2j/head_dim)` with base 10000.
fn rope_apply(x: &Array2<f64>, positions: &[usize], head_dim: usize, inverse: bool) -> Array2<f64> {
    assert_eq!(head_dim % 2, 0, "rotary encoding needs an even head dim");
    assert_eq!(x.ncols() % head_dim, 0);
    let mut out = x.clone();
    let sign = if inverse { -1.0 } else { 1.0 };
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let pos = positions[i] as f64;
        for block in 0..row.len() / head_dim {
            let base = block * head_dim;
            for j in 0..head_dim / 2 {
                let theta = pos * 10000f64.powf(-2.0 * j as f64 / head_dim as f64) * sign;
                let (sin, cos) = theta.sin_cos();
                let (a, b) = (row[base + 2 * j], row[base + 2 * j + 1]);
                row[base + 2 * j] = a * cos - b * sin;
                row[base + 2 * j + 1] = a * sin + b * cos;
            }
        }
    }
    out
}
