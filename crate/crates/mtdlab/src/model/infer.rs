//! Inference on frozen parameters: whole-sequence trace recording, an
//! incremental decoder with key/value caches, and per-sequence evaluation
//! helpers.

use ndarray::{s, Array1, Array2, ArrayView2};

use super::graph::RMS_EPS;
use super::net::{embed_tokens, forward_full, forward_mtp, forward_phi_with_noise};
use super::{MicroModel, ModelError};
use crate::divergence::{self, LogitTrace, TokenRecord};

/// Records full-model and shallow-head logits for every predicting position
/// of `tokens`: record `t` holds both predictions for `tokens[t + 1]`, which
/// is stored as the record's realized token, so the trace has
/// `tokens.len() − 1` records. Bottleneck models run at the posterior mean.
pub fn record_trace(model: &MicroModel, tokens: &[u32]) -> Result<LogitTrace, ModelError> {
    if model.spec.mtp.is_none() {
        return Err(ModelError::MissingMtpHead);
    }
    if tokens.len() < 2 {
        return Err(ModelError::BadInput {
            what: "a trace needs at least two tokens".into(),
        });
    }
    let (hiddens, full_logits) = forward_full(model, tokens)?;
    let embeds = embed_tokens(model, tokens)?;
    let mtp_logits = forward_mtp(model, &hiddens, &embeds)?;

    let mut trace = LogitTrace::new(model.spec.config.vocab_size);
    trace
        .meta
        .insert("model_kind".into(), model.spec.kind.name().into());
    if let Some(m) = &model.spec.mtp {
        trace.meta.insert(
            "access_latest_embedding".into(),
            m.access_latest_embedding.to_string(),
        );
    }
    for t in 0..tokens.len() - 1 {
        trace.records.push(TokenRecord {
            token_id: tokens[t + 1],
            full_logits: full_logits.row(t).iter().map(|&v| v as f32).collect(),
            mtp_logits: mtp_logits.row(t).iter().map(|&v| v as f32).collect(),
        });
    }
    Ok(trace)
}

fn divergence_err(e: divergence::DivergenceError) -> ModelError {
    ModelError::BadInput { what: e.to_string() }
}

/// Mean per-token divergence and next-token loss over one sequence,
/// computed at full precision from a fresh forward pass (no f32 rounding).
pub fn sequence_mean_mtd_nll(
    model: &MicroModel,
    tokens: &[u32],
) -> Result<(f64, f64), ModelError> {
    if model.spec.mtp.is_none() {
        return Err(ModelError::MissingMtpHead);
    }
    if tokens.len() < 2 {
        return Err(ModelError::BadInput {
            what: "sequence statistics need at least two tokens".into(),
        });
    }
    let (hiddens, full_logits) = forward_full(model, tokens)?;
    let embeds = embed_tokens(model, tokens)?;
    let mtp_logits = forward_mtp(model, &hiddens, &embeds)?;
    let (mut sum_mtd, mut sum_nll) = (0.0, 0.0);
    let n = tokens.len() - 1;
    for t in 0..n {
        let full = full_logits.row(t).to_vec();
        let mtp = mtp_logits.row(t).to_vec();
        sum_mtd += divergence::mtd(&full, &mtp, 1.0).map_err(divergence_err)?;
        sum_nll += divergence::nll(&full, tokens[t + 1] as usize).map_err(divergence_err)?;
    }
    Ok((sum_mtd / n as f64, sum_nll / n as f64))
}

/// Mean zero-noise bottleneck loss over the predicting positions (all but
/// the last) of one sequence.
pub fn sequence_phi_loss(model: &MicroModel, tokens: &[u32]) -> Result<f64, ModelError> {
    let phi = model.spec.phi.ok_or(ModelError::BadConfig {
        what: "model has no bottleneck layer".into(),
    })?;
    if tokens.len() < 2 {
        return Err(ModelError::BadInput {
            what: "sequence statistics need at least two tokens".into(),
        });
    }
    let noise = Array2::zeros((tokens.len(), phi.z_dim));
    let (_, per_token) = forward_phi_with_noise(model, tokens, &noise)?;
    let n = tokens.len() - 1;
    Ok(per_token.iter().take(n).sum::<f64>() / n as f64)
}

/// Cached post-rotation keys and values for one attention block, one row per
/// consumed token, stored flat and viewed as `[n, d]`.
struct KvCache {
    k: Vec<f64>,
    v: Vec<f64>,
    d: usize,
}

impl KvCache {
    fn new(d: usize) -> Self {
        Self { k: Vec::new(), v: Vec::new(), d }
    }

    fn len(&self) -> usize {
        self.k.len() / self.d
    }

    fn push(&mut self, k_row: &Array1<f64>, v_row: &Array1<f64>) {
        self.k.extend(k_row.iter());
        self.v.extend(v_row.iter());
    }

    fn k_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.d), &self.k).expect("cache layout")
    }

    fn v_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.d), &self.v).expect("cache layout")
    }
}

fn rms_row(x: &Array1<f64>, gain: &Array2<f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
    let r = 1.0 / (ms + RMS_EPS).sqrt();
    Array1::from_iter(x.iter().zip(gain.row(0)).map(|(v, g)| v * r * g))
}

fn rope_row(x: &mut Array1<f64>, pos: usize, head_dim: usize) {
    let pos = pos as f64;
    for block in 0..x.len() / head_dim {
        let base = block * head_dim;
        for j in 0..head_dim / 2 {
            let theta = pos * 10000f64.powf(-2.0 * j as f64 / head_dim as f64);
            let (sin, cos) = theta.sin_cos();
            let (a, b) = (x[base + 2 * j], x[base + 2 * j + 1]);
            x[base + 2 * j] = a * cos - b * sin;
            x[base + 2 * j + 1] = a * sin + b * cos;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Attention for the newest row against every cached row.
fn attend_row(q: &Array1<f64>, cache: &KvCache, n_heads: usize) -> Array1<f64> {
    let d = q.len();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = cache.len();
    let kv = cache.k_view();
    let vv = cache.v_view();
    let mut out = Array1::zeros(d);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let qs = q.slice(s![cols.clone()]);
        let mut scores = Vec::with_capacity(n);
        for j in 0..n {
            let ks = kv.slice(s![j, cols.clone()]);
            scores.push(qs.dot(&ks) * scale);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for (j, p) in scores.iter().enumerate() {
            let p = p / sum;
            let vs = vv.slice(s![j, cols.clone()]);
            for (o, &vj) in out.slice_mut(s![cols.clone()]).iter_mut().zip(vs.iter()) {
                *o += p * vj;
            }
        }
    }
    out
}

/// Incremental decoder: feeds one token at a time, reusing cached keys and
/// values, and returns exactly the logits a whole-sequence forward pass
/// would produce at that position. Bottleneck models run at the posterior
/// mean, matching [`forward_full`].
pub struct Decoder<'m> {
    model: &'m MicroModel,
    main_kv: Vec<KvCache>,
    mtp_kv: Vec<KvCache>,
    prev_hidden: Option<Array1<f64>>,
    n: usize,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m MicroModel) -> Self {
        let d = model.spec.config.d_model;
        let main_kv = (0..model.spec.config.n_layers).map(|_| KvCache::new(d)).collect();
        let mtp_blocks = model.spec.mtp.map_or(0, |m| m.n_blocks);
        let mtp_kv = (0..mtp_blocks).map(|_| KvCache::new(d)).collect();
        Self { model, main_kv, mtp_kv, prev_hidden: None, n: 0 }
    }

    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// One pre-norm block applied to a single new row at position `pos`,
    /// attending over this block's cache (which gains the new row).
    fn block_step(
        &mut self,
        prefix: &str,
        x: Array1<f64>,
        pos: usize,
        mtp_block: Option<usize>,
    ) -> Array1<f64> {
        let model = self.model;
        let cfg = &model.spec.config;
        let p = |name: &str| model.params.get(&format!("{prefix}.{name}"));
        let normed = rms_row(&x, p("attn_norm"));
        let mut q = normed.dot(p("wq"));
        let mut k = normed.dot(p("wk"));
        let v = normed.dot(p("wv"));
        rope_row(&mut q, pos, cfg.head_dim());
        rope_row(&mut k, pos, cfg.head_dim());
        let cache = match mtp_block {
            Some(b) => &mut self.mtp_kv[b],
            None => {
                let layer: usize = prefix["layer".len()..].parse().expect("layer prefix");
                &mut self.main_kv[layer]
            }
        };
        cache.push(&k, &v);
        let att = attend_row(&q, cache, cfg.n_heads);
        let att = att.dot(p("wo"));
        let x = x + att;
        let normed = rms_row(&x, p("mlp_norm"));
        let gate = normed.dot(p("wgate")).mapv(|t| t * sigmoid(t));
        let up = normed.dot(p("wup"));
        let h = (gate * up).dot(p("wdown"));
        x + h
    }

    /// Consumes one token and returns the logits predicting the next one:
    /// the full model's, and the shallow head's if the model has one.
    pub fn push(
        &mut self,
        token: u32,
    ) -> Result<(Array1<f64>, Option<Array1<f64>>), ModelError> {
        let model = self.model;
        let cfg = &model.spec.config;
        if token >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange { token, vocab_size: cfg.vocab_size });
        }
        if self.n >= cfg.context_len {
            return Err(ModelError::InputTooLong {
                len: self.n + 1,
                context_len: cfg.context_len,
            });
        }
        let pos = self.n;
        let embed = model.params.get("embed");
        let e = embed.row(token as usize).to_owned();

        let spec = &model.spec;
        let bottom = spec.phi.map_or(cfg.n_layers, |p| p.placement_layer);
        let mut x = e.clone();
        for layer in 0..bottom {
            x = self.block_step(&format!("layer{layer}"), x, pos, None);
        }
        if let Some(phi) = spec.phi {
            let post = x.dot(model.params.get("phi.post"));
            let mu = post.slice(s![0..phi.z_dim]).to_owned();
            x = mu.dot(model.params.get("phi.dec"));
        }
        for layer in bottom..cfg.n_layers {
            x = self.block_step(&format!("layer{layer}"), x, pos, None);
        }
        let hidden = x;
        let normed = rms_row(&hidden, model.params.get("final_norm"));
        let full_logits = embed.dot(&normed);

        let mtp_logits = match spec.mtp {
            None => None,
            Some(mtp) => {
                let h_prev = match &self.prev_hidden {
                    Some(h) => h.clone(),
                    None => model.params.get("mtp.init").row(0).to_owned(),
                };
                let input = if mtp.access_latest_embedding {
                    Array1::from_iter(h_prev.iter().chain(e.iter()).cloned())
                } else {
                    h_prev
                };
                let mut c = input.dot(model.params.get("mtp.proj"));
                for b in 0..mtp.n_blocks {
                    c = self.block_step(&format!("mtp.block{b}"), c, pos, Some(b));
                }
                let c = rms_row(&c, model.params.get("mtp.final_norm"));
                Some(embed.dot(&c))
            }
        };

        self.prev_hidden = Some(hidden);
        self.n += 1;
        Ok((full_logits, mtp_logits))
    }
}
