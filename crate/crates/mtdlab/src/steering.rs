//! Divergence steering: autoregressive sampling from a geodesic
//! interpolation (or extrapolation) between the full model's next-token
//! distribution `p` and the shallow head's `m`.
//!
//! The steering knob α moves along the Fisher–Rao geodesic through the two
//! distributions: α = 0 samples `p` unchanged, α = 1 samples `m`, values in
//! between blend, and values outside `[0, 1]` extrapolate — negative α walks
//! *away* from the shallow head's guess, biasing sampling toward tokens the
//! shallow head finds surprising (computation-heavy tokens); α > 1
//! exaggerates the shallow view. Temperature, top-k restriction, and a
//! fixed-entropy projection (matching the steered distribution's entropy to
//! `p`'s) compose with α as orthogonal controls.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::{LogitTrace, TokenRecord};
use crate::geometry::{self, CategoricalDist, GeometryError};
use crate::model::infer::Decoder;
use crate::model::{MicroModel, ModelError};

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("bad steering parameters: {what}")]
    BadParams { what: String },
}

/// Decoding controls. `alpha` is the steering coefficient along the p–m
/// geodesic; `max_len` caps the *total* sequence length (prompt included),
/// so it must fit the model's context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringParams {
    pub temperature: f64,
    pub alpha: f64,
    /// Project the steered distribution back to `p`'s entropy each step.
    pub fixed_entropy: bool,
    /// Restrict sampling to the full model's `k` most likely tokens.
    pub top_k: Option<usize>,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SteeringParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            alpha: 0.0,
            fixed_entropy: false,
            top_k: None,
            max_len: 256,
            seed: 0,
        }
    }
}

impl SteeringParams {
    pub fn validate(&self, context_len: usize) -> Result<(), SteeringError> {
        let fail = |what: String| Err(SteeringError::BadParams { what });
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature {} must be positive and finite", self.temperature));
        }
        if !self.alpha.is_finite() {
            return fail(format!("alpha {} must be finite", self.alpha));
        }
        if self.top_k == Some(0) {
            return fail("top_k must be at least 1 when set".into());
        }
        if self.max_len == 0 || self.max_len > context_len {
            return fail(format!(
                "max_len {} must be in 1..={context_len} (the model's context)",
                self.max_len
            ));
        }
        Ok(())
    }
}

/// What one steering step measured, before sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    /// KL(p ‖ m) in nats between the two distributions the step actually
    /// steered between (after temperature and any top-k restriction);
    /// `+inf` is possible and means the head assigned (numerically) zero
    /// mass where the full model did not.
    pub mtd: f64,
    /// Entropy of `p` (the fixed-entropy projection target), nats.
    pub entropy_p: f64,
    /// Entropy of the final sampling distribution, nats.
    pub entropy_s: f64,
    /// Whether the geodesic extrapolation left the simplex and was folded
    /// back — α exceeded the safe range at this step.
    pub folded: bool,
}

/// Restricts both distributions to the `k` most likely tokens of `p` and
/// renormalizes. Ties at the cutoff break toward the lower token index. A
/// `k` at or above the vocabulary size is the identity.
fn restrict_top_k(
    p: &CategoricalDist,
    m: &CategoricalDist,
    k: usize,
) -> Result<(CategoricalDist, CategoricalDist), GeometryError> {
    let n = p.len();
    if k >= n {
        return Ok((p.clone(), m.clone()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        p.probs()[b]
            .partial_cmp(&p.probs()[a])
            .expect("probabilities are finite")
            .then(a.cmp(&b))
    });
    let keep = &order[..k];
    let mask = |src: &CategoricalDist| -> Result<CategoricalDist, GeometryError> {
        let mut out = vec![0.0; n];
        for &i in keep {
            out[i] = src.probs()[i];
        }
        let sum: f64 = out.iter().sum();
        if !(sum > 0.0) {
            // Renormalizing zero mass: surface it as a bad probability
            // rather than dividing by zero.
            return Err(GeometryError::BadProbability { index: keep[0], value: 0.0 });
        }
        for v in &mut out {
            *v /= sum;
        }
        CategoricalDist::new(out)
    };
    Ok((mask(p)?, mask(m)?))
}

/// The full steering pipeline short of sampling: temperature → optional
/// top-k restriction → geodesic steering → optional fixed-entropy
/// projection. Returns the sampling distribution and the step diagnostics.
///
/// α = 0 and α = 1 short-circuit to `p` and `m` exactly (no sphere round
/// trip), honoring the interpolation endpoints bit-for-bit.
pub fn steer_distribution(
    full_logits: &[f64],
    mtp_logits: &[f64],
    params: &SteeringParams,
) -> Result<(CategoricalDist, StepDiagnostics), SteeringError> {
    if full_logits.len() != mtp_logits.len() {
        return Err(SteeringError::BadParams {
            what: format!(
                "logit lengths differ ({} vs {})",
                full_logits.len(),
                mtp_logits.len()
            ),
        });
    }
    let p = geometry::softmax_with_temperature(full_logits, params.temperature)?;
    let m = geometry::softmax_with_temperature(mtp_logits, params.temperature)?;
    let (p, m) = match params.top_k {
        None => (p, m),
        Some(k) => restrict_top_k(&p, &m, k)?,
    };
    let mtd = geometry::kl_divergence(&p, &m);
    let entropy_p = geometry::entropy(&p);

    let (mut s, folded) = if params.alpha == 0.0 {
        (p.clone(), false)
    } else if params.alpha == 1.0 {
        (m.clone(), false)
    } else {
        let g = geometry::geodesic_interpolate(&p, &m, params.alpha);
        (g.dist, g.folded)
    };
    if params.fixed_entropy {
        let (projected, _t) = geometry::fixed_entropy_project(&s, entropy_p, 1e-9)?;
        s = projected;
    }
    let entropy_s = geometry::entropy(&s);
    Ok((s, StepDiagnostics { mtd, entropy_p, entropy_s, folded }))
}

/// Draws one token index from `dist` by inverse CDF on a single uniform
/// draw.
fn sample_index<R: Rng + ?Sized>(dist: &CategoricalDist, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_support = 0;
    for (i, &p) in dist.probs().iter().enumerate() {
        if p > 0.0 {
            last_support = i;
            cum += p;
            if u < cum {
                return i;
            }
        }
    }
    // Rounding can leave cum a hair below 1; the draw belongs to the tail.
    last_support
}

/// One steering step: build the sampling distribution and draw a token.
pub fn steered_step<R: Rng + ?Sized>(
    full_logits: &[f64],
    mtp_logits: &[f64],
    params: &SteeringParams,
    rng: &mut R,
) -> Result<(u32, StepDiagnostics), SteeringError> {
    let (dist, diag) = steer_distribution(full_logits, mtp_logits, params)?;
    Ok((sample_index(&dist, rng) as u32, diag))
}

/// A finished generation: the full token sequence (prompt included), the
/// raw logit trace over every predicting position, and per-generated-token
/// steering diagnostics.
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Unmodified full/head logits — steering is re-derivable from these;
    /// the trace never stores steered values.
    pub trace: LogitTrace,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Generates from `prompt` with divergence steering until `end_token` (if
/// given) is produced or the total length reaches `params.max_len`.
///
/// The returned trace covers the whole realized sequence — prompt positions
/// included — with record `t` holding both models' raw logits for
/// predicting token `t + 1`. Sampling consumes one uniform draw per
/// generated token, so a fixed rng seed fixes the output exactly.
pub fn generate<R: Rng + ?Sized>(
    model: &MicroModel,
    prompt: &[u32],
    end_token: Option<u32>,
    params: &SteeringParams,
    rng: &mut R,
) -> Result<Generation, SteeringError> {
    if model.spec.mtp.is_none() {
        return Err(SteeringError::Model(ModelError::MissingMtpHead));
    }
    params.validate(model.spec.config.context_len)?;
    if prompt.is_empty() {
        return Err(SteeringError::BadParams {
            what: "prompt must hold at least one token".into(),
        });
    }
    if prompt.len() >= params.max_len {
        return Err(SteeringError::BadParams {
            what: format!(
                "prompt length {} leaves no room under max_len {}",
                prompt.len(),
                params.max_len
            ),
        });
    }

    let mut trace = LogitTrace::new(model.spec.config.vocab_size);
    trace.meta.insert("model_kind".into(), model.spec.kind.name().into());
    if let Some(m) = &model.spec.mtp {
        trace.meta.insert(
            "access_latest_embedding".into(),
            m.access_latest_embedding.to_string(),
        );
    }
    trace.meta.insert("temperature".into(), params.temperature.to_string());
    trace.meta.insert("alpha".into(), params.alpha.to_string());
    trace.meta.insert("fixed_entropy".into(), params.fixed_entropy.to_string());
    trace.meta.insert(
        "top_k".into(),
        params.top_k.map_or("none".into(), |k| k.to_string()),
    );
    trace.meta.insert("seed".into(), params.seed.to_string());

    let mut decoder = Decoder::new(model);
    let mut tokens: Vec<u32> = Vec::with_capacity(params.max_len);
    let mut diagnostics = Vec::new();
    // Logits waiting for their realized next token.
    let mut pending: Option<(Vec<f64>, Vec<f64>)> = None;

    let emit = |trace: &mut LogitTrace, pending: &mut Option<(Vec<f64>, Vec<f64>)>, next: u32| {
        if let Some((full, mtp)) = pending.take() {
            trace.records.push(TokenRecord {
                token_id: next,
                full_logits: full.iter().map(|&v| v as f32).collect(),
                mtp_logits: mtp.iter().map(|&v| v as f32).collect(),
            });
        }
    };

    for &tok in prompt {
        emit(&mut trace, &mut pending, tok);
        let (full, mtp) = decoder.push(tok)?;
        pending = Some((full.to_vec(), mtp.expect("head checked above").to_vec()));
        tokens.push(tok);
    }

    while tokens.len() < params.max_len {
        let (full, mtp) = pending.as_ref().expect("prompt is non-empty");
        let (next, diag) = steered_step(full, mtp, params, rng)?;
        diagnostics.push(diag);
        emit(&mut trace, &mut pending, next);
        tokens.push(next);
        if end_token == Some(next) {
            break;
        }
        if tokens.len() == params.max_len {
            break;
        }
        let (full, mtp) = decoder.push(next)?;
        pending = Some((full.to_vec(), mtp.expect("head checked above").to_vec()));
    }

    Ok(Generation { tokens, trace, diagnostics })
}

/// Per-step diagnostics as JSON lines, fields in the order `step`, `mtd`,
/// `entropy_p`, `entropy_s`, `folded`. Non-finite divergences (possible by
/// contract) serialize as `null` to stay within JSON.
pub fn diagnostics_jsonl(diags: &[StepDiagnostics]) -> String {
    let num = |v: f64| serde_json::to_string(&v).expect("f64 serializes");
    let mut out = String::new();
    for (step, d) in diags.iter().enumerate() {
        out.push_str(&format!(
            "{{\"step\":{},\"mtd\":{},\"entropy_p\":{},\"entropy_s\":{},\"folded\":{}}}\n",
            step,
            num(d.mtd),
            num(d.entropy_p),
            num(d.entropy_s),
            d.folded
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind, ModelSpec, MtpConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probe_model(access: bool, seed: u64) -> MicroModel {
        let config = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_mlp: 16,
            vocab_size: 11,
            context_len: 64,
            tied_embeddings: true,
        };
        let spec = ModelSpec {
            kind: ModelKind::MtpMtd,
            config,
            mtp: Some(MtpConfig { n_blocks: 1, access_latest_embedding: access }),
            phi: None,
        };
        MicroModel::new(spec, seed).unwrap()
    }

    fn sp(alpha: f64) -> SteeringParams {
        SteeringParams { alpha, ..SteeringParams::default() }
    }

    #[test]
    fn endpoints_recover_p_and_m_exactly() {
        let full = [0.3, -1.2, 2.0, 0.0, -0.5];
        let mtp = [1.0, 0.4, -0.3, 2.2, 0.1];
        let p = geometry::softmax_with_temperature(&full, 1.0).unwrap();
        let m = geometry::softmax_with_temperature(&mtp, 1.0).unwrap();
        let (s0, d0) = steer_distribution(&full, &mtp, &sp(0.0)).unwrap();
        assert_eq!(s0.probs(), p.probs(), "alpha 0 must be p bit-for-bit");
        assert!(!d0.folded);
        let (s1, _) = steer_distribution(&full, &mtp, &sp(1.0)).unwrap();
        assert_eq!(s1.probs(), m.probs(), "alpha 1 must be m bit-for-bit");
    }

    #[test]
    fn fixed_entropy_holds_the_target_every_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let full: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mtp: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
            for alpha in [-0.4, -0.1, 0.3, 0.7, 1.3] {
                let params = SteeringParams {
                    alpha,
                    fixed_entropy: true,
                    temperature: 0.8,
                    ..SteeringParams::default()
                };
                let (s, diag) = steer_distribution(&full, &mtp, &params).unwrap();
                assert!(
                    (geometry::entropy(&s) - diag.entropy_p).abs() <= 1e-9,
                    "entropy drifted: {} vs {}",
                    geometry::entropy(&s),
                    diag.entropy_p
                );
            }
        }
    }

    #[test]
    fn top_k_restricts_to_full_model_support() {
        let full = [2.0, 1.5, 0.0, -1.0, -2.0];
        let mtp = [-2.0, 0.0, 1.0, 2.0, 0.5];
        let params = SteeringParams { top_k: Some(2), alpha: 0.6, ..SteeringParams::default() };
        let (s, _) = steer_distribution(&full, &mtp, &params).unwrap();
        // p's top-2 tokens are 0 and 1; everything else must carry no mass.
        for i in 2..5 {
            assert_eq!(s.probs()[i], 0.0, "token {i} outside the top-k support");
        }
        let sum: f64 = s.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    proptest! {
        /// Walking toward the shallow head (larger α) never adds mass to
        /// the tokens the full model favors over the head; walking away
        /// (α < 0) never removes it. Checked as monotone non-increasing
        /// mass on {k : p_k > m_k} over an α grid, restricted to steps
        /// where the extrapolation stayed on the simplex — once a step
        /// folds, the result is flagged out-of-range by contract and the
        /// ordering claim no longer applies.
        #[test]
        fn anti_speculative_mass_shift(
            full in proptest::collection::vec(-4.0f64..4.0, 2..12),
            mtp_jitter in proptest::collection::vec(-4.0f64..4.0, 2..12),
        ) {
            let n = full.len().min(mtp_jitter.len());
            let full = &full[..n];
            let mtp = &mtp_jitter[..n];
            let p = geometry::softmax_with_temperature(full, 1.0).unwrap();
            let m = geometry::softmax_with_temperature(mtp, 1.0).unwrap();
            let favored: Vec<usize> = (0..n)
                .filter(|&k| p.probs()[k] > m.probs()[k])
                .collect();
            let mut prev = f64::INFINITY;
            for step in 0..=8 {
                let alpha = -0.4 + step as f64 * 0.1;
                let (s, diag) = steer_distribution(full, mtp, &sp(alpha)).unwrap();
                if diag.folded {
                    continue;
                }
                let mass: f64 = favored.iter().map(|&k| s.probs()[k]).sum();
                prop_assert!(
                    mass <= prev + 1e-12,
                    "mass on p-favored tokens rose from {prev} to {mass} at alpha {alpha}"
                );
                prev = mass;
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_stops() {
        let model = probe_model(true, 3);
        let params = SteeringParams { alpha: 0.3, max_len: 20, ..SteeringParams::default() };
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            generate(&model, &[1, 4, 3], Some(2), &params, &mut rng).unwrap()
        };
        let a = run(7);
        let b = run(7);
        assert_eq!(a.tokens, b.tokens);
        assert!(a.trace.bitwise_eq(&b.trace));
        assert!(a.tokens.len() <= 20);
        assert_eq!(a.trace.records.len(), a.tokens.len() - 1);
        assert_eq!(a.diagnostics.len(), a.tokens.len() - 3);
        if let Some(pos) = a.tokens.iter().position(|&t| t == 2) {
            assert!(pos >= 3, "prompt tokens are not matched against the end token");
            assert_eq!(pos, a.tokens.len() - 1, "generation continued past the end token");
        }
    }

    #[test]
    fn trace_stores_raw_logits_regardless_of_steering() {
        // Heavy steering, then re-derive logits for the same realized
        // sequence with the whole-sequence recorder: the trace must agree —
        // steering never leaks into stored logits.
        let model = probe_model(true, 11);
        let params = SteeringParams {
            alpha: 0.9,
            fixed_entropy: true,
            temperature: 1.7,
            max_len: 16,
            ..SteeringParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gen = generate(&model, &[1, 4, 9], None, &params, &mut rng).unwrap();
        let reference = crate::model::infer::record_trace(&model, &gen.tokens).unwrap();
        assert_eq!(gen.trace.records.len(), reference.records.len());
        for (a, b) in gen.trace.records.iter().zip(&reference.records) {
            assert_eq!(a.token_id, b.token_id);
            for k in 0..11 {
                assert!(
                    (a.full_logits[k] - b.full_logits[k]).abs() < 1e-5,
                    "full logits diverge: {} vs {}",
                    a.full_logits[k],
                    b.full_logits[k]
                );
                assert!((a.mtp_logits[k] - b.mtp_logits[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_bad_setups() {
        let model = probe_model(false, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plain = {
            let config = model.spec.config;
            MicroModel::new(ModelSpec::new(ModelKind::Plain, config), 3).unwrap()
        };
        assert!(matches!(
            generate(&plain, &[1], None, &SteeringParams::default(), &mut rng),
            Err(SteeringError::Model(ModelError::MissingMtpHead))
        ));
        assert!(generate(&model, &[], None, &SteeringParams::default(), &mut rng).is_err());
        let bad = SteeringParams { temperature: 0.0, ..SteeringParams::default() };
        assert!(generate(&model, &[1], None, &bad, &mut rng).is_err());
        let long = SteeringParams { max_len: 2, ..SteeringParams::default() };
        assert!(generate(&model, &[1, 2, 3], None, &long, &mut rng).is_err());
    }

    #[test]
    fn diagnostics_jsonl_layout() {
        let diags = [
            StepDiagnostics { mtd: 0.5, entropy_p: 1.25, entropy_s: 1.25, folded: false },
            StepDiagnostics { mtd: f64::INFINITY, entropy_p: 2.0, entropy_s: 1.0, folded: true },
        ];
        let text = diagnostics_jsonl(&diags);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            "{\"step\":0,\"mtd\":0.5,\"entropy_p\":1.25,\"entropy_s\":1.25,\"folded\":false}"
        );
        // Non-finite divergence stays valid JSON.
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert!(v["mtd"].is_null());
        assert_eq!(v["folded"], serde_json::Value::Bool(true));
    }
}
