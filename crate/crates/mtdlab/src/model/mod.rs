//! Desk-scale decoder-only transformer with two optional introspection
//! attachments:
//!
//! * a **shallow predictor head** ([`MtpConfig`]) — a learned projection of
//!   the previous position's hidden state (optionally concatenated with the
//!   newest token's embedding), run through a small block stack and the
//!   shared output head. Because it sees only one hidden state and at most
//!   one embedding, it can express what is cheap to predict; the divergence
//!   between it and the full model is the crate's central measurement.
//! * a **latent bottleneck layer** ([`PhiConfig`]) — a sampled
//!   information-bottleneck inserted between two groups of layers, whose
//!   posterior-vs-prior KL prices the information the model injects at each
//!   position.
//!
//! The base model is deliberately conventional: tied input/output
//! embeddings, pre-norm RMSNorm blocks, rotary positions, SwiGLU MLPs, Adam
//! with linear warmup. Everything runs in `f64` on the CPU and every run is
//! bit-reproducible from its seeds.

pub mod checkpoint;
pub mod graph;
pub mod infer;
pub mod net;
pub mod train;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model configuration: {what}")]
    BadConfig { what: String },
    #[error("input length {len} exceeds context length {context_len}")]
    InputTooLong { len: usize, context_len: usize },
    #[error("token {token} out of range for vocabulary size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: u32 },
    #[error("operation requires a model with a shallow predictor head")]
    MissingMtpHead,
    #[error("bad input: {what}")]
    BadInput { what: String },
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
}

/// Backbone shape. `tied_embeddings` is always true — the flag exists so the
/// serialized config states the fact explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: u32,
    pub context_len: usize,
    pub tied_embeddings: bool,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; experiments at the lower end of desk scale
    /// shrink these further (see the examples).
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_mlp: 256,
            vocab_size: 64,
            context_len: 256,
            tied_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |what: String| Err(ModelError::BadConfig { what });
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_mlp == 0 {
            return fail("layer, width, head, and MLP sizes must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return fail(format!(
                "head dimension {} must be even for rotary position pairs",
                self.d_model / self.n_heads
            ));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.context_len < 2 {
            return fail(format!("context_len {} < 2", self.context_len));
        }
        if !self.tied_embeddings {
            return fail("untied embeddings are not supported: tied_embeddings must be true".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Shallow predictor head configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtpConfig {
    /// Transformer blocks inside the head (default 1 — the head must stay
    /// much shallower than the backbone for its divergence to mean
    /// anything).
    pub n_blocks: usize,
    /// Whether the head also sees the newest token's embedding.
    pub access_latest_embedding: bool,
}

impl Default for MtpConfig {
    fn default() -> Self {
        Self { n_blocks: 1, access_latest_embedding: true }
    }
}

impl MtpConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_blocks == 0 {
            return Err(ModelError::BadConfig { what: "mtp n_blocks must be ≥ 1".into() });
        }
        Ok(())
    }
}

/// Latent bottleneck configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiConfig {
    /// Boundary between the bottom and top layer groups: the bottleneck sits
    /// after layer `placement_layer` (1-based count of bottom layers).
    pub placement_layer: usize,
    pub z_dim: usize,
    /// Whether the latent prior also sees the newest token's embedding.
    pub access_latest_embedding: bool,
    /// Per-dimension floor (nats) on the posterior/prior KL; keeps the
    /// latent channel from collapsing to the prior early in training.
    pub free_bits: f64,
}

impl PhiConfig {
    /// Places the bottleneck at roughly 5/6 depth, mirroring the usual
    /// late-layer placement, with z matching the model width.
    pub fn default_for(config: &ModelConfig) -> Self {
        let raw = (config.n_layers as f64 * 0.83).round() as usize;
        Self {
            placement_layer: raw.clamp(1, config.n_layers.saturating_sub(1).max(1)),
            z_dim: config.d_model,
            access_latest_embedding: true,
            free_bits: 0.02,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let fail = |what: String| Err(ModelError::BadConfig { what });
        if self.placement_layer == 0 || self.placement_layer >= config.n_layers {
            return fail(format!(
                "placement_layer {} must satisfy 1 ≤ p < n_layers = {}",
                self.placement_layer, config.n_layers
            ));
        }
        if self.z_dim == 0 {
            return fail("z_dim must be positive".into());
        }
        if !(self.free_bits.is_finite() && self.free_bits >= 0.0) {
            return fail(format!("free_bits {} must be a non-negative real", self.free_bits));
        }
        Ok(())
    }
}

/// The four model variants the experiments compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Plain next-token language model.
    Plain,
    /// Shallow head trained with its own next-token loss.
    MtpNll,
    /// Shallow head trained to minimize its divergence from the (frozen)
    /// full distribution.
    MtpMtd,
    /// Latent-bottleneck model; no shallow head.
    Phi,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Plain => "plain",
            ModelKind::MtpNll => "mtp_nll",
            ModelKind::MtpMtd => "mtp_mtd",
            ModelKind::Phi => "phi",
        }
    }

    /// Name of the auxiliary loss this kind trains with, if any.
    pub fn aux_loss(&self) -> Option<&'static str> {
        match self {
            ModelKind::Plain => None,
            ModelKind::MtpNll => Some("mtp"),
            ModelKind::MtpMtd => Some("mtd"),
            ModelKind::Phi => Some("phi"),
        }
    }

    pub fn has_mtp_head(&self) -> bool {
        matches!(self, ModelKind::MtpNll | ModelKind::MtpMtd)
    }
}

/// Complete architectural identity of a model: kind, backbone, attachments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub mtp: Option<MtpConfig>,
    pub phi: Option<PhiConfig>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, config: ModelConfig) -> Self {
        let mtp = kind.has_mtp_head().then(MtpConfig::default);
        let phi = (kind == ModelKind::Phi).then(|| PhiConfig::default_for(&config));
        Self { kind, config, mtp, phi }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let fail = |what: String| Err(ModelError::BadConfig { what });
        match (self.kind.has_mtp_head(), &self.mtp) {
            (true, None) => return fail(format!("kind {} needs an mtp config", self.kind.name())),
            (false, Some(_)) => {
                return fail(format!("kind {} must not carry an mtp config", self.kind.name()))
            }
            (true, Some(m)) => m.validate()?,
            (false, None) => {}
        }
        match (self.kind == ModelKind::Phi, &self.phi) {
            (true, None) => return fail("kind phi needs a phi config".into()),
            (false, Some(_)) => {
                return fail(format!("kind {} must not carry a phi config", self.kind.name()))
            }
            (true, Some(p)) => p.validate(&self.config)?,
            (false, None) => {}
        }
        Ok(())
    }
}

/// Optimization schedule and loss mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    /// Loss name → weight. Must contain "nll" plus exactly the auxiliary
    /// loss the model kind trains with ("mtp", "mtd", or "phi"), or "nll"
    /// alone for a plain model.
    pub loss_weights: BTreeMap<String, f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults for a kind: all losses weighted equally, 3000
    /// steps (8000 for the bottleneck kind, whose latent needs longer).
    pub fn for_kind(kind: ModelKind) -> Self {
        let mut loss_weights = BTreeMap::new();
        loss_weights.insert("nll".to_string(), 1.0);
        if let Some(aux) = kind.aux_loss() {
            loss_weights.insert(aux.to_string(), 1.0);
        }
        Self {
            steps: if kind == ModelKind::Phi { 8000 } else { 3000 },
            batch_size: 16,
            warmup_steps: 500,
            learning_rate: 3e-4,
            grad_clip_norm: 1.0,
            loss_weights,
            seed: 0,
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<(), ModelError> {
        let fail = |what: String| Err(ModelError::BadConfig { what });
        if self.batch_size == 0 || self.warmup_steps == 0 {
            return fail("batch_size and warmup_steps must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.grad_clip_norm > 0.0 && self.grad_clip_norm.is_finite()) {
            return fail(format!("grad_clip_norm {} must be positive", self.grad_clip_norm));
        }
        if !self.loss_weights.contains_key("nll") {
            return fail("loss_weights must contain \"nll\"".into());
        }
        let aux_present: Vec<&str> = ["mtp", "mtd", "phi"]
            .into_iter()
            .filter(|k| self.loss_weights.contains_key(*k))
            .collect();
        match (kind.aux_loss(), aux_present.as_slice()) {
            (None, []) => {}
            (Some(want), [have]) if want == *have => {}
            (want, have) => {
                return fail(format!(
                    "kind {} trains {:?} but loss_weights has auxiliaries {:?}",
                    kind.name(),
                    want,
                    have
                ))
            }
        }
        for (name, w) in &self.loss_weights {
            if !["nll", "mtp", "mtd", "phi"].contains(&name.as_str()) {
                return fail(format!("unknown loss name {name:?}"));
            }
            if !(w.is_finite() && *w > 0.0) {
                return fail(format!("loss weight {name} = {w} must be positive"));
            }
        }
        Ok(())
    }
}

/// Named dense parameters with stable ordering (creation order).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> usize {
        assert!(
            self.index.insert(name.to_string(), self.values.len()).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter name {name}"))
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.values[self.idx(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let i = self.idx(name);
        &mut self.values[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// A model: spec plus parameters. Forward passes live in [`net`], training
/// in [`train`], decoding in [`infer`], serialization in [`checkpoint`].
#[derive(Debug, Clone, PartialEq)]
pub struct MicroModel {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

/// Initialization scale for general weight matrices.
const INIT_STD: f64 = 0.02;

impl MicroModel {
    /// Builds a model with freshly initialized parameters: scaled-normal
    /// weights (std 0.02, residual output projections shrunk by
    /// `1/sqrt(2 · total_blocks)`), unit norm gains, and zero vectors for
    /// the learned initial states.
    pub fn new(spec: ModelSpec, init_seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let cfg = &spec.config;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let total_blocks = cfg.n_layers
            + spec.mtp.map_or(0, |m| m.n_blocks)
            + spec.phi.map_or(0, |_| 1);
        let res_scale = 1.0 / (2.0 * total_blocks as f64).sqrt();

        let mut params = ParamStore::new();
        let randn = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_fn((rows, cols), |_| normal.sample(rng) * scale)
        };

        params.add("embed", randn(&mut rng, cfg.vocab_size as usize, cfg.d_model, 1.0));
        let add_block = |params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| {
            let d = cfg.d_model;
            let m = cfg.d_mlp;
            params.add(&format!("{prefix}.attn_norm"), Array2::ones((1, d)));
            params.add(&format!("{prefix}.wq"), randn(rng, d, d, 1.0));
            params.add(&format!("{prefix}.wk"), randn(rng, d, d, 1.0));
            params.add(&format!("{prefix}.wv"), randn(rng, d, d, 1.0));
            params.add(&format!("{prefix}.wo"), randn(rng, d, d, res_scale));
            params.add(&format!("{prefix}.mlp_norm"), Array2::ones((1, d)));
            params.add(&format!("{prefix}.wgate"), randn(rng, d, m, 1.0));
            params.add(&format!("{prefix}.wup"), randn(rng, d, m, 1.0));
            params.add(&format!("{prefix}.wdown"), randn(rng, m, d, res_scale));
        };
        for layer in 0..cfg.n_layers {
            add_block(&mut params, &mut rng, &format!("layer{layer}"));
        }
        params.add("final_norm", Array2::ones((1, cfg.d_model)));

        if let Some(mtp) = &spec.mtp {
            let in_dim = if mtp.access_latest_embedding { 2 * cfg.d_model } else { cfg.d_model };
            params.add("mtp.proj", randn(&mut rng, in_dim, cfg.d_model, 1.0));
            params.add("mtp.init", Array2::zeros((1, cfg.d_model)));
            for b in 0..mtp.n_blocks {
                add_block(&mut params, &mut rng, &format!("mtp.block{b}"));
            }
            params.add("mtp.final_norm", Array2::ones((1, cfg.d_model)));
        }

        if let Some(phi) = &spec.phi {
            let z = phi.z_dim;
            params.add("phi.post", randn(&mut rng, cfg.d_model, 2 * z, 1.0));
            params.add("phi.dec", randn(&mut rng, z, cfg.d_model, 1.0));
            params.add("phi.z0", Array2::zeros((1, z)));
            let in_dim = if phi.access_latest_embedding { z + cfg.d_model } else { z };
            params.add("phi.prior_proj", randn(&mut rng, in_dim, cfg.d_model, 1.0));
            add_block(&mut params, &mut rng, "phi.prior_block0");
            params.add("phi.prior_norm", Array2::ones((1, cfg.d_model)));
            params.add("phi.prior_head", randn(&mut rng, cfg.d_model, 2 * z, 1.0));
        }

        Ok(Self { spec, params })
    }

    /// Rejects token ids outside the vocabulary and overlong inputs.
    pub fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.spec.config.context_len {
            return Err(ModelError::InputTooLong {
                len: tokens.len(),
                context_len: self.spec.config.context_len,
            });
        }
        for &t in tokens {
            if t >= self.spec.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: t,
                    vocab_size: self.spec.config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { n_heads: 3, ..ModelConfig::default() };
        assert!(bad.validate().is_err(), "d_model 128 not divisible by 3");
        let bad = ModelConfig { context_len: 1, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { tied_embeddings: false, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spec_requires_matching_attachments() {
        let cfg = ModelConfig::default();
        for kind in [ModelKind::Plain, ModelKind::MtpNll, ModelKind::MtpMtd, ModelKind::Phi] {
            ModelSpec::new(kind, cfg).validate().unwrap();
        }
        let mut spec = ModelSpec::new(ModelKind::Plain, cfg);
        spec.mtp = Some(MtpConfig::default());
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::new(ModelKind::MtpMtd, cfg);
        spec.mtp = None;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn train_config_loss_weight_invariants() {
        for kind in [ModelKind::Plain, ModelKind::MtpNll, ModelKind::MtpMtd, ModelKind::Phi] {
            TrainConfig::for_kind(kind).validate(kind).unwrap();
        }
        // Wrong auxiliary for the kind.
        let cfg = TrainConfig::for_kind(ModelKind::MtpNll);
        assert!(cfg.validate(ModelKind::MtpMtd).is_err());
        // Missing nll.
        let mut cfg = TrainConfig::for_kind(ModelKind::Plain);
        cfg.loss_weights.remove("nll");
        assert!(cfg.validate(ModelKind::Plain).is_err());
        // Two auxiliaries.
        let mut cfg = TrainConfig::for_kind(ModelKind::MtpNll);
        cfg.loss_weights.insert("mtd".into(), 1.0);
        assert!(cfg.validate(ModelKind::MtpNll).is_err());
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let spec = ModelSpec::new(ModelKind::MtpMtd, ModelConfig::default());
        let a = MicroModel::new(spec.clone(), 7).unwrap();
        let b = MicroModel::new(spec, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.params.get("embed").dim(), (64, 128));
        assert_eq!(a.params.get("mtp.proj").dim(), (256, 128), "access doubles the input");
        assert_eq!(a.params.get("mtp.init"), &Array2::<f64>::zeros((1, 128)));
        // Learned-zero initial states; norms start at one.
        assert!(a.params.get("final_norm").iter().all(|&v| v == 1.0));
    }

    #[test]
    fn phi_default_placement_tracks_depth() {
        let cfg = ModelConfig::default();
        assert_eq!(PhiConfig::default_for(&cfg).placement_layer, 3, "4 layers → after layer 3");
        let two = ModelConfig { n_layers: 2, ..cfg };
        assert_eq!(PhiConfig::default_for(&two).placement_layer, 1);
        let spec = ModelSpec::new(ModelKind::Phi, cfg);
        let m = MicroModel::new(spec, 1).unwrap();
        assert_eq!(m.params.get("phi.post").dim(), (128, 256));
        assert_eq!(m.params.get("phi.z0"), &Array2::<f64>::zeros((1, 128)));
    }

    #[test]
    fn token_checks() {
        let spec = ModelSpec::new(ModelKind::Plain, ModelConfig::default());
        let m = MicroModel::new(spec, 1).unwrap();
        assert!(m.check_tokens(&[0, 5, 63]).is_ok());
        assert!(matches!(
            m.check_tokens(&[64]),
            Err(ModelError::TokenOutOfRange { token: 64, .. })
        ));
        let long = vec![0u32; 257];
        assert!(matches!(m.check_tokens(&long), Err(ModelError::InputTooLong { .. })));
    }
}
