//! Multiple Token Divergence (MTD) laboratory.
//!
//! A language model trained with a multi-token-prediction (MTP) head carries
//! two opinions about the next token: the full autoregressive distribution
//! `p`, computed from the complete hidden state, and the shallow MTP
//! distribution `m`, computed by a small head that skips most of the stack.
//! The KL divergence between them — the *multiple token divergence* —
//! measures how much the deep computation mattered at that position. Tokens
//! that any shallow head could have guessed score near zero; tokens that
//! required real sequential work score high.
//!
//! This crate provides the full measurement-and-steering stack at desk
//! scale:
//!
//! - [`geometry`] — categorical distributions, softmax/entropy/KL, the
//!   Fisher–Rao geodesic between distributions (via the square-root sphere
//!   embedding), and fixed-entropy projection.
//! - [`divergence`] — per-token MTD/NLL from recorded logit pairs, sequence
//!   aggregation, and a bit-exact binary trace format.
//! - [`model`] — a small decoder-only transformer with optional MTP and
//!   PHi (latent-prediction) heads, trained by hand-rolled backprop so every
//!   gradient is checkable against finite differences.
//! - [`tasks`] — the synthetic task battery: memorized sequences, memorized
//!   programs, in-context language learning over random automata, random
//!   tokens, copying, plus creative discovery/construction tasks.
//! - [`steering`] — divergence steering: sampling from a geodesic
//!   interpolation (or extrapolation) between `p` and `m`, with optional
//!   fixed-entropy projection.
//! - [`analysis`] — correlation, partial correlation, bootstrap intervals,
//!   binned curves, and creativity scoring over steering grids.
//! - [`pipeline`] — reproducible experiment orchestration behind the
//!   `mtdlab` command-line tool.
//!
//! The `examples/` directory is the guided tour: each example exercises one
//! capability end to end and prints what it finds.

pub mod analysis;
pub mod divergence;
pub mod geometry;
pub mod model;
pub mod pipeline;
pub mod steering;
pub mod tasks;

pub use divergence::{sequence_stats, LogitTrace, SequenceStats};
pub use geometry::{entropy, kl_divergence, softmax_with_temperature, CategoricalDist};
pub use model::{MicroModel, ModelConfig, ModelKind, ModelSpec, TrainConfig};
pub use pipeline::RunConfig;
pub use steering::{generate, steer_distribution, SteeringParams};

