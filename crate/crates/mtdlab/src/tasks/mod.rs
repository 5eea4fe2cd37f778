//! Synthetic task suite.
//!
//! Two families share one token vocabulary:
//!
//! * the **five-task mixture** used to study what divergence responds to —
//!   `memorized_seq` (frozen random sequences), `memorized_prog` (frozen
//!   probabilistic automata), `icll` (a fresh automaton per sample, binned by
//!   description length), `random` (irreducible noise), and `copy`
//!   (in-context reuse of an earlier window);
//! * the **creativity tasks** in [`creative`] (open-ended discovery and
//!   construction), which reuse the control tokens and the node region.
//!
//! Vocabulary layout (shared so one model can host any task):
//!
//! ```text
//! 0         BEGIN     sequence start
//! 1         SEP       prompt/answer separator (construction tasks)
//! 2         END       item terminator (creativity tasks)
//! 3..18     automaton symbols (16) / generic data region
//! 19..      node tokens for graph-structured tasks
//! ```
//!
//! Every mixture sample is `BEGIN` followed by exactly `body_len` body
//! tokens, so all training sequences have equal length and uniform loss
//! weighting needs no masking.

pub mod creative;
pub mod pfa;

use pfa::Pfa;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Sequence-start token; every sample begins with it.
pub const BEGIN_TOKEN: u32 = 0;
/// Separator between a construction prompt and its answer.
pub const SEP_TOKEN: u32 = 1;
/// Terminator for creativity items.
pub const END_TOKEN: u32 = 2;
/// First generic data / automaton-symbol token.
pub const DATA_BASE: u32 = 3;
/// Automaton symbols occupy `PFA_SYMBOL_BASE .. PFA_SYMBOL_BASE + 16`.
pub const PFA_SYMBOL_BASE: u32 = 3;
/// First graph-node token (right after the 16 automaton symbols).
pub const NODE_BASE: u32 = PFA_SYMBOL_BASE + pfa::PFA_ALPHABET as u32;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid automaton: {what}")]
    InvalidPfa { what: String },
    #[error("complexity level {level} is outside 1..=10")]
    BadComplexityLevel { level: u8 },
    #[error("no automaton landed in complexity bin {level} within the attempt budget")]
    BinUnreachable { level: u8 },
    #[error("world generation failed: {what}")]
    WorldGeneration { what: String },
    #[error("bad task configuration: {what}")]
    BadConfig { what: String },
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("could not parse {path}: {what}")]
    Parse { path: PathBuf, what: String },
}

/// The five mixture tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MemorizedSeq,
    MemorizedProg,
    Icll,
    Random,
    Copy,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::MemorizedSeq,
        TaskKind::MemorizedProg,
        TaskKind::Icll,
        TaskKind::Random,
        TaskKind::Copy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::MemorizedSeq => "memorized_seq",
            TaskKind::MemorizedProg => "memorized_prog",
            TaskKind::Icll => "icll",
            TaskKind::Random => "random",
            TaskKind::Copy => "copy",
        }
    }
}

/// One training/evaluation sequence plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    /// `BEGIN` followed by `body_len` body tokens.
    pub tokens: Vec<u32>,
    pub task: TaskKind,
    /// Complexity bin 1..=10 (in-context learning samples only).
    pub complexity_level: Option<u8>,
    /// Description length in bits of the generating automaton, when there is
    /// one (`icll` and `memorized_prog`).
    pub source_dl: Option<f64>,
}

/// Shape shared by every stream drawn against one set of assets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// Model vocabulary size; the data region is `DATA_BASE .. vocab_size`.
    pub vocab_size: u32,
    /// Body tokens per sample (sequence length minus the `BEGIN` prefix).
    pub body_len: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { vocab_size: 64, body_len: 95 }
    }
}

impl StreamConfig {
    fn validate(&self) -> Result<(), TaskError> {
        if self.vocab_size <= NODE_BASE {
            return Err(TaskError::BadConfig {
                what: format!(
                    "vocab_size {} too small: automaton symbols need at least {}",
                    self.vocab_size,
                    NODE_BASE + 1
                ),
            });
        }
        if self.body_len < 8 {
            return Err(TaskError::BadConfig {
                what: format!("body_len {} too small for the copy window layout", self.body_len),
            });
        }
        Ok(())
    }
}

/// Frozen materials the memorized tasks are defined against. Generated once
/// per experiment (see [`TaskAssets::generate`]) and stored as JSON so every
/// later stage sees the identical ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAssets {
    pub config: StreamConfig,
    /// Generation seed, kept for provenance.
    pub seed: u64,
    /// Ten frozen uniform-random body sequences.
    pub memorized_seqs: Vec<Vec<u32>>,
    /// Ten frozen automata, one per complexity bin 1..=10.
    pub memorized_pfas: Vec<Pfa>,
    /// Complexity bin of each frozen automaton (parallel to `memorized_pfas`).
    pub memorized_pfa_levels: Vec<u8>,
    /// The description-length bin edges in force when these assets were made
    /// (a copy of the frozen reference deciles, kept for self-containment).
    pub dl_bin_edges: Vec<f64>,
}

impl TaskAssets {
    /// Deterministically builds assets from a seed: 10 memorized sequences
    /// and one automaton per complexity bin.
    pub fn generate(seed: u64, config: StreamConfig) -> Result<Self, TaskError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let memorized_seqs: Vec<Vec<u32>> = (0..10)
            .map(|_| {
                (0..config.body_len)
                    .map(|_| rng.random_range(DATA_BASE..config.vocab_size))
                    .collect()
            })
            .collect();
        let mut memorized_pfas = Vec::with_capacity(10);
        let mut memorized_pfa_levels = Vec::with_capacity(10);
        for level in 1..=10u8 {
            memorized_pfas.push(pfa::generate_pfa(level, &mut rng)?);
            memorized_pfa_levels.push(level);
        }
        Ok(Self {
            config,
            seed,
            memorized_seqs,
            memorized_pfas,
            memorized_pfa_levels,
            dl_bin_edges: pfa::DL_DECILE_EDGES.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TaskError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| TaskError::Parse {
            path: path.to_path_buf(),
            what: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| TaskError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TaskError> {
        let text = std::fs::read_to_string(path).map_err(|e| TaskError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let assets: Self = serde_json::from_str(&text).map_err(|e| TaskError::Parse {
            path: path.to_path_buf(),
            what: e.to_string(),
        })?;
        for p in &assets.memorized_pfas {
            p.validate().map_err(|e| TaskError::Parse {
                path: path.to_path_buf(),
                what: format!("stored automaton failed validation: {e}"),
            })?;
        }
        Ok(assets)
    }
}

/// Draws one sample of the given kind.
fn sample_one<R: Rng + ?Sized>(
    kind: TaskKind,
    assets: &TaskAssets,
    rng: &mut R,
) -> Result<TaskSample, TaskError> {
    let cfg = &assets.config;
    let body_len = cfg.body_len;
    let mut tokens = Vec::with_capacity(body_len + 1);
    tokens.push(BEGIN_TOKEN);
    let mut complexity_level = None;
    let mut source_dl = None;
    match kind {
        TaskKind::MemorizedSeq => {
            let idx = rng.random_range(0..assets.memorized_seqs.len());
            tokens.extend_from_slice(&assets.memorized_seqs[idx]);
        }
        TaskKind::MemorizedProg => {
            let idx = rng.random_range(0..assets.memorized_pfas.len());
            let p = &assets.memorized_pfas[idx];
            tokens.extend(
                pfa::sample_sequence(p, body_len, rng)
                    .into_iter()
                    .map(|s| PFA_SYMBOL_BASE + s),
            );
            source_dl = Some(pfa::description_length(p));
        }
        TaskKind::Icll => {
            let level = rng.random_range(1..=10u8);
            let p = pfa::generate_pfa(level, rng)?;
            tokens.extend(
                pfa::sample_sequence(&p, body_len, rng)
                    .into_iter()
                    .map(|s| PFA_SYMBOL_BASE + s),
            );
            complexity_level = Some(level);
            source_dl = Some(pfa::description_length(&p));
        }
        TaskKind::Random => {
            tokens.extend((0..body_len).map(|_| rng.random_range(DATA_BASE..cfg.vocab_size)));
        }
        TaskKind::Copy => {
            // Fresh noise, then a quarter-length window from the first half
            // duplicated into the second half: the repeat is predictable
            // in-context while everything else stays irreducible.
            let mut body: Vec<u32> = (0..body_len)
                .map(|_| rng.random_range(DATA_BASE..cfg.vocab_size))
                .collect();
            let w = body_len / 4;
            let half = body_len / 2;
            let src = rng.random_range(0..=half - w);
            let dst = rng.random_range(half..=body_len - w);
            let window: Vec<u32> = body[src..src + w].to_vec();
            body[dst..dst + w].copy_from_slice(&window);
            tokens.extend(body);
        }
    }
    Ok(TaskSample { tokens, task: kind, complexity_level, source_dl })
}

/// Infinite deterministic stream of samples of one task.
///
/// Panics only if the automaton prior fails to hit a complexity bin within
/// its attempt budget — the bins are prior deciles, so each draw hits with
/// probability ~0.1 and the budget of 1000 makes failure astronomically
/// unlikely.
pub fn make_task_stream<'a>(
    kind: TaskKind,
    seed: u64,
    assets: &'a TaskAssets,
) -> impl Iterator<Item = TaskSample> + 'a {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::iter::repeat_with(move || {
        sample_one(kind, assets, &mut rng).expect("task stream sampling failed")
    })
}

/// Infinite deterministic stream mixing all five tasks uniformly at random.
pub fn make_mixture_stream<'a>(
    seed: u64,
    assets: &'a TaskAssets,
) -> impl Iterator<Item = TaskSample> + 'a {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::iter::repeat_with(move || {
        let kind = TaskKind::ALL[rng.random_range(0..TaskKind::ALL.len())];
        sample_one(kind, assets, &mut rng).expect("task stream sampling failed")
    })
}
