//! Experiment pipelines: a structured run configuration, content-hashed
//! provenance, and the six orchestration commands (`gen-assets`, `train`,
//! `eval`, `steer`, `sweep`, `analyze`) that the CLI binary and the examples
//! both drive.
//!
//! # Run configuration schema (TOML)
//!
//! Every field has a default; an empty file is a valid desk-scale run.
//! Precedence is command-line flags > config file > defaults.
//!
//! ```toml
//! name = "run"           # experiment name = output subdirectory
//! seed = 0               # master seed for shared artifacts (assets, worlds)
//! seeds = [0, 1, 2]      # replication seeds (one model per entry)
//! # out_dir = "runs"     # output root; flags and $MTDLAB_OUT override
//!
//! [model]
//! kind = "mtp_mtd"       # plain | mtp_nll | mtp_mtd | phi
//! [model.config]
//! n_layers = 4
//! d_model = 128
//! n_heads = 4
//! d_mlp = 256
//! vocab_size = 64
//! context_len = 256
//! tied_embeddings = true
//! [model.mtp]            # optional; defaults by kind
//! n_blocks = 1
//! access_latest_embedding = true
//! # [model.phi]          # optional; defaults by kind (phi models only)
//!
//! [train]                # every field optional; defaults by model kind
//! steps = 3000
//! batch_size = 16
//! warmup_steps = 500
//! learning_rate = 3e-4
//! grad_clip_norm = 1.0
//! # [train.loss_weights] # name -> weight; defaults to 1.0 each
//!
//! [tasks]
//! stream = "mixture"     # mixture | memorized_seq | memorized_prog | icll
//!                        # | random | copy | sibling_discovery
//!                        # | triangle_discovery | circle_construction
//!                        # | line_construction
//! [tasks.stream_config]  # five-task streams
//! vocab_size = 64
//! body_len = 95
//! [tasks.world]          # creative-world sizes (see tasks::creative)
//!
//! [eval]
//! n_sequences = 200      # fresh sequences per (seed, task)
//! n_traces = 2           # .mtdt trace files kept per (seed, task)
//!
//! [steer]
//! temperature = 1.0      # single-run settings (steer command)
//! alpha = 0.0
//! temps = [0.7, 1.0, 1.3]            # sweep grid (sweep command)
//! alphas = [-0.4, -0.2, 0.0, 0.2, 0.4]
//! n_items = 64           # generations per run / per sweep cell
//! entropy_mode = "geodesic"          # geodesic | fixed
//! # top_k = 50           # optional support restriction
//! max_len = 0            # total length cap; 0 = model context length
//!
//! [analyze]
//! n_bins = 10
//! n_resamples = 10000
//! level = 0.95
//! normalization = "mean" # mean | zscore | max
//! ```
//!
//! # Provenance and resumability
//!
//! Every text artifact begins with a provenance header (`config_hash`,
//! `seed`, `version`); binary artifacts (`.mtdm`, `.mtdt`) carry the same
//! keys in their meta tables. The hash covers exactly the config sections
//! the producing command consumes, so re-running a command whose outputs
//! already exist with a matching hash is a no-op, while outputs from a
//! *different* config are only overwritten under `--force`.

mod commands;

pub use commands::{
    cmd_analyze, cmd_eval, cmd_gen_assets, cmd_steer, cmd_sweep, cmd_train, CmdOutcome,
};

/// Artifact names inside a run directory.
pub mod files {
    pub const ASSETS: &str = "assets.json";
    pub const WORLDS: &str = "creative_worlds.json";
    pub const GENERATIONS: &str = "generations.jsonl";
    pub const DIAGNOSTICS: &str = "steer_diagnostics.jsonl";
    pub const TASK_SCORES: &str = "task_scores.csv";
    pub const COMPLEXITY: &str = "complexity_partial.csv";
    pub const CURVES: &str = "binned_curves.csv";
    pub const PLOT_DATA: &str = "plot_data.json";

    pub fn checkpoint(seed: u64) -> String {
        format!("model_seed{seed}.mtdm")
    }

    pub fn loss_curve(seed: u64) -> String {
        format!("loss_seed{seed}.csv")
    }

    pub fn records(seed: u64) -> String {
        format!("records_seed{seed}.jsonl")
    }

    pub fn trace(seed: u64, task: &str, index: usize) -> String {
        format!("trace_seed{seed}_{task}_{index}.mtdt")
    }

    pub fn creativity_grid(seed: u64) -> String {
        format!("creativity_grid_seed{seed}.csv")
    }
}

use crate::analysis::EntropyMode;
use crate::model::{ModelConfig, ModelError, ModelKind, ModelSpec, MtpConfig, PhiConfig, TrainConfig};
use crate::tasks::creative::CreativeTask;
use crate::tasks::{StreamConfig, TaskError, TaskKind};
use crate::tasks::creative::WorldParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config error in {path}: {what}")]
    Schema { path: PathBuf, what: String },
    #[error("bad configuration: {what}")]
    Config { what: String },
    #[error("missing input {path}: run `mtdlab {produce_with}` first")]
    MissingInput { path: PathBuf, produce_with: &'static str },
    #[error(
        "{path} exists but was produced by a different configuration \
         (config hash {found:?}, expected {expected}); pass --force to overwrite"
    )]
    Stale { path: PathBuf, found: Option<String>, expected: String },
    #[error(
        "input {path} was produced by a different configuration than the current one; \
         re-run `mtdlab {produce_with}`"
    )]
    StaleInput { path: PathBuf, produce_with: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Steering(#[from] crate::steering::SteeringError),
    #[error(transparent)]
    Divergence(#[from] crate::divergence::DivergenceError),
    #[error(transparent)]
    Trace(#[from] crate::divergence::TraceError),
    #[error(transparent)]
    Checkpoint(#[from] crate::model::checkpoint::CheckpointError),
    #[error("analysis failed: {0}")]
    Analysis(#[from] crate::analysis::AnalysisError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Complete description of one experiment run. `seed` governs shared
/// artifacts (assets, worlds, sweeps); `seeds` lists the replication seeds
/// that each get their own model. Given equal configs, every artifact is
/// byte-identical across invocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    /// Output root from the config file; `--out` and `$MTDLAB_OUT` take
    /// precedence (see [`resolve_out_root`]).
    pub out_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub tasks: TaskSection,
    pub eval: EvalSection,
    pub steer: SteerSection,
    pub analyze: AnalyzeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".to_string(),
            seed: 0,
            seeds: vec![0, 1, 2],
            out_dir: None,
            model: ModelSection::default(),
            train: TrainSection::default(),
            tasks: TaskSection::default(),
            eval: EvalSection::default(),
            steer: SteerSection::default(),
            analyze: AnalyzeSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub config: ModelConfig,
    /// Explicit head config; `None` takes the kind's default.
    pub mtp: Option<MtpConfig>,
    /// Explicit bottleneck config; `None` takes the kind's default.
    pub phi: Option<PhiConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: ModelKind::MtpMtd, config: ModelConfig::default(), mtp: None, phi: None }
    }
}

impl ModelSection {
    pub fn to_spec(&self) -> Result<ModelSpec, PipelineError> {
        let mut spec = ModelSpec::new(self.kind, self.config);
        if self.mtp.is_some() {
            spec.mtp = self.mtp;
        }
        if self.phi.is_some() {
            spec.phi = self.phi;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Optional overrides on the model kind's default training recipe.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub warmup_steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub grad_clip_norm: Option<f64>,
    pub loss_weights: Option<BTreeMap<String, f64>>,
}

impl TrainSection {
    pub fn to_train_config(&self, kind: ModelKind, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::for_kind(kind);
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.warmup_steps {
            cfg.warmup_steps = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.grad_clip_norm {
            cfg.grad_clip_norm = v;
        }
        if let Some(v) = &self.loss_weights {
            cfg.loss_weights = v.clone();
        }
        cfg.seed = seed;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// Which data the models train on: `"mixture"`, a single five-task
    /// name, or a creative task name (see the module docs).
    pub stream: String,
    pub stream_config: StreamConfig,
    pub world: WorldParams,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            stream: "mixture".to_string(),
            stream_config: StreamConfig::default(),
            world: WorldParams::default(),
        }
    }
}

/// Parsed form of [`TaskSection::stream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Mixture,
    Single(TaskKind),
    Creative(CreativeTask),
}

impl StreamKind {
    pub fn parse(s: &str) -> Option<StreamKind> {
        if s == "mixture" {
            return Some(StreamKind::Mixture);
        }
        if let Some(&kind) = TaskKind::ALL.iter().find(|k| k.name() == s) {
            return Some(StreamKind::Single(kind));
        }
        [
            CreativeTask::SiblingDiscovery,
            CreativeTask::TriangleDiscovery,
            CreativeTask::CircleConstruction,
            CreativeTask::LineConstruction,
        ]
        .into_iter()
        .find(|t| t.name() == s)
        .map(StreamKind::Creative)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Fresh evaluation sequences per (seed, task).
    pub n_sequences: usize,
    /// How many of them additionally keep a full `.mtdt` trace file.
    pub n_traces: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n_sequences: 200, n_traces: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerSection {
    /// Single-run settings, used by the `steer` command.
    pub temperature: f64,
    pub alpha: f64,
    /// Sweep grids, used by the `sweep` command.
    pub temps: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Generations per steer run and per sweep cell.
    pub n_items: usize,
    pub entropy_mode: EntropyMode,
    pub top_k: Option<usize>,
    /// Total length cap (prompt included); 0 means the model's context.
    pub max_len: usize,
}

impl Default for SteerSection {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            alpha: 0.0,
            temps: vec![0.7, 1.0, 1.3],
            alphas: vec![-0.4, -0.2, 0.0, 0.2, 0.4],
            n_items: 64,
            entropy_mode: EntropyMode::Geodesic,
            top_k: None,
            max_len: 0,
        }
    }
}

/// Fig.-4-style task-score normalization. The paper does not pin this down;
/// `mean` (divide by the across-task mean) is the default, with `zscore`
/// and `max` available for sensitivity checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Mean,
    Zscore,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub n_bins: usize,
    pub n_resamples: usize,
    pub level: f64,
    pub normalization: Normalization,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self { n_bins: 10, n_resamples: 10_000, level: 0.95, normalization: Normalization::Mean }
    }
}

impl RunConfig {
    /// Parses a TOML config file; schema violations name the file.
    pub fn load(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| PipelineError::Schema { path: path.to_path_buf(), what: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks shared by every command.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |what: String| Err(PipelineError::Config { what });
        if self.name.is_empty()
            || self
                .name
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
        {
            return fail(format!(
                "name {:?} must be non-empty and use only [A-Za-z0-9_-] (it names a directory)",
                self.name
            ));
        }
        if self.seeds.is_empty() {
            return fail("seeds must list at least one replication seed".into());
        }
        let spec = self.model.to_spec()?;
        let Some(stream) = StreamKind::parse(&self.tasks.stream) else {
            return fail(format!(
                "tasks.stream {:?} is not a known stream (mixture, a five-task name, or a \
                 creative task name)",
                self.tasks.stream
            ));
        };
        match stream {
            StreamKind::Mixture | StreamKind::Single(_) => {
                let sc = &self.tasks.stream_config;
                if sc.vocab_size != spec.config.vocab_size {
                    return fail(format!(
                        "tasks.stream_config.vocab_size {} must equal model vocab_size {}",
                        sc.vocab_size, spec.config.vocab_size
                    ));
                }
                if sc.body_len + 1 > spec.config.context_len {
                    return fail(format!(
                        "sequences of {} tokens exceed the model context of {}",
                        sc.body_len + 1,
                        spec.config.context_len
                    ));
                }
            }
            StreamKind::Creative(task) => {
                let needed = creative_vocab_floor(task, &self.tasks.world);
                if needed > spec.config.vocab_size {
                    return fail(format!(
                        "creative task {} needs vocab_size >= {needed}, model has {}",
                        task.name(),
                        spec.config.vocab_size
                    ));
                }
                let worst = creative_item_len_ceiling(task, &self.tasks.world);
                if worst > spec.config.context_len {
                    return fail(format!(
                        "creative task {} items can reach {worst} tokens, above the model \
                         context of {}",
                        task.name(),
                        spec.config.context_len
                    ));
                }
            }
        }
        if !(0.0 < self.analyze.level && self.analyze.level < 1.0) {
            return fail(format!("analyze.level {} must lie in (0, 1)", self.analyze.level));
        }
        Ok(())
    }

    pub fn stream_kind(&self) -> StreamKind {
        StreamKind::parse(&self.tasks.stream).expect("validated config")
    }
}

/// Vocabulary a creative world needs, computable before the world is built.
fn creative_vocab_floor(task: CreativeTask, world: &WorldParams) -> u32 {
    use crate::tasks::NODE_BASE;
    let max_node = match task {
        CreativeTask::SiblingDiscovery => world.sibling.n_leaves,
        CreativeTask::TriangleDiscovery => world.triangle.n_nodes,
        CreativeTask::CircleConstruction => world.circle.n_nodes,
        CreativeTask::LineConstruction => world.line.n_nodes,
    };
    NODE_BASE + max_node as u32
}

/// Worst-case token length of one creative item (the construction prompt
/// embeds an edge list whose size is bounded by the complete graph).
fn creative_item_len_ceiling(task: CreativeTask, world: &WorldParams) -> usize {
    let construction = |p: &crate::tasks::creative::ConstructionParams| {
        // BEGIN + 2*max_edges + SEP + walk + END
        2 + p.n_nodes * (p.n_nodes - 1) + 1 + p.target_len + 1
    };
    match task {
        CreativeTask::SiblingDiscovery => 4,
        CreativeTask::TriangleDiscovery => 5,
        CreativeTask::CircleConstruction => construction(&world.circle),
        CreativeTask::LineConstruction => construction(&world.line),
    }
}

// ---------------------------------------------------------------------------
// Output locations
// ---------------------------------------------------------------------------

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MTDLAB_OUT";

/// Resolves the output root: `--out` flag > config `out_dir` > `$MTDLAB_OUT`
/// > `./runs`.
pub fn resolve_out_root(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.out_dir {
        return p.clone();
    }
    if let Some(p) = std::env::var_os(OUT_ENV) {
        if !p.is_empty() {
            return PathBuf::from(p);
        }
    }
    PathBuf::from("runs")
}

/// The run directory of a config under a resolved output root.
pub fn run_dir(out_root: &Path, cfg: &RunConfig) -> PathBuf {
    out_root.join(&cfg.name)
}

// ---------------------------------------------------------------------------
// Provenance
// ---------------------------------------------------------------------------

/// What every artifact records about its origin. `config_hash` covers the
/// config sections the producing command consumed; `seed` is the replication
/// seed for per-seed artifacts and the master seed otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Comment header for CSV artifacts.
    pub fn csv_header(&self) -> String {
        format!(
            "# config_hash: {}\n# seed: {}\n# version: {}\n",
            self.config_hash, self.seed, self.version
        )
    }

    /// First-line record for JSONL artifacts.
    pub fn jsonl_line(&self) -> String {
        serde_json::to_string(self).expect("provenance serializes")
    }

    /// Key/value form for binary-format meta tables.
    pub fn meta_entries(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_hash".to_string(), self.config_hash.clone()),
            ("seed".to_string(), self.seed.to_string()),
            ("version".to_string(), self.version.clone()),
        ])
    }
}

/// The config hash recorded in a text artifact, if it can be read at all.
/// Understands both the CSV comment header and the JSONL first-line record.
pub(crate) fn recorded_hash_of_text(text: &str) -> Option<String> {
    let first = text.lines().next()?;
    if let Some(rest) = first.strip_prefix("# config_hash: ") {
        return Some(rest.trim().to_string());
    }
    let prov: Provenance = serde_json::from_str(first).ok()?;
    Some(prov.config_hash)
}

/// 16-hex-digit truncation of SHA-256 — short enough for headers, long
/// enough that accidental collisions are not a concern at desk scale.
pub(crate) fn sha256_hex16(data: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(16);
    for byte in &digest[..8] {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Hashes the named config sections (plus `name`); each command hashes
/// exactly what it consumes so unrelated edits don't invalidate artifacts.
pub(crate) fn config_hash(cfg: &RunConfig, parts: &[(&str, serde_json::Value)]) -> String {
    let mut obj = serde_json::Map::new();
    obj.insert("name".to_string(), serde_json::json!(cfg.name));
    for (key, value) in parts {
        obj.insert((*key).to_string(), value.clone());
    }
    sha256_hex16(&serde_json::Value::Object(obj).to_string())
}

/// Deterministic sub-seed for one purpose within a run. Distinct salts give
/// unrelated ChaCha streams even when the base seeds coincide.
pub(crate) fn derive_seed(base: u64, salt: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(salt.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.stream_kind(), StreamKind::Mixture);
    }

    #[test]
    fn empty_file_equals_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn malformed_config_is_a_schema_error_naming_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "model = { kind = \"warp_drive\" }").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        match &err {
            PipelineError::Schema { path: p, .. } => assert_eq!(p, &path),
            other => panic!("expected schema error, got {other}"),
        }
        assert!(err.to_string().contains("bad.toml"));

        std::fs::write(&path, "not even = [ toml").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(PipelineError::Schema { .. })));

        std::fs::write(&path, "unknown_key = 3").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(PipelineError::Schema { .. })));
    }

    #[test]
    fn cross_field_validation_catches_mismatches() {
        // Stream vocab must match the model vocab.
        let mut cfg = RunConfig::default();
        cfg.tasks.stream_config.vocab_size = 48;
        assert!(matches!(cfg.validate(), Err(PipelineError::Config { .. })));

        // Creative tasks compute their own vocab floor.
        let mut cfg = RunConfig::default();
        cfg.tasks.stream = "sibling_discovery".to_string();
        cfg.model.config.vocab_size = 32; // < NODE_BASE + 64 leaves
        assert!(matches!(cfg.validate(), Err(PipelineError::Config { .. })));
        cfg.model.config.vocab_size = 96;
        cfg.validate().unwrap();

        // Unknown stream names are rejected.
        let mut cfg = RunConfig::default();
        cfg.tasks.stream = "haiku".to_string();
        assert!(matches!(cfg.validate(), Err(PipelineError::Config { .. })));

        // Names become directories; path separators are rejected.
        let mut cfg = RunConfig::default();
        cfg.name = "a/b".to_string();
        assert!(matches!(cfg.validate(), Err(PipelineError::Config { .. })));
    }

    #[test]
    fn out_root_resolution_order() {
        let mut cfg = RunConfig::default();
        // Config file value wins over the built-in default. The environment
        // variable layer sits between them but is process-global state, so
        // the test keeps hands off and exercises the pure layers only.
        assert_eq!(resolve_out_root(None, &cfg), PathBuf::from("runs"));
        cfg.out_dir = Some(PathBuf::from("elsewhere"));
        assert_eq!(resolve_out_root(None, &cfg), PathBuf::from("elsewhere"));
        // The explicit flag wins over everything.
        assert_eq!(
            resolve_out_root(Some(Path::new("flagged")), &cfg),
            PathBuf::from("flagged")
        );
        assert_eq!(run_dir(Path::new("flagged"), &cfg), PathBuf::from("flagged/run"));
    }

    #[test]
    fn hashes_are_stable_and_section_scoped() {
        let cfg = RunConfig::default();
        let model = serde_json::to_value(&cfg.model).unwrap();
        let steer = serde_json::to_value(&cfg.steer).unwrap();
        let h1 = config_hash(&cfg, &[("model", model.clone())]);
        let h2 = config_hash(&cfg, &[("model", model.clone())]);
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 16);

        // A steer edit does not move a model-scoped hash.
        let mut edited = cfg.clone();
        edited.steer.alpha = 0.35;
        let model_after = serde_json::to_value(&edited.model).unwrap();
        assert_eq!(h1, config_hash(&edited, &[("model", model_after)]));
        // ... but it moves a steer-scoped hash.
        let steer_after = serde_json::to_value(&edited.steer).unwrap();
        assert_ne!(
            config_hash(&cfg, &[("steer", steer)]),
            config_hash(&edited, &[("steer", steer_after)])
        );
    }

    #[test]
    fn derived_seeds_differ_by_salt_and_base() {
        assert_ne!(derive_seed(0, "model-init"), derive_seed(0, "stream"));
        assert_ne!(derive_seed(0, "stream"), derive_seed(1, "stream"));
        assert_eq!(derive_seed(7, "eval"), derive_seed(7, "eval"));
    }

    #[test]
    fn provenance_headers_round_trip() {
        let p = Provenance::new("abcd1234abcd1234", 5);
        let csv = p.csv_header();
        assert_eq!(recorded_hash_of_text(&csv).as_deref(), Some("abcd1234abcd1234"));
        let jsonl = p.jsonl_line();
        assert_eq!(recorded_hash_of_text(&jsonl).as_deref(), Some("abcd1234abcd1234"));
        assert_eq!(recorded_hash_of_text("task,mean\nicll,1.0\n"), None);
        assert_eq!(p.meta_entries()["seed"], "5");
    }
}
