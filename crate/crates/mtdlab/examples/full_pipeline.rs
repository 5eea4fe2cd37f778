//! The experiment pipeline as a library: configure a probe-scale run,
//! execute gen-assets → train → eval → analyze in a scratch directory, and
//! show the resumability contract (a second invocation skips fresh
//! artifacts; a changed config refuses to overwrite without force).
//!
//! Everything here is also reachable from the `mtdlab` binary; the config
//! below is exactly what a TOML file would say.
//!
//! Probe scale (~1 minute). Run with: `cargo run --example full_pipeline`

use mtdlab::model::ModelConfig;
use mtdlab::pipeline::{
    cmd_analyze, cmd_eval, cmd_gen_assets, cmd_train, files, run_dir, RunConfig,
};
use mtdlab::tasks::StreamConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::default();
    cfg.name = "pipeline_demo".to_string();
    cfg.seed = 11;
    cfg.seeds = vec![0, 1];
    cfg.model.config = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_mlp: 32,
        vocab_size: 64,
        context_len: 24,
        tied_embeddings: true,
    };
    cfg.tasks.stream_config = StreamConfig { vocab_size: 64, body_len: 16 };
    cfg.train.steps = Some(120);
    cfg.train.batch_size = Some(4);
    cfg.eval.n_sequences = 12;
    cfg.eval.n_traces = 1;
    cfg.analyze.n_resamples = 500;
    cfg.validate()?;

    let out_root = std::env::temp_dir().join("mtdlab_pipeline_example");
    let dir = run_dir(&out_root, &cfg);
    println!("run directory: {}\n", dir.display());

    println!("gen-assets: {}", cmd_gen_assets(&cfg, &dir, false)?);
    println!("train:      {}", cmd_train(&cfg, &dir, false)?);
    println!("eval:       {}", cmd_eval(&cfg, &dir, false)?);
    println!("analyze:    {}", cmd_analyze(&cfg, &dir, false)?);

    println!("\nartifacts:");
    let mut names: Vec<String> = std::fs::read_dir(&dir)?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in names {
        println!("  {name}");
    }

    println!("\nevery text artifact opens with its provenance:");
    let scores = std::fs::read_to_string(dir.join(files::TASK_SCORES))?;
    for line in scores.lines().take(4) {
        println!("  {line}");
    }

    println!("\nsecond invocation (same config):");
    println!("  train: {}", cmd_train(&cfg, &dir, false)?);
    println!("  eval:  {}", cmd_eval(&cfg, &dir, false)?);

    let mut changed = cfg.clone();
    changed.train.steps = Some(121);
    println!("\nchanged config without --force:");
    match cmd_train(&changed, &dir, false) {
        Err(e) => println!("  refused: {e}"),
        Ok(_) => unreachable!("stale artifacts must refuse"),
    }
    Ok(())
}
