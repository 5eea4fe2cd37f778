//! Train a small transformer with a shallow-head divergence loss on the
//! five-task mixture, then measure which task makes the deep stack earn its
//! keep: mean divergence per task, normalized so the across-task mean is 1.
//!
//! In-context learning of a fresh automaton should stand out — the shallow
//! head cannot follow the inference the full stack performs — while
//! memorized, random, and copy material stays flat.
//!
//! Probe-scale model (~1 minute). Run with:
//! `cargo run --example train_five_tasks`

use mtdlab::analysis::normalize_task_scores;
use mtdlab::divergence::sequence_stats;
use mtdlab::model::infer::record_trace;
use mtdlab::model::train::train;
use mtdlab::model::{MicroModel, ModelConfig, ModelKind, ModelSpec, TrainConfig};
use mtdlab::tasks::{make_mixture_stream, make_task_stream, StreamConfig, TaskAssets, TaskKind};
use std::collections::BTreeMap;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let stream_cfg = StreamConfig { vocab_size: 64, body_len: 48 };
    let assets = TaskAssets::generate(7, stream_cfg)?;

    let config = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_mlp: 64,
        vocab_size: 64,
        context_len: 64,
        tied_embeddings: true,
    };
    let spec = ModelSpec::new(ModelKind::MtpMtd, config);
    let mut model = MicroModel::new(spec, 1)?;

    let mut train_cfg = TrainConfig::for_kind(ModelKind::MtpMtd);
    train_cfg.steps = 600;
    train_cfg.batch_size = 8;
    train_cfg.warmup_steps = 100;
    train_cfg.seed = 2;

    println!("training 600 steps on the task mixture…");
    let mut data = make_mixture_stream(3, &assets).map(|s| s.tokens);
    let curves = train(&mut model, &mut data, &train_cfg)?;
    for point in curves.iter().rev().take(2).rev() {
        println!("  step {:>4}  {:<4} = {:.4}", point.step, point.name, point.value);
    }

    println!("\nmeasuring 40 fresh sequences per task…");
    let mut means = BTreeMap::new();
    for task in TaskKind::ALL {
        let mut stream = make_task_stream(task, 100 + task as u64, &assets);
        let mut total = 0.0;
        for _ in 0..40 {
            let sample = stream.next().expect("streams are infinite");
            let stats = sequence_stats(&record_trace(&model, &sample.tokens)?)?;
            total += stats.mean_mtd;
        }
        means.insert(task.name().to_string(), total / 40.0);
    }

    let normalized = normalize_task_scores(&means)?;
    println!("\n{:<16} {:>12} {:>12}", "task", "mean MTD", "normalized");
    let mut order: Vec<_> = normalized.iter().collect();
    order.sort_by(|a, b| b.1.partial_cmp(a.1).unwrap());
    for (task, norm) in order {
        println!("{task:<16} {:>12.5} {norm:>12.3}", means[task]);
    }
    println!("\n(normalized column: across-task mean is exactly 1)");
    Ok(())
}
