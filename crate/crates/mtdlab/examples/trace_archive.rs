//! The `.mtdt` trace archive: build a logit trace by hand, aggregate it
//! into per-sequence statistics, round-trip it through the binary format
//! bit-exactly, and export it as JSONL.
//!
//! Run with: `cargo run --example trace_archive`

use mtdlab::divergence::{export_jsonl, read_trace, sequence_stats, write_trace, LogitTrace, TokenRecord};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // A three-step sequence over a 4-token vocabulary. At each position the
    // trace stores the realized token and both models' raw logits; nothing
    // derived is stored, so every measurement stays recomputable.
    let mut trace = LogitTrace::new(4);
    trace.meta.insert("task".into(), "handmade-demo".into());
    trace.meta.insert("seed".into(), "0".into());
    trace.records = vec![
        TokenRecord {
            token_id: 2,
            full_logits: vec![0.2, -0.5, 1.8, -1.0],
            mtp_logits: vec![0.3, -0.4, 1.6, -0.9],
        },
        TokenRecord {
            token_id: 0,
            full_logits: vec![2.0, -0.2, -0.7, -1.2],
            mtp_logits: vec![0.1, 0.2, 0.0, -0.1], // head is lost here
        },
        TokenRecord {
            token_id: 3,
            full_logits: vec![-1.0, -0.5, 0.1, 1.4],
            mtp_logits: vec![-0.9, -0.6, 0.2, 1.3],
        },
    ];

    let stats = sequence_stats(&trace)?;
    println!("per-token divergence (nats): {:?}", rounded(&stats.per_token_mtd));
    println!("per-token nll        (nats): {:?}", rounded(&stats.per_token_nll));
    println!("mean divergence {:.4}, mean nll {:.4}", stats.mean_mtd, stats.mean_nll);
    println!("(position 2 dominates: the full model knows something the head does not)");
    println!();

    let dir = std::env::temp_dir().join("mtdlab_trace_archive_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("demo.mtdt");
    write_trace(&path, &trace)?;
    let reloaded = read_trace(&path)?;
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());
    println!("bit-exact round trip: {}", trace.bitwise_eq(&reloaded));

    let jsonl = dir.join("demo.jsonl");
    export_jsonl(&trace, &jsonl)?;
    println!("JSONL export for plotting tools:");
    for line in std::fs::read_to_string(&jsonl)?.lines().take(2) {
        println!("  {line}");
    }
    println!("  …");
    Ok(())
}

fn rounded(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
