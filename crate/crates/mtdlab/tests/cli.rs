//! End-to-end tests of the `mtdlab` binary: verb wiring, flag precedence,
//! the `MTDLAB_OUT` environment root, and refusal/exit-code behavior.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mtdlab");

fn mtdlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("MTDLAB_OUT")
        .output()
        .expect("binary spawns")
}

fn assert_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) {
    std::fs::write(dir.join(name), body).unwrap();
}

const MIXTURE_PROBE: &str = r#"
name = "probe"
seed = 3
seeds = [0]

[model.config]
n_layers = 2
d_model = 16
n_heads = 2
d_mlp = 32
vocab_size = 64
context_len = 24

[tasks.stream_config]
vocab_size = 64
body_len = 16

[train]
steps = 16
batch_size = 4
warmup_steps = 4

[eval]
n_sequences = 10
n_traces = 1

[analyze]
n_resamples = 200
"#;

const SIBLING_PROBE: &str = r#"
name = "creative"
seed = 5
seeds = [0]

[model]
kind = "mtp_nll"

[model.config]
n_layers = 2
d_model = 16
n_heads = 2
d_mlp = 32
vocab_size = 32
context_len = 16

[tasks]
stream = "sibling_discovery"

[tasks.stream_config]
vocab_size = 64
body_len = 16

[tasks.world.sibling]
n_leaves = 8
n_parents = 2

[train]
steps = 24
batch_size = 4
warmup_steps = 6

[steer]
n_items = 3
temps = [1.0]
alphas = [0.0]
"#;

#[test]
fn help_lists_every_verb() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtdlab(dir.path(), &["--help"]);
    let text = assert_ok(&out);
    for verb in ["gen-assets", "train", "eval", "steer", "sweep", "analyze"] {
        assert!(text.contains(verb), "help does not mention {verb}");
    }
}

#[test]
fn mixture_pipeline_resumes_and_honors_env_out_root() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "probe.toml", MIXTURE_PROBE);

    for verb in ["gen-assets", "train", "eval", "analyze"] {
        let out = mtdlab(dir.path(), &[verb, "--config", "probe.toml", "--out", "out"]);
        let text = assert_ok(&out);
        assert!(text.contains("done"), "{verb} did not report `done`: {text}");
    }
    assert!(dir.path().join("out/probe/task_scores.csv").exists());

    let out = mtdlab(dir.path(), &["train", "--config", "probe.toml", "--out", "out"]);
    assert!(assert_ok(&out).contains("skipped"), "rerun should skip fresh artifacts");

    // Same config, no --out: the env var decides the root.
    let out = Command::new(BIN)
        .args(["gen-assets", "--config", "probe.toml"])
        .current_dir(dir.path())
        .env("MTDLAB_OUT", "envroot")
        .output()
        .unwrap();
    assert_ok(&out);
    assert!(dir.path().join("envroot/probe/assets.json").exists());
}

#[test]
fn grid_flags_override_config_and_stale_outputs_need_force() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "creative.toml", SIBLING_PROBE);
    let base = ["--config", "creative.toml", "--out", "out"];
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = vec![extra[0]];
        args.extend_from_slice(&base);
        args.extend_from_slice(&extra[1..]);
        mtdlab(dir.path(), &args)
    };

    assert_ok(&run(&["gen-assets"]));
    assert_ok(&run(&["train"]));
    assert_ok(&run(&[
        "sweep",
        "--temp-grid",
        "0.9,1.1",
        "--alpha-grid",
        "-0.2,0.3",
        "--entropy-mode",
        "fixed",
    ]));
    let grid = std::fs::read_to_string(dir.path().join("out/creative/creativity_grid_seed0.csv"))
        .unwrap();
    let data: Vec<&str> = grid.lines().skip(4).collect(); // 3 provenance + 1 header
    assert_eq!(data.len(), 4, "expected 2×2 grid rows, got {data:?}");
    assert!(data.iter().all(|l| l.starts_with("0.9,") || l.starts_with("1.1,")));

    // The stored grid belongs to the flag-overridden config now; running with
    // the file's own grids must refuse without --force and succeed with it.
    let out = run(&["sweep"]);
    assert!(!out.status.success(), "stale sweep output must refuse without --force");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--force"), "refusal should point at --force: {stderr}");
    assert_ok(&run(&["sweep", "--force"]));

    let out = run(&["sweep", "--entropy-mode", "sideways"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("geodesic"));
}
