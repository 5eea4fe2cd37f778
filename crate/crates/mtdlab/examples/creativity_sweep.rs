//! The (temperature, α) creativity grid: sweep both knobs on a trained
//! discovery model and print the full scoring table. The α = 0 column is
//! exactly a plain temperature sweep — per-item seeds do not depend on α,
//! so the comparison against temperature-only sampling is paired.
//!
//! Probe scale (~1 minute). Run with: `cargo run --example creativity_sweep`

use mtdlab::analysis::{creativity_grid, creativity_grid_csv, EntropyMode};
use mtdlab::model::train::train;
use mtdlab::model::{MicroModel, ModelConfig, ModelKind, ModelSpec, TrainConfig};
use mtdlab::tasks::creative::{make_creative_world, make_train_item, CreativeTask, WorldParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut params = WorldParams::default();
    params.sibling.n_leaves = 24;
    params.sibling.n_parents = 6;
    let world = {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        make_creative_world(CreativeTask::SiblingDiscovery, &params, &mut rng)?
    };

    let config = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_mlp: 64,
        vocab_size: 64,
        context_len: 16,
        tied_embeddings: true,
    };
    let mut model = MicroModel::new(ModelSpec::new(ModelKind::MtpNll, config), 1)?;
    let mut cfg = TrainConfig::for_kind(ModelKind::MtpNll);
    cfg.steps = 500;
    cfg.batch_size = 8;
    cfg.warmup_steps = 80;
    cfg.learning_rate = 1e-3;
    println!("training 500 steps…");
    let mut item_rng = ChaCha8Rng::seed_from_u64(17);
    {
        let world = &world;
        let mut data =
            std::iter::from_fn(move || Some(make_train_item(world, &mut item_rng).unwrap()));
        train(&mut model, &mut data, &cfg)?;
    }

    let temps = [0.8, 1.0, 1.3];
    let alphas = [-0.4, 0.0, 0.4, 0.8];
    println!("sweeping {} cells × 48 items…\n", temps.len() * alphas.len());
    let grid = creativity_grid(&model, &world, &temps, &alphas, 48, EntropyMode::Geodesic, 9)?;
    print!("{}", creativity_grid_csv(&grid));

    let best = grid
        .iter()
        .max_by(|a, b| a.scores.creativity.partial_cmp(&b.scores.creativity).unwrap())
        .unwrap();
    let best_plain = grid
        .iter()
        .filter(|c| c.alpha == 0.0)
        .max_by(|a, b| a.scores.creativity.partial_cmp(&b.scores.creativity).unwrap())
        .unwrap();
    println!(
        "\nbest cell overall:      T = {}, α = {:>4} → creativity {:.3}",
        best.temperature, best.alpha, best.scores.creativity
    );
    println!(
        "best temperature-only:  T = {}, α =  0.0 → creativity {:.3}",
        best_plain.temperature, best_plain.scores.creativity
    );
    Ok(())
}
