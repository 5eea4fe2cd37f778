//! Training: Adam with linear learning-rate warmup, global gradient-norm
//! clipping, and periodic loss-curve logging.
//!
//! The loop is single-threaded and fully deterministic: identical seed,
//! config, and data stream produce bit-identical loss curves and parameters.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::graph::Graph;
use super::net::{build_forward, build_losses};
use super::{MicroModel, ModelError, TrainConfig};

/// One logged loss value.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub name: String,
    pub value: f64,
}

/// Logging cadence: loss components are recorded every this many steps (and
/// on the final step).
pub const LOG_EVERY: usize = 50;

/// Adam state; β₁ = 0.9, β₂ = 0.999, ε = 1e-8, no weight decay.
struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[Array2<f64>]) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
            });
        }
    }
}

/// Scales all gradients in place so their joint L2 norm is at most `max_norm`.
fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
}

/// Trains `model` in place on sequences drawn from `data`.
///
/// Per step: draw `batch_size` sequences, build the forward graph and the
/// kind's weighted loss, backpropagate, clip the global gradient norm, and
/// apply one Adam update at the warmed-up learning rate (linear ramp from
/// zero over `warmup_steps`, flat thereafter — no decay). Loss components
/// are logged every [`LOG_EVERY`] steps and on the final step; the returned
/// curve holds the unweighted per-component means.
///
/// Errors with [`ModelError::Diverged`] if the loss goes non-finite, and
/// with a config/input error if the config does not match the model kind or
/// the stream runs dry. `steps == 0` is a no-op that returns an empty curve.
pub fn train<I>(
    model: &mut MicroModel,
    data: &mut I,
    cfg: &TrainConfig,
) -> Result<Vec<LossPoint>, ModelError>
where
    I: Iterator<Item = Vec<u32>> + ?Sized,
{
    cfg.validate(model.spec.kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params.values());
    let mut curves = Vec::new();

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            batch.push(data.next().ok_or_else(|| ModelError::BadInput {
                what: format!("training data stream ended before step {step}"),
            })?);
        }
        let refs: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
        let total_rows: usize = refs.iter().map(|s| s.len()).sum();
        let noise = model.spec.phi.map(|p| {
            Array2::from_shape_fn((total_rows, p.z_dim), |_| {
                rng.sample::<f64, _>(StandardNormal)
            })
        });

        let values: Vec<Array2<f64>> = model.params.values().to_vec();
        let mut g = Graph::new(&values);
        let fwd = build_forward(&mut g, model, &refs, noise.as_ref())?;
        let losses = build_losses(&mut g, model, &fwd, &refs, &cfg.loss_weights, None)?;
        if !g.scalar(losses.total).is_finite() {
            return Err(ModelError::Diverged { step });
        }
        if step % LOG_EVERY == 0 || step == cfg.steps {
            for (name, node) in &losses.components {
                curves.push(LossPoint { step, name: name.clone(), value: g.scalar(*node) });
            }
        }
        let mut grads = g.backward(losses.total);
        drop(g);
        clip_global_norm(&mut grads, cfg.grad_clip_norm);
        let lr = cfg.learning_rate * (step as f64 / cfg.warmup_steps as f64).min(1.0);
        adam.step(model.params.values_mut(), &grads, lr);
    }
    Ok(curves)
}

/// Loss curves as CSV with header `step,loss_name,value`.
pub fn loss_curves_csv(points: &[LossPoint]) -> String {
    let mut out = String::from("step,loss_name,value\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.step, p.name, p.value));
    }
    out
}
