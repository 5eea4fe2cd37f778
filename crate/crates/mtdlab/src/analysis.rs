//! Statistics behind every quantitative claim: Pearson and partial
//! correlation, percentile bootstrap intervals, quantile-binned curves,
//! task-score normalization, pairwise selection accuracy, and (T, α)
//! creativity grids.
//!
//! Everything here is a pure function over in-memory arrays, deterministic
//! given `(data, seed)`. Randomized procedures document their draw order
//! precisely so an independent implementation with the same seed reproduces
//! them bit for bit.

use crate::divergence::SequenceStats;
use crate::model::MicroModel;
use crate::steering::{self, SteeringParams};
use crate::tasks::creative::{make_eval_prompt, score_items, CreativeSpec, CreativityScores};
use crate::tasks::END_TOKEN;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 10_000;
pub const DEFAULT_CONFIDENCE_LEVEL: f64 = 0.95;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("series has zero variance; the statistic is undefined")]
    ZeroVariance,
    #[error("control series is (anti-)collinear with an input (|r| = 1); partial correlation undefined")]
    DegenerateControl,
    #[error("input must be non-empty")]
    EmptyInput,
    #[error("confidence level must lie strictly between 0 and 1, got {0}")]
    BadLevel(f64),
    #[error("n_resamples must be at least 1")]
    NoResamples,
    #[error("statistic produced a non-finite value")]
    NonFiniteStatistic,
    #[error("n_bins = {n_bins} invalid: need 1 <= n_bins <= {distinct} distinct x values")]
    BadBins { n_bins: usize, distinct: usize },
    #[error("task means are all zero; normalization undefined")]
    AllZeroMeans,
    #[error("the lower_both rule needs a second (correct, incorrect) score pair")]
    MissingSecondScores,
    #[error("item generation failed: {0}")]
    Generation(String),
}

// Generation errors are flattened to their message so `AnalysisError` keeps
// structural equality (the model/steering error trees hold non-comparable
// sources like I/O errors).
impl From<steering::SteeringError> for AnalysisError {
    fn from(e: steering::SteeringError) -> Self {
        AnalysisError::Generation(e.to_string())
    }
}

impl From<crate::tasks::TaskError> for AnalysisError {
    fn from(e: crate::tasks::TaskError) -> Self {
        AnalysisError::Generation(e.to_string())
    }
}

/// Per-sequence measurement bundle: the full stats (per-token vectors
/// included, so token-level curves can be rebuilt downstream) plus the
/// labels under which the sequence was produced (reserved keys: `task`,
/// `complexity`, `difficulty`, `correct`, `temperature`, `alpha`, `seed`).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentRecord {
    pub stats: SequenceStats,
    pub labels: BTreeMap<String, String>,
}

impl ExperimentRecord {
    pub fn new(stats: SequenceStats, labels: BTreeMap<String, String>) -> Self {
        Self { stats, labels }
    }

    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(AnalysisError::TooFewPoints { need: 3, got: x.len() });
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    check_pair(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Partial correlation of `x` and `y` controlling for `z`, by the
/// closed form `(r_xy − r_xz·r_yz) / sqrt((1−r_xz²)(1−r_yz²))`. Equivalent
/// to correlating the residuals of `x ~ z` and `y ~ z`.
pub fn partial_correlation(x: &[f64], y: &[f64], z: &[f64]) -> Result<f64, AnalysisError> {
    check_pair(x, y)?;
    check_pair(x, z)?;
    let r_xy = pearson(x, y)?;
    let r_xz = pearson(x, z)?;
    let r_yz = pearson(y, z)?;
    if r_xz.abs() >= 1.0 - 1e-12 || r_yz.abs() >= 1.0 - 1e-12 {
        return Err(AnalysisError::DegenerateControl);
    }
    let denom = ((1.0 - r_xz * r_xz) * (1.0 - r_yz * r_yz)).sqrt();
    Ok(((r_xy - r_xz * r_yz) / denom).clamp(-1.0, 1.0))
}

/// Linear-interpolation empirical quantile over a *sorted* slice
/// (the "type 7" convention: position q·(n−1)).
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for an arbitrary statistic of row indices.
///
/// Draw order is part of the contract so independent implementations can
/// reproduce it exactly: a `ChaCha8Rng` is seeded with `seed`; each of the
/// `n_resamples` replicates draws `n` indices in order via
/// `rng.random_range(0..n)`; replicate statistics are sorted ascending and
/// the interval is the linear-interpolation quantile pair at
/// `(1−level)/2` and `1−(1−level)/2`.
pub fn bootstrap_ci_indexed<F>(
    n: usize,
    stat: F,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), AnalysisError>
where
    F: Fn(&[usize]) -> f64,
{
    if n == 0 {
        return Err(AnalysisError::EmptyInput);
    }
    if n_resamples == 0 {
        return Err(AnalysisError::NoResamples);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(AnalysisError::BadLevel(level));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut stats = Vec::with_capacity(n_resamples);
    for _ in 0..n_resamples {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        let s = stat(&idx);
        if !s.is_finite() {
            return Err(AnalysisError::NonFiniteStatistic);
        }
        stats.push(s);
    }
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    Ok((
        sorted_quantile(&stats, alpha),
        sorted_quantile(&stats, 1.0 - alpha),
    ))
}

/// Percentile bootstrap interval for `stat` over resamples of `data`.
/// See [`bootstrap_ci_indexed`] for the draw-order contract. Use at least
/// 1000 resamples for reportable intervals; [`DEFAULT_BOOTSTRAP_RESAMPLES`]
/// is 10_000.
pub fn bootstrap_ci<F>(
    data: &[f64],
    stat: F,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), AnalysisError>
where
    F: Fn(&[f64]) -> f64,
{
    let buf = vec![0.0; data.len()];
    bootstrap_ci_indexed(
        data.len(),
        move |idx| {
            // Safety of indexing: idx entries come from range 0..data.len().
            let mut b = buf.clone();
            for (slot, &i) in b.iter_mut().zip(idx) {
                *slot = data[i];
            }
            stat(&b)
        },
        n_resamples,
        level,
        seed,
    )
}

/// Quantile-binned conditional means of `y` given `x`, per group.
#[derive(Debug, Clone)]
pub struct BinnedCurves {
    /// Mean of x inside each bin, pooled over groups.
    pub bin_x: Vec<f64>,
    /// Pooled count per bin.
    pub bin_count: Vec<usize>,
    /// `group_means[g][b]` = mean of y for group g in bin b (None if empty).
    pub group_means: Vec<Vec<Option<f64>>>,
    /// `group_counts[g][b]` = number of points behind each mean.
    pub group_counts: Vec<Vec<usize>>,
}

/// Equal-count (quantile) bins on `x`; per-(group, bin) mean of `y`.
///
/// `group[i]` assigns point i to a group id in `0..n_groups`. With
/// `normalize` set, every group's bin mean is divided by the unweighted
/// cross-group mean of that bin (groups present in the bin only), so the
/// cross-group mean becomes 1 in every bin — the "normalized per NLL bin"
/// presentation.
///
/// Ties on `x` are broken by index, making bin assignment deterministic.
pub fn binned_curves(
    x: &[f64],
    y: &[f64],
    group: &[usize],
    n_groups: usize,
    n_bins: usize,
    normalize: bool,
) -> Result<BinnedCurves, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() != group.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), group.len()));
    }
    if x.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let mut distinct: Vec<f64> = x.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if n_bins == 0 || n_bins > distinct.len() {
        return Err(AnalysisError::BadBins {
            n_bins,
            distinct: distinct.len(),
        });
    }

    // Sort point indices by (x, index) and cut into n_bins near-equal runs.
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap().then(a.cmp(&b)));
    let n = x.len();
    let base = n / n_bins;
    let extra = n % n_bins;

    let mut bin_x = vec![0.0; n_bins];
    let mut bin_count = vec![0usize; n_bins];
    let mut sums = vec![vec![0.0; n_bins]; n_groups];
    let mut counts = vec![vec![0usize; n_bins]; n_groups];
    let mut cursor = 0;
    for (b, (bx, bc)) in bin_x.iter_mut().zip(bin_count.iter_mut()).enumerate() {
        let size = base + usize::from(b < extra);
        for &i in &order[cursor..cursor + size] {
            *bx += x[i];
            *bc += 1;
            assert!(group[i] < n_groups, "group id {} out of range", group[i]);
            sums[group[i]][b] += y[i];
            counts[group[i]][b] += 1;
        }
        *bx /= size as f64;
        cursor += size;
    }

    let mut group_means: Vec<Vec<Option<f64>>> = sums
        .iter()
        .zip(&counts)
        .map(|(srow, crow)| {
            srow.iter()
                .zip(crow)
                .map(|(&s, &c)| if c > 0 { Some(s / c as f64) } else { None })
                .collect()
        })
        .collect();

    if normalize {
        for b in 0..n_bins {
            let present: Vec<f64> = group_means
                .iter()
                .filter_map(|row| row[b])
                .collect();
            if present.is_empty() {
                continue;
            }
            let cross = mean(&present);
            for row in &mut group_means {
                if let Some(v) = row[b] {
                    row[b] = Some(v / cross);
                }
            }
        }
    }

    Ok(BinnedCurves {
        bin_x,
        bin_count,
        group_means,
        group_counts: counts,
    })
}

/// Divides each task's mean by the unweighted mean over all tasks, so the
/// across-task mean of the result is exactly 1.
pub fn normalize_task_scores(
    per_task_means: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>, AnalysisError> {
    if per_task_means.len() < 2 {
        return Err(AnalysisError::TooFewPoints {
            need: 2,
            got: per_task_means.len(),
        });
    }
    let values: Vec<f64> = per_task_means.values().copied().collect();
    let m = mean(&values);
    if m == 0.0 {
        return Err(AnalysisError::AllZeroMeans);
    }
    Ok(per_task_means
        .iter()
        .map(|(k, &v)| (k.clone(), v / m))
        .collect())
}

/// Which decision rule assembles a pairwise pick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionRule {
    /// Pick the item with the lower score.
    Lower,
    /// Count only pairs where *both* criteria prefer the same item; report
    /// accuracy among those.
    LowerBoth,
}

#[derive(Debug, Clone)]
pub struct SelectionAccuracy {
    pub accuracy: f64,
    pub ci: (f64, f64),
    /// Pairs that entered the accuracy (equals `n_sampled` under `Lower`;
    /// under `LowerBoth`, only pairs where the criteria agreed).
    pub n_used: usize,
    pub n_sampled: usize,
}

/// Assembles `n_pairs` random (correct, incorrect) pairs and reports how
/// often the rule picks the correct item. Ties contribute 0.5 under
/// `Lower`; under `LowerBoth` a tie in either criterion means no agreement
/// and the pair is dropped.
///
/// `scores` are per-item values where *lower is better* (e.g. mean MTD);
/// `second` supplies the second criterion's scores for `LowerBoth`.
/// Draw order: a `ChaCha8Rng` seeded with `seed` draws, per pair, an index
/// into `correct` then an index into `incorrect`, both via `random_range`.
/// The CI is a percentile bootstrap (1000 resamples, level 0.95, seed
/// `seed ^ 1`) over the per-pair outcomes that entered the accuracy.
pub fn pairwise_selection_accuracy(
    correct: &[f64],
    incorrect: &[f64],
    second: Option<(&[f64], &[f64])>,
    rule: SelectionRule,
    n_pairs: usize,
    seed: u64,
) -> Result<SelectionAccuracy, AnalysisError> {
    if correct.is_empty() || incorrect.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    if rule == SelectionRule::LowerBoth && second.is_none() {
        return Err(AnalysisError::MissingSecondScores);
    }
    if let Some((c2, i2)) = second {
        if c2.len() != correct.len() {
            return Err(AnalysisError::LengthMismatch(c2.len(), correct.len()));
        }
        if i2.len() != incorrect.len() {
            return Err(AnalysisError::LengthMismatch(i2.len(), incorrect.len()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes: Vec<f64> = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let i = rng.random_range(0..correct.len());
        let j = rng.random_range(0..incorrect.len());
        match rule {
            SelectionRule::Lower => {
                let outcome = if correct[i] < incorrect[j] {
                    1.0
                } else if correct[i] > incorrect[j] {
                    0.0
                } else {
                    0.5
                };
                outcomes.push(outcome);
            }
            SelectionRule::LowerBoth => {
                let (c2, i2) = second.unwrap();
                // Preference of each criterion: Some(true) = correct item.
                let pref = |c: f64, inc: f64| {
                    if c < inc {
                        Some(true)
                    } else if c > inc {
                        Some(false)
                    } else {
                        None
                    }
                };
                match (pref(correct[i], incorrect[j]), pref(c2[i], i2[j])) {
                    (Some(a), Some(b)) if a == b => outcomes.push(if a { 1.0 } else { 0.0 }),
                    _ => {} // disagreement or tie: pair not counted
                }
            }
        }
    }
    let n_used = outcomes.len();
    let accuracy = if n_used == 0 { f64::NAN } else { mean(&outcomes) };
    let ci = if n_used == 0 {
        (f64::NAN, f64::NAN)
    } else {
        bootstrap_ci(&outcomes, mean, 1000, DEFAULT_CONFIDENCE_LEVEL, seed ^ 1)?
    };
    Ok(SelectionAccuracy {
        accuracy,
        ci,
        n_used,
        n_sampled: n_pairs,
    })
}

/// Builds a series with an *exact* sample Pearson correlation `r` against
/// `x`, by combining the standardized `x` with an orthogonalized,
/// standardized noise vector. Used to validate the analysis pipeline on
/// planted effects; the returned series has mean 0 and unit sample variance.
pub fn plant_correlated_series(x: &[f64], r: f64, seed: u64) -> Result<Vec<f64>, AnalysisError> {
    if x.len() < 3 {
        return Err(AnalysisError::TooFewPoints { need: 3, got: x.len() });
    }
    assert!((-1.0..=1.0).contains(&r), "r must lie in [-1, 1], got {r}");
    let n = x.len();
    let mx = mean(x);
    let sx: f64 = x.iter().map(|&v| (v - mx) * (v - mx)).sum::<f64>().sqrt();
    if sx == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    let xs: Vec<f64> = x.iter().map(|&v| (v - mx) / sx).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Draw noise, then strip its x-component and its mean to get an exactly
    // orthogonal direction; retry in the (measure-zero) degenerate case.
    loop {
        let e: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let me = mean(&e);
        let dot: f64 = e.iter().zip(&xs).map(|(&a, &b)| (a - me) * b).sum();
        let mut resid: Vec<f64> = e
            .iter()
            .zip(&xs)
            .map(|(&a, &b)| (a - me) - dot * b)
            .collect();
        let norm: f64 = resid.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        for v in &mut resid {
            *v /= norm;
        }
        return Ok(xs
            .iter()
            .zip(&resid)
            .map(|(&a, &b)| r * a + (1.0 - r * r).sqrt() * b)
            .collect());
    }
}

// ---------------------------------------------------------------------------
// Creativity grids
// ---------------------------------------------------------------------------

/// Entropy handling for steered decoding in a sweep. `Geodesic` keeps
/// whatever entropy the interpolated distribution lands on; `Fixed` projects
/// every step back to the full model's entropy, isolating the directional
/// effect of steering from its sharpening/flattening side effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    Geodesic,
    Fixed,
}

impl EntropyMode {
    pub fn name(&self) -> &'static str {
        match self {
            EntropyMode::Geodesic => "geodesic",
            EntropyMode::Fixed => "fixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "geodesic" => Some(EntropyMode::Geodesic),
            "fixed" => Some(EntropyMode::Fixed),
            _ => None,
        }
    }
}

/// One cell of a creativity sweep: the decoding settings and the scores of
/// the `n_items` items generated under them.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridCell {
    pub temperature: f64,
    pub alpha: f64,
    pub scores: CreativityScores,
}

/// SplitMix64 output permutation — a fixed bijection used to spread
/// structured (base, index) inputs into independent-looking seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one generated item. Depends on the temperature *index* and the
/// item index but deliberately not on alpha, so every alpha column of a grid
/// reuses the same prompts and sampling streams: the alpha = 0 column is
/// bit-identical to a plain temperature sweep over the same base seed.
fn item_seed(base_seed: u64, t_idx: usize, item: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(base_seed) ^ t_idx as u64) ^ item as u64)
}

/// Sweeps decoding settings on a trained creative-task model: for each
/// (temperature, alpha) cell, generates `n_items` items with divergence
/// steering and scores them against the task spec. Cells come back
/// temperature-major in the given grid order.
///
/// Each item draws its prompt and its sampling stream from a fresh
/// [`ChaCha8Rng`] seeded by `(base_seed, temperature index, item index)` —
/// never by alpha — so columns are comparable item-for-item and the
/// alpha = 0 column reproduces a plain temperature sweep exactly.
pub fn creativity_grid(
    model: &MicroModel,
    spec: &CreativeSpec,
    temps: &[f64],
    alphas: &[f64],
    n_items: usize,
    entropy_mode: EntropyMode,
    base_seed: u64,
) -> Result<Vec<GridCell>, AnalysisError> {
    if temps.is_empty() || alphas.is_empty() || n_items == 0 {
        return Err(AnalysisError::EmptyInput);
    }
    let mut cells = Vec::with_capacity(temps.len() * alphas.len());
    for (t_idx, &temperature) in temps.iter().enumerate() {
        for &alpha in alphas {
            let mut items: Vec<Vec<u32>> = Vec::with_capacity(n_items);
            for item in 0..n_items {
                let seed = item_seed(base_seed, t_idx, item);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let prompt = make_eval_prompt(spec, &mut rng)?;
                let params = SteeringParams {
                    temperature,
                    alpha,
                    fixed_entropy: entropy_mode == EntropyMode::Fixed,
                    top_k: None,
                    max_len: model.spec.config.context_len,
                    seed,
                };
                let generation =
                    steering::generate(model, &prompt, Some(END_TOKEN), &params, &mut rng)?;
                items.push(generation.tokens);
            }
            cells.push(GridCell { temperature, alpha, scores: score_items(spec, &items) });
        }
    }
    Ok(cells)
}

/// CSV body for a creativity grid (fixed header, one row per cell, full
/// float round-trip precision).
pub fn creativity_grid_csv(cells: &[GridCell]) -> String {
    let mut out = String::from("temperature,alpha,validity,uniqueness,novelty,creativity\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.temperature,
            c.alpha,
            c.scores.validity,
            c.scores.uniqueness,
            c.scores.novelty,
            c.scores.creativity
        ));
    }
    out
}
