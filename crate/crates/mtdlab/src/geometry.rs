//! Probability-simplex geometry: softmax, entropy, KL divergence, and the
//! Fisher–Rao geodesic between categorical distributions.
//!
//! The square-root map `p ↦ √p` embeds the simplex onto the positive orthant
//! of the unit sphere, where the Fisher–Rao geodesic between two
//! distributions is a great-circle arc. Walking along that arc (and squaring
//! back) is the blending rule behind divergence steering; walking *past* an
//! endpoint extrapolates. Extrapolation can push sphere coordinates negative;
//! squaring folds them back onto the simplex, and that folding is surfaced as
//! a diagnostic because it marks the end of the trustworthy α range.
//!
//! All math here is f64 regardless of how logits are stored on disk.

use thiserror::Error;

/// Tolerance used when validating that probabilities sum to one.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Default stopping tolerance for [`fixed_entropy_project`].
pub const ENTROPY_TOL: f64 = 1e-9;

/// Bisection bracket for the temperature search in [`fixed_entropy_project`].
pub const TEMPERATURE_BRACKET: (f64, f64) = (1e-4, 1e4);

/// Maximum bisection iterations for [`fixed_entropy_project`].
pub const MAX_BISECTION_ITERS: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("a categorical distribution needs at least 2 entries, got {0}")]
    TooFewEntries(usize),
    #[error("probability at index {index} is {value}; entries must be finite and nonnegative")]
    BadProbability { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, which is not 1 within {NORMALIZATION_TOL}")]
    NotNormalized { sum: f64 },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("logit at index {index} is {value}; logits must be finite")]
    BadLogit { index: usize, value: f64 },
    #[error("entropy target {target} exceeds ln(support size) = {max} (support {support})")]
    InfeasibleEntropy { target: f64, max: f64, support: usize },
    #[error("entropy target {target} lies outside the range [{lo}, {hi}] reachable with T in [{}, {}]", TEMPERATURE_BRACKET.0, TEMPERATURE_BRACKET.1)]
    UnreachableEntropy { target: f64, lo: f64, hi: f64 },
    #[error("entropy target must be finite and nonnegative, got {0}")]
    BadEntropyTarget(f64),
    #[error("tolerance must be positive and finite, got {0}")]
    BadTolerance(f64),
}

/// A categorical distribution: at least two nonnegative entries summing to
/// one within [`NORMALIZATION_TOL`]. Construction validates; accessors never
/// hand out mutable probability storage, so a value of this type can be
/// trusted downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    /// Validates and wraps a probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self, GeometryError> {
        if probs.len() < 2 {
            return Err(GeometryError::TooFewEntries(probs.len()));
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(GeometryError::BadProbability { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(GeometryError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    /// Internal constructor for vectors this module has itself normalized.
    fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!(probs.len() >= 2);
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= NORMALIZATION_TOL);
        Self { probs }
    }

    /// Uniform distribution over `k` outcomes.
    pub fn uniform(k: usize) -> Result<Self, GeometryError> {
        if k < 2 {
            return Err(GeometryError::TooFewEntries(k));
        }
        Ok(Self::from_normalized(vec![1.0 / k as f64; k]))
    }

    /// Distribution with all mass on outcome `index`.
    pub fn one_hot(k: usize, index: usize) -> Result<Self, GeometryError> {
        if k < 2 {
            return Err(GeometryError::TooFewEntries(k));
        }
        assert!(index < k, "one_hot index {index} out of range for k = {k}");
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Ok(Self::from_normalized(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the invariant guarantees at least two entries
    }

    /// Number of entries with strictly positive probability.
    pub fn support_size(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }
}

/// A point on the unit sphere in R^K — the square-root embedding of a
/// distribution, or an interpolation between two such embeddings.
/// Coordinates may be negative after extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpherePoint {
    coords: Vec<f64>,
}

impl SpherePoint {
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

/// Embeds a distribution on the sphere: `u_k = sqrt(p_k)`.
pub fn sqrt_embed(p: &CategoricalDist) -> SpherePoint {
    SpherePoint {
        coords: p.probs.iter().map(|&x| x.sqrt()).collect(),
    }
}

/// Squares sphere coordinates back into a distribution. Negative
/// coordinates fold onto positive probability mass; the result is
/// renormalized to absorb rounding drift.
pub fn sphere_to_dist(u: &SpherePoint) -> CategoricalDist {
    let mut probs: Vec<f64> = u.coords.iter().map(|&x| x * x).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    CategoricalDist::from_normalized(probs)
}

/// Softmax of `logits / t`. Rejects non-finite logits and non-positive or
/// non-finite temperatures; max-subtraction keeps the exponentials stable.
pub fn softmax_with_temperature(
    logits: &[f64],
    t: f64,
) -> Result<CategoricalDist, GeometryError> {
    if !(t.is_finite() && t > 0.0) {
        return Err(GeometryError::BadTemperature(t));
    }
    if logits.len() < 2 {
        return Err(GeometryError::TooFewEntries(logits.len()));
    }
    for (index, &value) in logits.iter().enumerate() {
        if !value.is_finite() {
            return Err(GeometryError::BadLogit { index, value });
        }
    }
    Ok(softmax_unchecked(logits, t))
}

/// Softmax core shared with internal callers that allow -inf logits
/// (exactly-zero probability entries). At least one logit must be finite.
fn softmax_unchecked(logits: &[f64], t: f64) -> CategoricalDist {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite());
    let mut probs: Vec<f64> = logits.iter().map(|&l| ((l - max) / t).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    CategoricalDist::from_normalized(probs)
}

/// Rescales a distribution to temperature `t`: `softmax(ln p / t)`.
/// Zero entries stay exactly zero, so the support is preserved.
pub fn temperature_scale(p: &CategoricalDist, t: f64) -> Result<CategoricalDist, GeometryError> {
    if !(t.is_finite() && t > 0.0) {
        return Err(GeometryError::BadTemperature(t));
    }
    let logits: Vec<f64> = p.probs.iter().map(|&x| x.ln()).collect();
    Ok(softmax_unchecked(&logits, t))
}

/// Shannon entropy in nats, with the usual convention `0 ln 0 = 0`.
pub fn entropy(p: &CategoricalDist) -> f64 {
    let h: f64 = p
        .probs
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum();
    // The analytic quantity is nonnegative; rounding can leave a tiny
    // negative residue when mass sits on a single entry.
    if h < 0.0 && h > -NORMALIZATION_TOL {
        0.0
    } else {
        h
    }
}

/// KL divergence `D(p || q)` in nats. Returns `+inf` when `p` puts mass
/// where `q` has none; tiny negative rounding residues clamp to zero so the
/// analytic nonnegativity holds for callers.
pub fn kl_divergence(p: &CategoricalDist, q: &CategoricalDist) -> f64 {
    assert_eq!(
        p.len(),
        q.len(),
        "KL requires equal-length distributions ({} vs {})",
        p.len(),
        q.len()
    );
    let mut kl = 0.0;
    for (&pk, &qk) in p.probs.iter().zip(&q.probs) {
        if pk == 0.0 {
            continue;
        }
        if qk == 0.0 {
            return f64::INFINITY;
        }
        kl += pk * (pk / qk).ln();
    }
    if kl < 0.0 && kl > -NORMALIZATION_TOL {
        0.0
    } else {
        kl
    }
}

/// Bhattacharyya angle `Θ = arccos Σ √(p_k q_k)` — the spherical distance
/// between the square-root embeddings, in [0, π/2].
pub fn bhattacharyya_angle(p: &CategoricalDist, q: &CategoricalDist) -> f64 {
    assert_eq!(
        p.len(),
        q.len(),
        "angle requires equal-length distributions ({} vs {})",
        p.len(),
        q.len()
    );
    let dot: f64 = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(&a, &b)| (a * b).sqrt())
        .sum();
    dot.clamp(-1.0, 1.0).acos()
}

/// Result of walking the Fisher–Rao geodesic: the distribution at parameter
/// α, plus whether any sphere coordinate went negative on the way (folding).
/// Folding never happens for α in [0, 1]; once it does, the returned
/// distribution is still valid but no longer lies on the p–m great-circle
/// segment, so treat α values past the first fold with suspicion.
#[derive(Debug, Clone)]
pub struct GeodesicPoint {
    pub dist: CategoricalDist,
    pub folded: bool,
}

/// Spherical interpolation between `p` (α = 0) and `m` (α = 1) on the
/// square-root sphere, squared back to the simplex:
///
/// ```text
/// s_g(α) = sin((1-α)Θ)/sin Θ · √p  +  sin(αΘ)/sin Θ · √m
/// ```
///
/// α outside [0, 1] extrapolates along the same great circle; α < 0 walks
/// *away* from `m` through `p`. The usable α range is exactly the interval
/// where all `s_g` components stay nonnegative — outside it `folded` is set.
/// When `p` and `m` (nearly) coincide the geodesic degenerates and `p` is
/// returned for every α.
pub fn geodesic_interpolate(p: &CategoricalDist, m: &CategoricalDist, alpha: f64) -> GeodesicPoint {
    assert!(alpha.is_finite(), "alpha must be finite, got {alpha}");
    let u = sqrt_embed(p);
    let v = sqrt_embed(m);
    let theta = bhattacharyya_angle(p, m);
    if theta < 1e-12 {
        return GeodesicPoint {
            dist: p.clone(),
            folded: false,
        };
    }
    let sin_theta = theta.sin();
    let a = ((1.0 - alpha) * theta).sin() / sin_theta;
    let b = (alpha * theta).sin() / sin_theta;
    let coords: Vec<f64> = u
        .coords
        .iter()
        .zip(&v.coords)
        .map(|(&uk, &vk)| a * uk + b * vk)
        .collect();
    let folded = coords.iter().any(|&c| c < 0.0);
    GeodesicPoint {
        dist: sphere_to_dist(&SpherePoint { coords }),
        folded,
    }
}

/// Projects `s` onto the closest temperature-rescaled version of itself with
/// entropy `h_target`: bisects T in [`TEMPERATURE_BRACKET`] until
/// `|H(softmax(ln s / T)) - h_target| <= tol` or [`MAX_BISECTION_ITERS`]
/// iterations. Returns the projected distribution and the temperature found.
///
/// Zero entries stay outside the support. Edge policy:
/// - `h_target > ln(support size)` is infeasible and errors;
/// - `h_target` within `tol` of `ln(support size)` is only reached as
///   T → ∞, so the exact uniform over the support is returned with
///   `T = +inf`;
/// - targets below what T = 1e-4 can reach (possible only for extreme logit
///   spreads or an exactly-uniform `s`, whose entropy no temperature can
///   change) error as unreachable rather than silently clamping.
pub fn fixed_entropy_project(
    s: &CategoricalDist,
    h_target: f64,
    tol: f64,
) -> Result<(CategoricalDist, f64), GeometryError> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(GeometryError::BadTolerance(tol));
    }
    if !h_target.is_finite() || h_target < 0.0 {
        return Err(GeometryError::BadEntropyTarget(h_target));
    }
    let support: Vec<usize> = (0..s.len()).filter(|&i| s.probs[i] > 0.0).collect();
    let n_s = support.len();
    let max_entropy = (n_s as f64).ln();
    if h_target > max_entropy + 1e-12 {
        return Err(GeometryError::InfeasibleEntropy {
            target: h_target,
            max: max_entropy,
            support: n_s,
        });
    }
    if n_s == 1 {
        // Entropy is 0 at every temperature; the infeasible case returned above.
        return Ok((s.clone(), 1.0));
    }
    if h_target >= max_entropy - tol {
        let mut probs = vec![0.0; s.len()];
        for &i in &support {
            probs[i] = 1.0 / n_s as f64;
        }
        return Ok((CategoricalDist::from_normalized(probs), f64::INFINITY));
    }

    let log_s: Vec<f64> = s.probs.iter().map(|&x| x.ln()).collect();
    let at = |t: f64| softmax_unchecked(&log_s, t);
    let (t_lo, t_hi) = TEMPERATURE_BRACKET;
    let h_lo = entropy(&at(t_lo));
    let h_hi = entropy(&at(t_hi));
    if h_target < h_lo - tol || h_target > h_hi + tol {
        return Err(GeometryError::UnreachableEntropy {
            target: h_target,
            lo: h_lo,
            hi: h_hi,
        });
    }

    let (mut lo, mut hi) = (t_lo, t_hi);
    let mut t = if (h_lo - h_target).abs() <= tol {
        lo
    } else if (h_hi - h_target).abs() <= tol {
        hi
    } else {
        0.5 * (lo + hi)
    };
    for _ in 0..MAX_BISECTION_ITERS {
        let h = entropy(&at(t));
        if (h - h_target).abs() <= tol {
            break;
        }
        if h < h_target {
            lo = t;
        } else {
            hi = t;
        }
        t = 0.5 * (lo + hi);
    }
    Ok((at(t), t))
}
