//! User-based score normalization, verification scores and the z-score
//! fused multiple classifier system.
//!
//! Everything here is pure score algebra over cached dissimilarities: the
//! caller supplies distance tables or per-reference score vectors, which
//! keeps the module independent of how the underlying dissimilarities were
//! produced.

use thiserror::Error;

/// Floor applied to `delta(R)` and to fusion standard deviations so that
/// degenerate (all-identical) reference sets never divide by zero.
pub const EPSILON_FLOOR: f64 = 1e-12;

#[derive(Error, Debug)]
pub enum ScoringError {
    #[error("at least two references are required, got {0}")]
    TooFewReferences(usize),
    #[error("delta(R) must be positive")]
    ZeroDelta,
    #[error("at least two users are required for fusion statistics, got {0}")]
    TooFewUsers(usize),
}

/// A user's enrolled reference set with its per-classifier average
/// nearest-neighbor dissimilarities. `references` are opaque indices into
/// whatever image table the caller maintains.
#[derive(Debug, Clone)]
pub struct UserTemplate {
    pub user: String,
    pub references: Vec<usize>,
    pub delta_ged: f64,
    pub delta_neural: f64,
}

/// Average dissimilarity of each reference to its nearest other reference:
/// `delta(R) = (1/|R|) sum_r min_{s != r} d(r, s)`.
///
/// `distances` is the full `|R| x |R|` table (only off-diagonal entries are
/// read). A degenerate all-identical reference set is floored to
/// [`EPSILON_FLOOR`].
pub fn user_delta(distances: &[Vec<f64>]) -> Result<f64, ScoringError> {
    let n = distances.len();
    if n < 2 {
        return Err(ScoringError::TooFewReferences(n));
    }
    let mut sum = 0.0;
    for (r, row) in distances.iter().enumerate() {
        let min = row
            .iter()
            .enumerate()
            .filter(|&(s, _)| s != r)
            .map(|(_, &d)| d)
            .fold(f64::INFINITY, f64::min);
        sum += min;
    }
    Ok((sum / n as f64).max(EPSILON_FLOOR))
}

/// User-normalized score `d / delta(R)`.
pub fn normalized_score(d_value: f64, delta: f64) -> Result<f64, ScoringError> {
    if delta <= 0.0 {
        return Err(ScoringError::ZeroDelta);
    }
    Ok(d_value / delta)
}

/// Verification score of a questioned signature against a reference set:
/// minimum user-normalized dissimilarity over the references.
/// `ref_distances[i]` is `d(r_i, t)`.
pub fn verification_score(ref_distances: &[f64], delta: f64) -> Result<f64, ScoringError> {
    if ref_distances.is_empty() {
        return Err(ScoringError::TooFewReferences(0));
    }
    let mut best = f64::INFINITY;
    for &d in ref_distances {
        best = best.min(normalized_score(d, delta)?);
    }
    Ok(best)
}

/// Mean and population standard deviation of the user-normalized scores of
/// both classifiers over the cross-user reference population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionStats {
    pub mean_ged: f64,
    pub std_ged: f64,
    pub mean_neural: f64,
    pub std_neural: f64,
    /// One of the standard deviations was zero and has been floored.
    pub degenerate: bool,
}

fn population_stats(values: &[f64]) -> (f64, f64, bool) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 0.0 {
        (mean, std, false)
    } else {
        (mean, EPSILON_FLOOR, true)
    }
}

/// Z-score statistics for fusion, computed over the population of
/// user-normalized scores `d_hat(r, s)` where `r` ranges over each user's
/// references (normalized by that user's `delta(R)`) and `s` over all
/// reference images of all *other* users. Computed separately per
/// classifier.
///
/// `d_ged(a, b)` / `d_neural(a, b)` give the raw dissimilarity between
/// reference images identified by the template indices.
pub fn fusion_stats(
    templates: &[UserTemplate],
    mut d_ged: impl FnMut(usize, usize) -> f64,
    mut d_neural: impl FnMut(usize, usize) -> f64,
) -> Result<FusionStats, ScoringError> {
    if templates.len() < 2 {
        return Err(ScoringError::TooFewUsers(templates.len()));
    }
    let mut ged_scores = Vec::new();
    let mut neural_scores = Vec::new();
    for (ui, tu) in templates.iter().enumerate() {
        for &r in &tu.references {
            for (vi, tv) in templates.iter().enumerate() {
                if vi == ui {
                    continue;
                }
                for &s in &tv.references {
                    ged_scores.push(normalized_score(d_ged(r, s), tu.delta_ged)?);
                    neural_scores.push(normalized_score(d_neural(r, s), tu.delta_neural)?);
                }
            }
        }
    }
    let (mean_ged, std_ged, deg_g) = population_stats(&ged_scores);
    let (mean_neural, std_neural, deg_n) = population_stats(&neural_scores);
    Ok(FusionStats {
        mean_ged,
        std_ged,
        mean_neural,
        std_neural,
        degenerate: deg_g || deg_n,
    })
}

/// Fused verification score: per reference, z-score-normalize each
/// classifier's user-normalized score, sum the two, then take the minimum
/// over the references. The minimum is over per-reference sums, not the
/// sum of per-classifier minima.
///
/// `ged_hat[i]` and `neural_hat[i]` are the user-normalized scores of
/// reference `i` against the questioned signature.
pub fn mcs_score(
    ged_hat: &[f64],
    neural_hat: &[f64],
    stats: &FusionStats,
) -> Result<f64, ScoringError> {
    if ged_hat.is_empty() || ged_hat.len() != neural_hat.len() {
        return Err(ScoringError::TooFewReferences(ged_hat.len()));
    }
    let mut best = f64::INFINITY;
    for (g, n) in ged_hat.iter().zip(neural_hat) {
        let z = (g - stats.mean_ged) / stats.std_ged + (n - stats.mean_neural) / stats.std_neural;
        best = best.min(z);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
}

/// Accept iff the score is strictly below the threshold.
pub fn decide(score: f64, threshold: f64) -> Decision {
    if score < threshold {
        Decision::Accept
    } else {
        Decision::Reject
    }
}
