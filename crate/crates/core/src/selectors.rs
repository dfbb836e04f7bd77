//! Training-free token scorers used as pruning baselines: random scores,
//! per-patch pixel variance, attention-readout scores, and the
//! "non-salient" inversion that prunes the highest-scoring tokens instead.
//!
//! Every selector produces plain score vectors and defers routing to
//! [`crate::cropr::select_top_k`], so the CLS-never-pruned override applies
//! uniformly.

use rand::Rng;

use crate::error::{CroprError, Result};
use crate::scalar::Scalar;
use crate::vit::{Image, CLS_POSITION};

/// I.i.d. uniform scores, one per current token; draws are consumed from
/// `rng` so a seeded generator reproduces the whole pruning trajectory.
pub fn random_score<T: Scalar>(m: usize, rng: &mut impl Rng) -> Vec<T> {
    (0..m).map(|_| T::from_f64(rng.random_range(0.0..1.0))).collect()
}

/// Per-patch pixel variance, averaged over channels. Population (biased)
/// variance: the 1/P vs 1/(P-1) factor is monotone and cannot change a
/// Top-K keep set. Computed once per image; the same scores serve every
/// pruning stage.
pub fn variance_score<T: Scalar>(image: &Image<T>, patch: usize) -> Result<Vec<T>> {
    if patch == 0 || image.side % patch != 0 {
        return Err(CroprError::contract(format!(
            "image side {} is not a multiple of patch {patch}",
            image.side
        )));
    }
    let per_side = image.side / patch;
    let count = (patch * patch) as f64;
    let mut scores = Vec::with_capacity(per_side * per_side);
    for py in 0..per_side {
        for px in 0..per_side {
            let mut channel_mean = 0.0;
            for c in 0..image.channels {
                let mut sum = 0.0;
                let mut sumsq = 0.0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        let v = image.pixel(c, py * patch + dy, px * patch + dx).to_f64();
                        sum += v;
                        sumsq += v * v;
                    }
                }
                let mean = sum / count;
                channel_mean += sumsq / count - mean * mean;
            }
            scores.push(T::from_f64(channel_mean / image.channels as f64));
        }
    }
    Ok(scores)
}

/// Negate scores (before the CLS override) so Top-K keeps what would
/// otherwise be pruned. Applying it twice restores the original keep set.
pub fn invert_scores<T: Scalar>(scores: &[T]) -> Vec<T> {
    scores.iter().map(|&s| -s).collect()
}

/// Look up per-position scores for the tokens that survive to a given
/// stage. `CLS_POSITION` maps to +inf so the class token is never pruned.
pub fn scores_for_positions<T: Scalar>(
    patch_scores: &[T],
    positions: &[usize],
) -> Result<Vec<T>> {
    positions
        .iter()
        .map(|&p| {
            if p == CLS_POSITION {
                Ok(T::infinity())
            } else if p < patch_scores.len() {
                Ok(patch_scores[p])
            } else {
                Err(CroprError::index(format!(
                    "position {p} outside the {}-patch score table",
                    patch_scores.len()
                )))
            }
        })
        .collect()
}
