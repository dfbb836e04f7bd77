//! The pruning module: a projection-free cross-attention scorer over
//! learnable queries, a Top-K (or sampling) token router, a softmax
//! aggregator with an auxiliary task head that supplies the learning
//! signal, and the inference-time fold that collapses the scorer into a
//! single precomputed query vector.
//!
//! Training-time layout per module (M tokens in, K kept, R pruned):
//!
//! ```text
//!            x ──────────────┬────────────── gather keep ──► next block
//!                            │                  │
//!                     stop-gradient        gather prune ──► fusion cache
//!                            │
//!              A = Q keysᵀ ──┤ (reused)
//!            scores = Σₙ Aₙ ─┴─► Top-K split (indices only)
//!     X' = softmax(A/√D) keys ──► MLP(LN(X')) + X' ──► aux head ──► loss
//! ```
//!
//! At inference only `q̄ = Σₙ Qₙ` survives: scores are `q̄ keysᵀ`, one dot
//! product per token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CroprError, Result};
use crate::nn::{Linear, LayerNorm, Mlp, NamedParams};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, IGNORE_LABEL};
use crate::vit::{Head, TokenBatch};

/// What the auxiliary head predicts, which also fixes the query count:
/// one query for global tasks, a grid of queries for dense ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskKind {
    Classification { classes: usize },
    Dense { grid: usize, classes: usize },
    Multilabel { classes: usize },
}

impl TaskKind {
    pub fn num_queries(&self) -> usize {
        match *self {
            TaskKind::Classification { .. } | TaskKind::Multilabel { .. } => 1,
            TaskKind::Dense { grid, .. } => grid * grid,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            TaskKind::Classification { classes }
            | TaskKind::Dense { classes, .. }
            | TaskKind::Multilabel { classes } => classes,
        }
    }
}

/// Ground truth for one image, matching the task kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Target<T> {
    Class(usize),
    /// Per-patch labels at grid resolution; [`IGNORE_LABEL`] entries are
    /// skipped by the loss.
    Dense(Vec<usize>),
    /// Multi-hot class indicator vector.
    Multi(Vec<T>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Projection-free: logits are plain `Q keysᵀ` dot products.
    Simple,
    /// Full multi-head cross-attention with Q/K/V/output projections and a
    /// key layer norm; an ablation arm, and not foldable.
    Mha,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    TopK,
    /// Sample the keep set from softmax(scores) without replacement.
    Sampling,
}

/// Ablation switches; defaults reproduce the main method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CroprVariants {
    pub scorer: ScorerKind,
    pub selector: SelectorKind,
    /// Aggregator MLP+LN residual path on/off.
    pub use_mlp: bool,
    /// Detach tokens before scorer/aggregator so auxiliary losses never
    /// touch backbone gradients.
    pub stop_grad: bool,
}

impl Default for CroprVariants {
    fn default() -> Self {
        CroprVariants {
            scorer: ScorerKind::Simple,
            selector: SelectorKind::TopK,
            use_mlp: true,
            stop_grad: true,
        }
    }
}

/// Scores plus the attention matrix they came from, before any routing.
pub struct Scored<T: Scalar> {
    /// N x M raw logits (per-head sum in MHA mode).
    pub attention: Tensor<T>,
    /// Length-M per-token relevance; CLS overridden to +inf.
    pub scores: Vec<T>,
    /// The (possibly detached) tokens the scorer consumed; the aggregator
    /// reuses them as values.
    keys: Tensor<T>,
}

/// Outcome of routing one token batch.
pub struct RouteResult<T: Scalar> {
    pub keep: TokenBatch<T>,
    pub pruned: TokenBatch<T>,
    /// Post-override scores, one per input token.
    pub scores: Vec<T>,
    /// Raw scorer logits (training mode only).
    pub attention: Option<Tensor<T>>,
    /// 1-based index of the block this routing followed.
    pub block: usize,
}

/// Multi-head cross-attention scorer (the "full MHA" ablation arm).
pub struct MhaScorer<T: Scalar> {
    pub key_ln: LayerNorm<T>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> MhaScorer<T> {
    fn new(tape: &Tape<T>, rng: &mut impl Rng, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CroprError::config(format!(
                "scorer width {dim} must be divisible by heads {heads}"
            )));
        }
        Ok(MhaScorer {
            key_ln: LayerNorm::new(tape, dim)?,
            wq: Linear::new(tape, rng, dim, dim, true)?,
            wk: Linear::new(tape, rng, dim, dim, true)?,
            wv: Linear::new(tape, rng, dim, dim, true)?,
            wo: Linear::new(tape, rng, dim, dim, true)?,
            heads,
        })
    }

    fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.key_ln.collect(&format!("{prefix}.key_ln"), out);
        self.wq.collect(&format!("{prefix}.wq"), out);
        self.wk.collect(&format!("{prefix}.wk"), out);
        self.wv.collect(&format!("{prefix}.wv"), out);
        self.wo.collect(&format!("{prefix}.wo"), out);
    }
}

/// One pruning module: queries, aggregator, and auxiliary head.
pub struct CroprModule<T: Scalar> {
    /// N x D learnable queries.
    pub queries: Tensor<T>,
    /// Aggregator residual path (absent under the MLP-off ablation).
    pub agg_ln: Option<LayerNorm<T>>,
    pub agg_mlp: Option<Mlp<T>>,
    pub aux_head: Head<T>,
    pub mha: Option<MhaScorer<T>>,
    pub task: TaskKind,
    pub variants: CroprVariants,
    dim: usize,
}

impl<T: Scalar> CroprModule<T> {
    pub fn new(
        tape: &Tape<T>,
        rng: &mut impl Rng,
        dim: usize,
        mlp_ratio: usize,
        heads: usize,
        task: TaskKind,
        variants: CroprVariants,
    ) -> Result<Self> {
        let n = task.num_queries();
        if n == 0 {
            return Err(CroprError::config("query count must be positive"));
        }
        let queries = tape.param(n, dim, crate::nn::trunc_normal(rng, n * dim, 0.02))?;
        let (agg_ln, agg_mlp) = if variants.use_mlp {
            (
                Some(LayerNorm::new(tape, dim)?),
                Some(Mlp::new(tape, rng, dim, dim * mlp_ratio)?),
            )
        } else {
            (None, None)
        };
        let mha = match variants.scorer {
            ScorerKind::Simple => None,
            ScorerKind::Mha => Some(MhaScorer::new(tape, rng, dim, heads)?),
        };
        let aux_head = Head::new(tape, rng, dim, task.classes())?;
        Ok(CroprModule { queries, agg_ln, agg_mlp, aux_head, mha, task, variants, dim })
    }

    pub fn num_queries(&self) -> usize {
        self.queries.rows()
    }

    /// Scorer pass: raw attention logits and the per-token score vector
    /// (query-axis sum of the raw logits, CLS forced to +inf).
    pub fn score(&self, x: &TokenBatch<T>) -> Result<Scored<T>> {
        let keys = if self.variants.stop_grad {
            x.tokens.stop_gradient()?
        } else {
            x.tokens.clone()
        };
        let attention = match &self.mha {
            None => self.queries.matmul(&keys.transpose()?)?,
            Some(mha) => {
                let dh = self.dim / mha.heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let kx = mha.key_ln.forward(&keys)?;
                let q = mha.wq.forward(&self.queries)?;
                let k = mha.wk.forward(&kx)?;
                let mut sum: Option<Tensor<T>> = None;
                for h in 0..mha.heads {
                    let lh = q
                        .slice_cols(h * dh, dh)?
                        .matmul(&k.slice_cols(h * dh, dh)?.transpose()?)?
                        .scale(scale)?;
                    sum = Some(match sum {
                        Some(prev) => prev.add(&lh)?,
                        None => lh,
                    });
                }
                sum.expect("heads >= 1")
            }
        };
        let mut scores = attention.sum_over_rows()?.value();
        if x.cls_present {
            scores[0] = T::infinity();
        }
        Ok(Scored { attention, scores, keys })
    }

    /// Aggregator pass (Z, one row per query): softmax over tokens with a
    /// sqrt(D) temperature, then the MLP/LN residual unless ablated away.
    pub fn aggregate(&self, scored: &Scored<T>) -> Result<Tensor<T>> {
        let temp = T::from_f64(1.0 / (self.dim as f64).sqrt());
        let x_prime = match &self.mha {
            None => scored
                .attention
                .scale(temp)?
                .softmax_rows()?
                .matmul(&scored.keys)?,
            Some(mha) => {
                // Full cross-attention: per-head softmax mixing of projected
                // values, then the output projection.
                let dh = self.dim / mha.heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let kx = mha.key_ln.forward(&scored.keys)?;
                let q = mha.wq.forward(&self.queries)?;
                let k = mha.wk.forward(&kx)?;
                let v = mha.wv.forward(&kx)?;
                let mut mixed: Option<Tensor<T>> = None;
                for h in 0..mha.heads {
                    let attn = q
                        .slice_cols(h * dh, dh)?
                        .matmul(&k.slice_cols(h * dh, dh)?.transpose()?)?
                        .scale(scale)?
                        .softmax_rows()?;
                    let oh = attn.matmul(&v.slice_cols(h * dh, dh)?)?;
                    mixed = Some(match mixed {
                        Some(prev) => prev.concat_cols(&oh)?,
                        None => oh,
                    });
                }
                mha.wo.forward(&mixed.expect("heads >= 1"))?
            }
        };
        match (&self.agg_ln, &self.agg_mlp) {
            (Some(ln), Some(mlp)) => mlp.forward(&ln.forward(&x_prime)?)?.add(&x_prime),
            _ => Ok(x_prime),
        }
    }

    /// Auxiliary logits and loss for one image.
    pub fn aux_loss(&self, z: &Tensor<T>, target: &Target<T>) -> Result<Tensor<T>> {
        let logits = self.aux_head.forward(z)?;
        match target {
            Target::Class(c) => {
                if logits.rows() != 1 {
                    return Err(CroprError::contract(
                        "classification target with a multi-row aggregate",
                    ));
                }
                logits.cross_entropy_mean(&[*c])
            }
            Target::Dense(labels) => {
                if labels.len() != logits.rows() {
                    return Err(CroprError::contract(format!(
                        "dense target has {} labels for {} query rows",
                        labels.len(),
                        logits.rows()
                    )));
                }
                if labels.iter().all(|&l| l == IGNORE_LABEL) {
                    // Nothing to supervise; contribute exactly zero.
                    return logits.tape().input(1, 1, vec![T::zero()]);
                }
                logits.cross_entropy_mean(labels)
            }
            Target::Multi(targets) => logits.bce_with_logits_mean(targets),
        }
    }

    /// Full training-mode pass: score, route R tokens out, compute the
    /// auxiliary loss from the aggregate. `block` is recorded for fusion.
    pub fn forward_train(
        &self,
        x: &TokenBatch<T>,
        r: usize,
        target: &Target<T>,
        block: usize,
        rng: &mut impl Rng,
    ) -> Result<(RouteResult<T>, Tensor<T>)> {
        let m = x.len();
        let reserved = usize::from(x.cls_present);
        if r + reserved >= m {
            return Err(CroprError::schedule(format!(
                "cannot prune {r} of {m} tokens ({} prunable)",
                m - reserved
            )));
        }
        let scored = self.score(x)?;
        let k = m - r;
        let route = match self.variants.selector {
            SelectorKind::TopK => select_top_k(x, &scored.scores, k, block)?,
            SelectorKind::Sampling => select_sampling(x, &scored.scores, k, block, rng)?,
        };
        let z = self.aggregate(&scored)?;
        let loss = self.aux_loss(&z, target)?;
        let route = RouteResult { attention: Some(scored.attention), ..route };
        Ok((route, loss))
    }

    /// Collapse the scorer to its precomputed summed query. Only the
    /// projection-free scorer admits this rewrite.
    pub fn fold(&self) -> Result<FoldedRouter<T>> {
        if self.mha.is_some() {
            return Err(CroprError::UnsupportedVariant(
                "the MHA scorer's projections do not reduce to a single query".into(),
            ));
        }
        let q = self.queries.value();
        let n = self.queries.rows();
        let d = self.queries.cols();
        let mut qbar = vec![T::zero(); d];
        for row in 0..n {
            for c in 0..d {
                qbar[c] = qbar[c] + q[row * d + c];
            }
        }
        Ok(FoldedRouter { qbar })
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.queries"), self.queries.clone()));
        if let Some(ln) = &self.agg_ln {
            ln.collect(&format!("{prefix}.agg_ln"), out);
        }
        if let Some(mlp) = &self.agg_mlp {
            mlp.collect(&format!("{prefix}.agg_mlp"), out);
        }
        if let Some(mha) = &self.mha {
            mha.collect(&format!("{prefix}.mha"), out);
        }
        self.aux_head.collect(&format!("{prefix}.aux_head"), out);
    }
}

/// Keep the `k` highest-scoring rows. Ties keep the lower row (original
/// raster position); both output index lists stay in raster order.
pub fn top_k_rows<T: Scalar>(scores: &[T], k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let m = scores.len();
    if k == 0 || k > m {
        return Err(CroprError::contract(format!(
            "keep count {k} out of range for {m} tokens"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    // Stable sort by descending score: equal scores keep index order.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("scores must not be NaN"));
    let mut keep: Vec<usize> = order[..k].to_vec();
    let mut pruned: Vec<usize> = order[k..].to_vec();
    keep.sort_unstable();
    pruned.sort_unstable();
    Ok((keep, pruned))
}

fn split_batch<T: Scalar>(
    x: &TokenBatch<T>,
    keep_rows: &[usize],
    prune_rows: &[usize],
    scores: &[T],
    block: usize,
) -> Result<RouteResult<T>> {
    let keep = TokenBatch::new(
        x.tokens.gather_rows(keep_rows)?,
        keep_rows.iter().map(|&i| x.positions[i]).collect(),
        x.cls_present,
    )?;
    let pruned = TokenBatch::new(
        x.tokens.gather_rows(prune_rows)?,
        prune_rows.iter().map(|&i| x.positions[i]).collect(),
        false,
    )?;
    Ok(RouteResult { keep, pruned, scores: scores.to_vec(), attention: None, block })
}

/// Deterministic Top-K routing; `k` counts the CLS token when present.
pub fn select_top_k<T: Scalar>(
    x: &TokenBatch<T>,
    scores: &[T],
    k: usize,
    block: usize,
) -> Result<RouteResult<T>> {
    if scores.len() != x.len() {
        return Err(CroprError::contract(format!(
            "{} scores for {} tokens",
            scores.len(),
            x.len()
        )));
    }
    let (keep_rows, prune_rows) = top_k_rows(scores, k)?;
    split_batch(x, &keep_rows, &prune_rows, scores, block)
}

/// Stochastic routing: keep rows sampled without replacement with
/// probabilities softmax(scores); the CLS token is always kept.
pub fn select_sampling<T: Scalar>(
    x: &TokenBatch<T>,
    scores: &[T],
    k: usize,
    block: usize,
    rng: &mut impl Rng,
) -> Result<RouteResult<T>> {
    let m = x.len();
    if scores.len() != m {
        return Err(CroprError::contract(format!("{} scores for {m} tokens", scores.len())));
    }
    if k == 0 || k > m {
        return Err(CroprError::contract(format!("keep count {k} out of range for {m} tokens")));
    }
    let reserved = usize::from(x.cls_present);
    if k < reserved {
        return Err(CroprError::contract("keep count smaller than the reserved CLS"));
    }

    // Softmax weights over the prunable tokens only (the CLS +inf override
    // must not poison the distribution).
    let candidates: Vec<usize> = (reserved..m).collect();
    let finite_max = candidates
        .iter()
        .map(|&i| scores[i].to_f64())
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = candidates
        .iter()
        .map(|&i| {
            let s = scores[i].to_f64();
            if finite_max.is_finite() {
                (s - finite_max).exp()
            } else {
                1.0 // all scores -inf: fall back to uniform
            }
        })
        .collect();

    let mut chosen: Vec<usize> = (0..reserved).collect();
    let mut alive: Vec<usize> = (0..candidates.len()).collect();
    while chosen.len() < k {
        let total: f64 = alive.iter().map(|&j| weights[j]).sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut picked = alive.len() - 1;
            for (slot, &j) in alive.iter().enumerate() {
                if u < weights[j] {
                    picked = slot;
                    break;
                }
                u -= weights[j];
            }
            picked
        } else {
            0 // zero mass left: take remaining tokens in raster order
        };
        let j = alive.swap_remove(pick);
        weights[j] = weights[j].max(0.0);
        chosen.push(candidates[j]);
    }

    let mut keep_rows = chosen;
    keep_rows.sort_unstable();
    let mut prune_rows: Vec<usize> =
        (0..m).filter(|i| keep_rows.binary_search(i).is_err()).collect();
    prune_rows.sort_unstable();
    split_batch(x, &keep_rows, &prune_rows, scores, block)
}

/// The inference artifact: one summed query per module.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedRouter<T> {
    pub qbar: Vec<T>,
}

impl<T: Scalar> FoldedRouter<T> {
    /// Scores as one dot product per token, with the CLS override. Hot
    /// path: accumulation order matches [`FoldedRouter::score_counted`]
    /// exactly, so the two stay bitwise interchangeable.
    pub fn score(&self, tokens: &[T], m: usize, cls_present: bool) -> Result<Vec<T>> {
        let d = self.qbar.len();
        if tokens.len() != m * d {
            return Err(CroprError::dimension(format!(
                "{} token values for {m} tokens of width {d}",
                tokens.len()
            )));
        }
        let mut scores: Vec<T> = tokens
            .chunks_exact(d)
            .map(|row| {
                self.qbar
                    .iter()
                    .zip(row)
                    .fold(T::zero(), |acc, (&q, &t)| acc + q * t)
            })
            .collect();
        if cls_present {
            scores[0] = T::infinity();
        }
        Ok(scores)
    }

    /// Same, returning the multiply count so tests can pin the O(M·D) cost.
    pub fn score_counted(
        &self,
        tokens: &[T],
        m: usize,
        cls_present: bool,
    ) -> Result<(Vec<T>, usize)> {
        let d = self.qbar.len();
        if tokens.len() != m * d {
            return Err(CroprError::dimension(format!(
                "{} token values for {m} tokens of width {d}",
                tokens.len()
            )));
        }
        let mut mults = 0usize;
        let mut scores = Vec::with_capacity(m);
        for row in 0..m {
            let mut acc = T::zero();
            for c in 0..d {
                acc = acc + self.qbar[c] * tokens[row * d + c];
                mults += 1;
            }
            scores.push(acc);
        }
        if cls_present {
            scores[0] = T::infinity();
        }
        Ok((scores, mults))
    }
}

/// Majority-vote downsampling of a pixel label grid to patch resolution.
/// Ignored pixels don't vote; all-ignore cells stay ignored; vote ties go
/// to the smaller class id.
pub fn downsample_labels(
    pixel_labels: &[usize],
    side: usize,
    patch: usize,
) -> Result<Vec<usize>> {
    if pixel_labels.len() != side * side {
        return Err(CroprError::contract(format!(
            "{} labels for a {side}x{side} grid",
            pixel_labels.len()
        )));
    }
    if patch == 0 || side % patch != 0 {
        return Err(CroprError::contract(format!(
            "grid side {side} is not a multiple of patch {patch}"
        )));
    }
    let per_side = side / patch;
    let mut out = Vec::with_capacity(per_side * per_side);
    for py in 0..per_side {
        for px in 0..per_side {
            let mut counts: std::collections::BTreeMap<usize, usize> =
                std::collections::BTreeMap::new();
            for dy in 0..patch {
                for dx in 0..patch {
                    let l = pixel_labels[(py * patch + dy) * side + (px * patch + dx)];
                    if l != IGNORE_LABEL {
                        *counts.entry(l).or_insert(0) += 1;
                    }
                }
            }
            // BTreeMap iteration is ascending by class id, so the first
            // maximum wins ties with the smallest id.
            let winner = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&class, _)| class)
                .unwrap_or(IGNORE_LABEL);
            out.push(winner);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::gradcheck_params;
    use crate::vit::CLS_POSITION;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch_from(tape: &Tape<f64>, rows: Vec<Vec<f64>>, cls: bool) -> TokenBatch<f64> {
        let m = rows.len();
        let d = rows[0].len();
        let tokens = tape.input(m, d, rows.concat()).unwrap();
        let mut positions: Vec<usize> = Vec::new();
        if cls {
            positions.push(CLS_POSITION);
            positions.extend(0..m - 1);
        } else {
            positions.extend(0..m);
        }
        TokenBatch::new(tokens, positions, cls).unwrap()
    }

    fn module(
        tape: &Tape<f64>,
        seed: u64,
        dim: usize,
        task: TaskKind,
        variants: CroprVariants,
    ) -> CroprModule<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CroprModule::new(tape, &mut rng, dim, 2, 2, task, variants).unwrap()
    }

    #[test]
    fn score_single_query_dot_products() {
        let tape: Tape<f64> = Tape::new();
        let m = module(&tape, 0, 2, TaskKind::Classification { classes: 2 }, Default::default());
        m.queries.set_value(&[1.0, 0.0]).unwrap();
        let x = batch_from(&tape, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]], false);
        let scored = m.score(&x).unwrap();
        assert_eq!(scored.attention.value(), vec![1.0, 0.0, 2.0]);
        assert_eq!(scored.scores, vec![1.0, 0.0, 2.0]);
    }

    #[test]
    fn score_sums_over_queries() {
        let tape: Tape<f64> = Tape::new();
        let m = module(&tape, 0, 2, TaskKind::Dense { grid: 1, classes: 2 }, Default::default());
        // Dense grid=1 gives one query; rebuild with two via a 2x2 grid is
        // overkill — set a two-row query matrix through a fresh module.
        let tape2: Tape<f64> = Tape::new();
        let m2 =
            module(&tape2, 0, 2, TaskKind::Dense { grid: 2, classes: 2 }, Default::default());
        // grid 2 → 4 queries; zero the extra two rows.
        m2.queries.set_value(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let x = batch_from(&tape2, vec![vec![1.0, 1.0], vec![2.0, 0.0]], false);
        let scored = m2.score(&x).unwrap();
        assert_eq!(scored.scores, vec![2.0, 2.0]);
        let _ = m;
    }

    #[test]
    fn score_overrides_cls_to_infinity() {
        let tape: Tape<f64> = Tape::new();
        let m = module(&tape, 1, 2, TaskKind::Classification { classes: 2 }, Default::default());
        m.queries.set_value(&[-5.0, -5.0]).unwrap();
        let x = batch_from(&tape, vec![vec![9.0, 9.0], vec![1.0, 1.0]], true);
        let scored = m.score(&x).unwrap();
        assert!(scored.scores[0].is_infinite() && scored.scores[0] > 0.0);
        assert!((scored.scores[1] + 10.0).abs() < 1e-12);
    }

    #[test]
    fn score_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape: Tape<f64> = Tape::new();
        let m = module(&tape, 2, 8, TaskKind::Dense { grid: 2, classes: 3 }, Default::default());
        use rand::Rng as _;
        let rows: Vec<Vec<f64>> =
            (0..12).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let x = batch_from(&tape, rows.clone(), false);
        let scored = m.score(&x).unwrap();
        let q = m.queries.value();
        for (j, row) in rows.iter().enumerate() {
            let mut want = 0.0;
            for n in 0..4 {
                for c in 0..8 {
                    want += q[n * 8 + c] * row[c];
                }
            }
            assert!((scored.scores[j] - want).abs() < 1e-9, "token {j}");
        }
    }

    #[test]
    fn top_k_examples_and_tie_break() {
        let scores = [0.1, 0.9, 0.5];
        let (keep, pruned) = top_k_rows(&scores, 2).unwrap();
        assert_eq!(keep, vec![1, 2]);
        assert_eq!(pruned, vec![0]);

        let ties = [1.0, 1.0, 1.0];
        let (keep, pruned) = top_k_rows(&ties, 2).unwrap();
        assert_eq!(keep, vec![0, 1], "ties keep the lower position");
        assert_eq!(pruned, vec![2]);

        assert!(top_k_rows(&ties, 0).is_err());
        assert!(top_k_rows(&ties, 4).is_err());
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng as _;
        for _ in 0..200 {
            let m = rng.random_range(2..20);
            let k = rng.random_range(1..=m);
            let scores: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (keep, pruned) = top_k_rows(&scores, k).unwrap();

            let mut oracle: Vec<usize> = (0..m).collect();
            oracle.sort_by(|&a, &b| {
                scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
            });
            let mut want: Vec<usize> = oracle[..k].to_vec();
            want.sort_unstable();
            assert_eq!(keep, want);
            assert_eq!(keep.len() + pruned.len(), m);
        }
    }

    #[test]
    fn keep_set_invariant_under_monotone_score_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng as _;
        for _ in 0..100 {
            let m = rng.random_range(2..16);
            let k = rng.random_range(1..=m);
            let scores: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (keep, _) = top_k_rows(&scores, k).unwrap();
            let affine: Vec<f64> = scores.iter().map(|&s| 3.0 * s + 7.0).collect();
            let expd: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
            assert_eq!(top_k_rows(&affine, k).unwrap().0, keep);
            assert_eq!(top_k_rows(&expd, k).unwrap().0, keep);
        }
    }

    #[test]
    fn routing_is_a_partition_with_cls_kept() {
        let tape: Tape<f64> = Tape::new();
        let x = batch_from(
            &tape,
            vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]],
            true,
        );
        let scores = vec![f64::INFINITY, 0.2, 0.9, 0.1];
        let route = select_top_k(&x, &scores, 2, 1).unwrap();
        assert_eq!(route.keep.positions, vec![CLS_POSITION, 1]);
        assert_eq!(route.pruned.positions, vec![0, 2]);
        assert!(route.keep.cls_present);
        assert!(!route.pruned.cls_present);
        // Values travel with their tokens.
        assert_eq!(route.keep.tokens.value(), vec![0.0, 0.0, 3.0, 4.0]);
        assert_eq!(route.pruned.tokens.value(), vec![1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn sampling_is_without_replacement_and_respects_cls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape: Tape<f64> = Tape::new();
        for _ in 0..50 {
            let x = batch_from(
                &tape,
                (0..6).map(|i| vec![i as f64, 0.0]).collect(),
                true,
            );
            let scores = vec![f64::INFINITY, 0.5, 0.1, 0.9, 0.3, 0.2];
            let route = select_sampling(&x, &scores, 3, 1, &mut rng).unwrap();
            assert_eq!(route.keep.len(), 3);
            assert_eq!(route.pruned.len(), 3);
            assert_eq!(route.keep.positions[0], CLS_POSITION);
            let mut all: Vec<usize> =
                route.keep.positions.iter().chain(&route.pruned.positions).copied().collect();
            all.sort_unstable();
            assert_eq!(all, vec![0, 1, 2, 3, 4, CLS_POSITION]);
        }
    }

    #[test]
    fn sampling_deterministic_when_one_score_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape: Tape<f64> = Tape::new();
        for _ in 0..20 {
            let x = batch_from(&tape, (0..4).map(|i| vec![i as f64]).collect(), false);
            let scores = vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 4.0, f64::NEG_INFINITY];
            let route = select_sampling(&x, &scores, 1, 1, &mut rng).unwrap();
            assert_eq!(route.keep.positions, vec![2]);
        }
    }

    #[test]
    fn sampling_uniform_frequencies_match_hypergeometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape: Tape<f64> = Tape::new();
        let draws = 10_000;
        let mut kept_counts = [0usize; 4];
        let x = batch_from(&tape, (0..4).map(|i| vec![i as f64]).collect(), false);
        for _ in 0..draws {
            let scores = vec![1.0; 4];
            let route = select_sampling(&x, &scores, 2, 1, &mut rng).unwrap();
            for &p in &route.keep.positions {
                kept_counts[p] += 1;
            }
        }
        for (i, &c) in kept_counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.03, "token {i} kept at {freq}");
        }
    }

    #[test]
    fn aggregate_uniform_attention_returns_token_mean() {
        let tape: Tape<f64> = Tape::new();
        let m = module(&tape, 8, 2, TaskKind::Classification { classes: 2 }, Default::default());
        m.queries.set_value(&[0.0, 0.0]).unwrap();
        // Zero the MLP's second layer so only the residual path remains.
        m.agg_mlp.as_ref().unwrap().fc2.weight.set_value(&vec![0.0; 4 * 2]).unwrap();
        m.agg_mlp.as_ref().unwrap().fc2.bias.as_ref().unwrap().set_value(&[0.0; 2]).unwrap();
        let x = batch_from(&tape, vec![vec![1.0, 5.0], vec![3.0, 7.0]], false);
        let scored = m.score(&x).unwrap();
        let z = m.aggregate(&scored).unwrap();
        assert_eq!(z.shape(), (1, 2));
        let zv = z.value();
        assert!((zv[0] - 2.0).abs() < 1e-12 && (zv[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_single_token_is_mlp_residual_of_it() {
        let tape: Tape<f64> = Tape::new();
        let m = module(&tape, 9, 3, TaskKind::Classification { classes: 2 }, Default::default());
        let x = batch_from(&tape, vec![vec![0.3, -0.7, 1.1]], false);
        let scored = m.score(&x).unwrap();
        let z = m.aggregate(&scored).unwrap().value();
        // Oracle: softmax over one token is weight 1, so X' = x0 and
        // Z = MLP(LN(x0)) + x0 evaluated with the module's own params.
        let ln = m.agg_ln.as_ref().unwrap();
        let mlp = m.agg_mlp.as_ref().unwrap();
        let x0 = tape.input(1, 3, vec![0.3, -0.7, 1.1]).unwrap();
        let want = mlp.forward(&ln.forward(&x0).unwrap()).unwrap().add(&x0).unwrap().value();
        for (a, b) in z.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_matches_straight_line_oracle() {
        let tape: Tape<f64> = Tape::new();
        let dim = 4;
        let m = module(&tape, 10, dim, TaskKind::Dense { grid: 2, classes: 2 }, Default::default());
        let rows: Vec<Vec<f64>> =
            (0..5).map(|i| (0..dim).map(|c| ((i * dim + c) as f64 * 0.17).sin()).collect()).collect();
        let x = batch_from(&tape, rows.clone(), false);
        let scored = m.score(&x).unwrap();
        let z = m.aggregate(&scored).unwrap().value();

        // Oracle: recompute softmax(QX^T / sqrt(D)) X with plain loops.
        let q = m.queries.value();
        let n = 4;
        let mut xprime = vec![0.0; n * dim];
        for qi in 0..n {
            let logits: Vec<f64> = rows
                .iter()
                .map(|row| {
                    (0..dim).map(|c| q[qi * dim + c] * row[c]).sum::<f64>()
                        / (dim as f64).sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for (w, row) in exps.iter().zip(&rows) {
                for c in 0..dim {
                    xprime[qi * dim + c] += w / denom * row[c];
                }
            }
        }
        let xp = tape.input(n, dim, xprime).unwrap();
        let want = m
            .agg_mlp
            .as_ref()
            .unwrap()
            .forward(&m.agg_ln.as_ref().unwrap().forward(&xp).unwrap())
            .unwrap()
            .add(&xp)
            .unwrap()
            .value();
        for (a, b) in z.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mlp_off_ablation_returns_bare_pooling() {
        let tape: Tape<f64> = Tape::new();
        let variants = CroprVariants { use_mlp: false, ..Default::default() };
        let m = module(&tape, 11, 2, TaskKind::Classification { classes: 2 }, variants);
        assert!(m.agg_ln.is_none() && m.agg_mlp.is_none());
        m.queries.set_value(&[0.0, 0.0]).unwrap();
        let x = batch_from(&tape, vec![vec![2.0, 0.0], vec![4.0, 2.0]], false);
        let scored = m.score(&x).unwrap();
        assert_eq!(m.aggregate(&scored).unwrap().value(), vec![3.0, 1.0]);
    }

    #[test]
    fn aux_head_classification_uniform_at_zero_weights() {
        let tape: Tape<f64> = Tape::new();
        let m = module(&tape, 12, 4, TaskKind::Classification { classes: 5 }, Default::default());
        m.aux_head.linear.weight.set_value(&vec![0.0; 4 * 5]).unwrap();
        m.aux_head.linear.bias.as_ref().unwrap().set_value(&[0.0; 5]).unwrap();
        let z = tape.input(1, 4, vec![0.4, -0.1, 0.7, 0.2]).unwrap();
        let loss = m.aux_loss(&z, &Target::Class(3)).unwrap().scalar().unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aux_head_dense_matches_per_patch_classification() {
        let tape: Tape<f64> = Tape::new();
        let m = module(&tape, 13, 4, TaskKind::Dense { grid: 2, classes: 3 }, Default::default());
        let z = tape
            .input(4, 4, (0..16).map(|i| (i as f64 * 0.23).cos()).collect())
            .unwrap();
        let labels = vec![2usize, 0, IGNORE_LABEL, 1];
        let loss = m.aux_loss(&z, &Target::Dense(labels.clone())).unwrap().scalar().unwrap();

        // Oracle: average of three single-row classification losses.
        let mut acc = 0.0;
        for (row, &lab) in labels.iter().enumerate() {
            if lab == IGNORE_LABEL {
                continue;
            }
            let zr = z.slice_rows(row, 1).unwrap();
            let logits = m.aux_head.forward(&zr).unwrap();
            acc += logits.cross_entropy_mean(&[lab]).unwrap().scalar().unwrap();
        }
        assert!((loss - acc / 3.0).abs() < 1e-9);

        // All-ignore yields a hard zero with no gradient anywhere.
        let loss0 = m.aux_loss(&z, &Target::Dense(vec![IGNORE_LABEL; 4])).unwrap();
        assert_eq!(loss0.scalar().unwrap(), 0.0);
    }

    #[test]
    fn aux_head_multilabel_reference_values() {
        let tape: Tape<f64> = Tape::new();
        let m = module(&tape, 14, 4, TaskKind::Multilabel { classes: 3 }, Default::default());
        m.aux_head.linear.weight.set_value(&vec![0.0; 12]).unwrap();
        m.aux_head.linear.bias.as_ref().unwrap().set_value(&[0.0, 0.0, 0.0]).unwrap();
        let z = tape.input(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let loss =
            m.aux_loss(&z, &Target::Multi(vec![1.0, 0.0, 1.0])).unwrap().scalar().unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12, "zero logits give ln 2 per class");

        // Saturated correct logit: near-zero loss for that class.
        m.aux_head.linear.bias.as_ref().unwrap().set_value(&[20.0, -20.0, 20.0]).unwrap();
        let loss2 =
            m.aux_loss(&z, &Target::Multi(vec![1.0, 0.0, 1.0])).unwrap().scalar().unwrap();
        assert!(loss2 < 1e-6);
    }

    #[test]
    fn forward_train_handles_r_zero_and_oversized_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let tape: Tape<f64> = Tape::new();
        let m = module(&tape, 15, 4, TaskKind::Classification { classes: 2 }, Default::default());
        let x = batch_from(
            &tape,
            (0..5).map(|i| (0..4).map(|c| (i + c) as f64).collect()).collect(),
            true,
        );
        let (route, loss) = m.forward_train(&x, 0, &Target::Class(1), 1, &mut rng).unwrap();
        assert_eq!(route.keep.len(), 5);
        assert!(route.pruned.is_empty());
        assert!(loss.scalar().unwrap().is_finite());

        assert!(m.forward_train(&x, 4, &Target::Class(1), 1, &mut rng).is_err());
        let (route2, _) = m.forward_train(&x, 3, &Target::Class(1), 1, &mut rng).unwrap();
        assert_eq!(route2.keep.len(), 2);
        assert!(route2.keep.cls_present);
    }

    #[test]
    fn stop_gradient_isolates_backbone_inputs() {
        for (stop, expect_zero) in [(true, true), (false, false)] {
            let mut rng = ChaCha8Rng::seed_from_u64(16);
            let tape: Tape<f64> = Tape::new();
            let upstream = Linear::new(&tape, &mut rng, 3, 3, true).unwrap();
            let variants = CroprVariants { stop_grad: stop, ..Default::default() };
            let m = module(&tape, 16, 3, TaskKind::Classification { classes: 2 }, variants);

            let raw = tape.input(4, 3, (0..12).map(|i| (i as f64 * 0.31).sin()).collect()).unwrap();
            let tokens = upstream.forward(&raw).unwrap();
            let x = TokenBatch::new(tokens, (0..4).collect(), false).unwrap();
            let (_, aux) = m.forward_train(&x, 2, &Target::Class(0), 1, &mut rng).unwrap();
            tape.backward(&aux).unwrap();
            let g = upstream.weight.grad();
            let all_zero = g.iter().all(|&v| v == 0.0);
            assert_eq!(all_zero, expect_zero, "stop_grad={stop} grads {g:?}");
        }
    }

    #[test]
    fn fold_examples_and_mha_rejection() {
        let tape: Tape<f64> = Tape::new();
        let m = module(&tape, 17, 2, TaskKind::Classification { classes: 2 }, Default::default());
        m.queries.set_value(&[0.25, -0.5]).unwrap();
        assert_eq!(m.fold().unwrap().qbar, vec![0.25, -0.5], "N=1 fold is the query itself");

        let tape2: Tape<f64> = Tape::new();
        let m2 = module(&tape2, 17, 2, TaskKind::Dense { grid: 2, classes: 2 }, Default::default());
        m2.queries.set_value(&[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(m2.fold().unwrap().qbar, vec![4.0, 6.0]);

        let tape3: Tape<f64> = Tape::new();
        let mha = module(
            &tape3,
            17,
            4,
            TaskKind::Classification { classes: 2 },
            CroprVariants { scorer: ScorerKind::Mha, ..Default::default() },
        );
        assert!(matches!(mha.fold(), Err(CroprError::UnsupportedVariant(_))));
    }

    #[test]
    fn folded_scores_equal_query_summed_scores() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..50 {
            let n = rng.random_range(1..6);
            let m_tokens = rng.random_range(1..12);
            let d = rng.random_range(1..9);
            let tape: Tape<f64> = Tape::new();
            let q: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..m_tokens * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let queries = tape.param(n, d, q).unwrap();
            let tokens = tape.input(m_tokens, d, x.clone()).unwrap();

            // Training path: sum over the query axis of Q X^T.
            let a = queries.matmul(&tokens.transpose().unwrap()).unwrap();
            let train_scores = a.sum_over_rows().unwrap().value();

            // Folded path.
            let qv = queries.value();
            let mut qbar = vec![0.0; d];
            for row in 0..n {
                for c in 0..d {
                    qbar[c] += qv[row * d + c];
                }
            }
            let folded = FoldedRouter { qbar };
            let (scores, mults) = folded.score_counted(&x, m_tokens, false).unwrap();
            assert_eq!(mults, m_tokens * d, "one dot product per token");
            for (s, t) in scores.iter().zip(&train_scores) {
                let tol = 1e-6 * s.abs().max(t.abs()).max(1.0);
                assert!((s - t).abs() <= tol, "folded {s} vs training {t}");
            }
            // The uninstrumented hot path is bitwise identical.
            assert_eq!(folded.score(&x, m_tokens, false).unwrap(), scores);
        }
    }

    #[test]
    fn downsample_majority_vote() {
        // Constant labels stay constant.
        assert_eq!(downsample_labels(&[4; 16], 4, 2).unwrap(), vec![4; 4]);

        // 2x2 cell {3,3,3,7} votes 3.
        let grid = [3, 3, 3, 7];
        assert_eq!(downsample_labels(&grid, 2, 2).unwrap(), vec![3]);

        // Ignore pixels don't vote; all-ignore stays ignore; ties pick the
        // smaller class.
        let i = IGNORE_LABEL;
        let grid = [
            i, i, 5, 2, //
            i, i, 2, 5, //
            1, 1, 9, 9, //
            1, 7, 9, 9,
        ];
        let down = downsample_labels(&grid, 4, 2).unwrap();
        assert_eq!(down, vec![i, 2, 1, 9]);

        assert!(downsample_labels(&grid, 4, 3).is_err());
        assert!(downsample_labels(&grid[..15], 4, 2).is_err());
    }

    #[test]
    fn downsample_matches_histogram_oracle() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..30 {
            let side = 8;
            let patch = 2;
            let labels: Vec<usize> = (0..side * side)
                .map(|_| {
                    if rng.random_range(0..5) == 0 {
                        IGNORE_LABEL
                    } else {
                        rng.random_range(0..4)
                    }
                })
                .collect();
            let got = downsample_labels(&labels, side, patch).unwrap();
            for py in 0..side / patch {
                for px in 0..side / patch {
                    let mut hist = std::collections::HashMap::new();
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let l = labels[(py * patch + dy) * side + (px * patch + dx)];
                            if l != IGNORE_LABEL {
                                *hist.entry(l).or_insert(0usize) += 1;
                            }
                        }
                    }
                    let want = hist
                        .iter()
                        .map(|(&c, &n)| (n, std::cmp::Reverse(c)))
                        .max()
                        .map(|(_, std::cmp::Reverse(c))| c)
                        .unwrap_or(IGNORE_LABEL);
                    assert_eq!(got[py * (side / patch) + px], want);
                }
            }
        }
    }

    #[test]
    fn composite_module_gradients_match_finite_differences() {
        let tape: Tape<f64> = Tape::new();
        let m = module(&tape, 20, 4, TaskKind::Classification { classes: 3 }, Default::default());
        let mut named = NamedParams::new();
        m.collect("cropr", &mut named);
        for (_, t) in &named {
            let jit: Vec<f64> =
                t.value().iter().enumerate().map(|(i, v)| v + 0.02 * ((i % 5) as f64)).collect();
            t.set_value(&jit).unwrap();
        }
        let params: Vec<_> = named.iter().map(|(_, t)| t.clone()).collect();
        gradcheck_params(&tape, &params, |t| {
            let tokens =
                t.input(5, 4, (0..20).map(|i| (i as f64 * 0.29).sin()).collect()).unwrap();
            let x = TokenBatch::new(tokens, (0..5).collect(), false).unwrap();
            let scored = m.score(&x).unwrap();
            let z = m.aggregate(&scored).unwrap();
            m.aux_loss(&z, &Target::Class(1)).unwrap()
        });
    }

    #[test]
    fn mha_scorer_gradients_match_finite_differences() {
        let tape: Tape<f64> = Tape::new();
        let variants = CroprVariants { scorer: ScorerKind::Mha, ..Default::default() };
        let m = module(&tape, 21, 4, TaskKind::Classification { classes: 2 }, variants);
        let mut named = NamedParams::new();
        m.collect("cropr", &mut named);
        for (_, t) in &named {
            let jit: Vec<f64> =
                t.value().iter().enumerate().map(|(i, v)| v + 0.02 * ((i % 3) as f64)).collect();
            t.set_value(&jit).unwrap();
        }
        let params: Vec<_> = named.iter().map(|(_, t)| t.clone()).collect();
        gradcheck_params(&tape, &params, |t| {
            let tokens =
                t.input(4, 4, (0..16).map(|i| (i as f64 * 0.41).cos()).collect()).unwrap();
            let x = TokenBatch::new(tokens, (0..4).collect(), false).unwrap();
            let scored = m.score(&x).unwrap();
            let z = m.aggregate(&scored).unwrap();
            m.aux_loss(&z, &Target::Class(0)).unwrap()
        });
    }
}
