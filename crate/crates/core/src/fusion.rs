//! Reactivation of pruned tokens at the end of the backbone.
//!
//! Last Layer Fusion re-inserts every pruned token (with the value it had
//! when it was pruned) alongside the kept tokens, restoring the full
//! original sequence in raster order just before the final transformer
//! block. The other fusers here are the comparison arms: plain
//! concatenation, learned-query cross-attention over the kept tokens,
//! cross-attention / self-attention blocks over the re-concatenated
//! sequence, and logit-level stitching.

use rand::Rng;

use crate::error::{CroprError, Result};
use crate::nn::{LayerNorm, Mlp, NamedParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{TokenBatch, CLS_POSITION};

/// Where each row of a fused sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Kept,
    /// Index into the pruned-stage list (stage order = pruning order).
    PrunedAt(usize),
}

/// Stitch kept and pruned tokens back into one sequence ordered CLS-first
/// then by ascending patch position. Pruned values pass through untouched:
/// whatever was captured at prune time is what re-enters here.
///
/// The combined positions must cover `{0..M0-1}` exactly once (plus the
/// CLS sentinel exactly once when the kept batch carries it); anything
/// else is a fusion error.
pub fn fuse_by_position<T: Scalar>(
    kept: &TokenBatch<T>,
    pruned_stages: &[TokenBatch<T>],
) -> Result<(TokenBatch<T>, Vec<Provenance>)> {
    let mut tokens = kept.tokens.clone();
    // (sort key, row in the concatenated tensor, provenance, position)
    let mut rows: Vec<(usize, usize, Provenance, usize)> = Vec::new();
    for (i, &p) in kept.positions.iter().enumerate() {
        let key = if p == CLS_POSITION { 0 } else { p + 1 };
        rows.push((key, i, Provenance::Kept, p));
    }
    let mut offset = kept.len();
    for (stage, batch) in pruned_stages.iter().enumerate() {
        tokens = tokens.concat_rows(&batch.tokens)?;
        for (i, &p) in batch.positions.iter().enumerate() {
            if p == CLS_POSITION {
                return Err(CroprError::fusion("a pruned stage contains the CLS token"));
            }
            rows.push((p + 1, offset + i, Provenance::PrunedAt(stage), p));
        }
        offset += batch.len();
    }

    rows.sort_by_key(|r| r.0);
    let patch_count = rows.len() - usize::from(kept.cls_present);
    // Sorted keys must be exactly [0,] 1, 2, .. patch_count, where key 0 is
    // the CLS sentinel and patch position p maps to key p+1.
    let start = if kept.cls_present { 0 } else { 1 };
    for (i, &(key, _, _, pos)) in rows.iter().enumerate() {
        let want = start + i;
        if key < want {
            return Err(CroprError::fusion(format!("position {pos} appears twice")));
        }
        if key > want {
            return Err(CroprError::fusion(format!(
                "positions are not exactly 0..{patch_count}: missing {}",
                want - 1
            )));
        }
    }

    let perm: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let provenance: Vec<Provenance> = rows.iter().map(|r| r.2).collect();
    let positions: Vec<usize> = rows.iter().map(|r| r.3).collect();
    let fused = TokenBatch::new(tokens.gather_rows(&perm)?, positions, kept.cls_present)?;
    Ok((fused, provenance))
}

/// Last Layer Fusion assembly: the caller runs the final block over the
/// result with DropPath forced off. Adds no parameters of its own.
pub fn llf_fuse<T: Scalar>(
    kept: &TokenBatch<T>,
    pruned_stages: &[TokenBatch<T>],
) -> Result<(TokenBatch<T>, Vec<Provenance>)> {
    fuse_by_position(kept, pruned_stages)
}

/// Concatenation-only baseline: same position contract as LLF, but the
/// fused sequence goes straight to the head with no further block.
pub fn token_concat_fuse<T: Scalar>(
    kept: &TokenBatch<T>,
    pruned_stages: &[TokenBatch<T>],
) -> Result<(TokenBatch<T>, Vec<Provenance>)> {
    fuse_by_position(kept, pruned_stages)
}

/// Learned-query cross-attention fuser: a grid of queries attends into a
/// token set and emits one output token per query, aggregator-style
/// (softmax(Q Xᵀ/√D) X followed by an MLP/LN residual).
pub struct CrossAttnFuser<T: Scalar> {
    pub queries: Tensor<T>,
    pub ln: LayerNorm<T>,
    pub mlp: Mlp<T>,
    dim: usize,
}

impl<T: Scalar> CrossAttnFuser<T> {
    pub fn new(
        tape: &crate::tensor::Tape<T>,
        rng: &mut impl Rng,
        dim: usize,
        grid: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let n = grid * grid;
        if n == 0 {
            return Err(CroprError::config("fuser grid must be positive"));
        }
        Ok(CrossAttnFuser {
            queries: tape.param(n, dim, crate::nn::trunc_normal(rng, n * dim, 0.02))?,
            ln: LayerNorm::new(tape, dim)?,
            mlp: Mlp::new(tape, rng, dim, dim * mlp_ratio)?,
            dim,
        })
    }

    /// `grid*grid` output rows no matter how many tokens come in.
    pub fn forward(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let temp = T::from_f64(1.0 / (self.dim as f64).sqrt());
        let x_prime = self
            .queries
            .matmul(&tokens.transpose()?)?
            .scale(temp)?
            .softmax_rows()?
            .matmul(tokens)?;
        self.mlp.forward(&self.ln.forward(&x_prime)?)?.add(&x_prime)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.queries"), self.queries.clone()));
        self.ln.collect(&format!("{prefix}.ln"), out);
        self.mlp.collect(&format!("{prefix}.mlp"), out);
    }
}

/// Cross-attention over the kept tokens only; pruned tokens are discarded.
pub fn cross_attn_fuse<T: Scalar>(
    kept: &TokenBatch<T>,
    fuser: &CrossAttnFuser<T>,
) -> Result<Tensor<T>> {
    fuser.forward(&kept.tokens)
}

/// Concatenate everything back, then cross-attend a query grid into the
/// full sequence.
pub fn cross_attn_concat_fuse<T: Scalar>(
    kept: &TokenBatch<T>,
    pruned_stages: &[TokenBatch<T>],
    fuser: &CrossAttnFuser<T>,
) -> Result<Tensor<T>> {
    let (fused, _) = fuse_by_position(kept, pruned_stages)?;
    fuser.forward(&fused.tokens)
}

/// Concatenate everything back, then run a freshly initialized
/// self-attention transformer block over the full sequence.
pub fn mhsa_concat_fuse<T: Scalar>(
    kept: &TokenBatch<T>,
    pruned_stages: &[TokenBatch<T>],
    block: &crate::vit::Block<T>,
) -> Result<TokenBatch<T>> {
    let (fused, _) = fuse_by_position(kept, pruned_stages)?;
    let (out, _) = block.forward(&fused.tokens, crate::vit::DropPath::keep())?;
    TokenBatch::new(out, fused.positions, fused.cls_present)
}

/// Logit-level stitching: pruned positions contribute the auxiliary-head
/// logits from their pruning stage, kept positions the final-head logits.
/// No feature-level fusion happens. Positions must cover `{0..M0-1}`
/// exactly (patch positions only — callers drop CLS rows first).
pub fn dtop_logit_fuse<T: Scalar>(
    kept_logits: &Tensor<T>,
    kept_positions: &[usize],
    pruned: &[(Tensor<T>, Vec<usize>)],
) -> Result<Tensor<T>> {
    if kept_logits.rows() != kept_positions.len() {
        return Err(CroprError::fusion(format!(
            "{} kept logit rows but {} positions",
            kept_logits.rows(),
            kept_positions.len()
        )));
    }
    let mut all = kept_logits.clone();
    let mut rows: Vec<(usize, usize)> =
        kept_positions.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    for (stage_logits, stage_positions) in pruned {
        if stage_logits.rows() != stage_positions.len() {
            return Err(CroprError::fusion(format!(
                "{} pruned logit rows but {} positions",
                stage_logits.rows(),
                stage_positions.len()
            )));
        }
        let offset = all.rows();
        all = all.concat_rows(stage_logits)?;
        for (i, &p) in stage_positions.iter().enumerate() {
            rows.push((p, offset + i));
        }
    }
    for (i, &(p, _)) in rows.iter().enumerate() {
        let _ = i;
        if p == CLS_POSITION {
            return Err(CroprError::fusion("logit fusion is patch-level; drop the CLS row"));
        }
    }
    rows.sort_by_key(|r| r.0);
    for (want, &(p, _)) in rows.iter().enumerate() {
        if p != want {
            return Err(CroprError::fusion(if p < want {
                format!("position {p} appears twice")
            } else {
                format!("positions are not exactly 0..{}: missing {want}", rows.len())
            }));
        }
    }
    all.gather_rows(&rows.iter().map(|r| r.1).collect::<Vec<_>>())
}
