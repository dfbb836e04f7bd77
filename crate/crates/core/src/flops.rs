//! Analytic FLOP model for (pruned) ViTs.
//!
//! Convention: one multiply-add counts as 2 FLOPs, applied uniformly to
//! every term and stated in all emitted headers. Elementwise work (adds,
//! norms, activations) is ignored — it is O(M·D) against the O(M·D²) and
//! O(M²·D) matmul terms and identical across the schedules being compared,
//! so it cannot move a ratio.

use serde::Serialize;

use crate::error::{CroprError, Result};
use crate::schedule::PruningSchedule;
use crate::vit::ViTConfig;

/// Geometry the cost model needs; decoupled from [`ViTConfig`] so paper-
/// scale models can be analyzed without instantiating their weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopsConfig {
    pub depth: usize,
    pub width: usize,
    pub mlp_ratio: usize,
    /// Flattened patch length C * p * p feeding the embed projection.
    pub patch_dim: usize,
    pub classes: usize,
    /// Dense heads run per patch; pooled heads run once.
    pub dense_head: bool,
}

impl FlopsConfig {
    pub fn from_vit(config: &ViTConfig) -> Self {
        FlopsConfig {
            depth: config.depth,
            width: config.width,
            mlp_ratio: config.mlp_ratio,
            patch_dim: config.patch_dim(),
            classes: config.num_classes,
            dense_head: false,
        }
    }

    /// The paper-scale semantic-segmentation encoder: ViT-L at 512x512
    /// with 16px patches (1024 patches + CLS) and a per-patch linear head.
    pub fn vit_l_segmentation() -> Self {
        FlopsConfig {
            depth: 24,
            width: 1024,
            mlp_ratio: 4,
            patch_dim: 3 * 16 * 16,
            classes: 150,
            dense_head: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockCost {
    /// 1-based block index.
    pub block: usize,
    /// Tokens this block processes (CLS included).
    pub tokens: u64,
    /// Pairwise terms: Q Kᵀ and A V.
    pub attention: u64,
    /// Q/K/V/output projections.
    pub projections: u64,
    pub mlp: u64,
}

impl BlockCost {
    pub fn total(&self) -> u64 {
        self.attention + self.projections + self.mlp
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostBreakdown {
    pub patch_embed: u64,
    pub blocks: Vec<BlockCost>,
    /// Folded-router dot products, one per module input token.
    pub router: u64,
    pub head: u64,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.patch_embed
            + self.blocks.iter().map(BlockCost::total).sum::<u64>()
            + self.router
            + self.head
    }
}

fn block_cost(block: usize, tokens: u64, d: u64, mlp_ratio: u64) -> BlockCost {
    BlockCost {
        block,
        tokens,
        // Two M x M x D products at 2 FLOPs per multiply-add each.
        attention: 2 * tokens * tokens * d + 2 * tokens * tokens * d,
        // Four M x D x D projections.
        projections: 4 * 2 * tokens * d * d,
        // Two M x D x (ratio * D) layers.
        mlp: 2 * 2 * mlp_ratio * tokens * d * d,
    }
}

/// Full forward-pass cost for `config` under `schedule`. The schedule's
/// token trajectory fixes each block's sequence length; with fusion
/// enabled the final block runs at the full initial length again.
pub fn flops(config: &FlopsConfig, schedule: &PruningSchedule) -> Result<CostBreakdown> {
    if !schedule.entries.is_empty() {
        schedule.validate()?;
        if schedule.depth != config.depth {
            return Err(CroprError::config(format!(
                "schedule depth {} differs from model depth {}",
                schedule.depth, config.depth
            )));
        }
    }
    let d = config.width as u64;
    let m0_tokens = schedule.initial_tokens() as u64;
    let patch_embed = 2 * schedule.m0 as u64 * config.patch_dim as u64 * d;

    let mut blocks = Vec::with_capacity(config.depth);
    let mut router = 0u64;
    let mut tokens = m0_tokens;
    for block in 1..=config.depth {
        let here = if schedule.llf && block == config.depth { m0_tokens } else { tokens };
        blocks.push(block_cost(block, here, d, config.mlp_ratio as u64));
        if let Some(r) = schedule.prune_at_block(block) {
            // One folded dot product per input token of this module.
            router += 2 * here * d;
            tokens -= r as u64;
        }
    }

    let head_rows = if config.dense_head {
        // Per-patch predictions over the full grid (reactivated by fusion
        // or stitched by position), CLS excluded.
        schedule.m0 as u64
    } else {
        1
    };
    let head = 2 * head_rows * d * config.classes as u64;
    Ok(CostBreakdown { patch_embed, blocks, router, head })
}

/// Convenience: cost of the same model with pruning disabled.
pub fn flops_unpruned(config: &FlopsConfig, m0: usize, cls: bool) -> Result<CostBreakdown> {
    flops(config, &PruningSchedule::empty(config.depth, m0, cls))
}
