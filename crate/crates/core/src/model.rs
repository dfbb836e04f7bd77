//! The assembled pipeline: backbone blocks interleaved with pruning
//! modules per the schedule, a fusion stage, and the task head — plus the
//! training/eval/folded forward passes and checkpoint plumbing.
//!
//! One model instance owns all parameters on one tape. A forward pass is
//! per image: callers `restart()` the tape between images (the training
//! loop in [`crate::train`] does this).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cropr::{
    select_sampling, select_top_k, CroprModule, CroprVariants, FoldedRouter, RouteResult,
    SelectorKind, Target, TaskKind,
};
use crate::error::{CroprError, Result};
use crate::fusion::{
    cross_attn_concat_fuse, cross_attn_fuse, dtop_logit_fuse, llf_fuse, token_concat_fuse,
    CrossAttnFuser,
};
use crate::nn::{load_params, param_elems, NamedParams};
use crate::scalar::Scalar;
use crate::schedule::PruningSchedule;
use crate::selectors::{invert_scores, random_score, scores_for_positions, variance_score};
use crate::synth::{MultiSample, NeedleSample, SegSample};
use crate::tensor::{Tape, Tensor, IGNORE_LABEL};
use crate::vit::{
    attention_scores, AttnReadout, Block, DropPath, Image, TokenBatch, ViT, ViTConfig,
};

/// Which scoring policy drives the router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SelectorChoice {
    /// Learned scorer; `invert` keeps the *lowest*-scoring tokens (the
    /// non-salient control).
    Cropr { invert: bool },
    Random,
    /// Per-patch pixel variance of the raw image, fixed across stages.
    Variance,
    /// Self-attention readout of the block right before each pruning point.
    AttnTopK { readout: AttnReadout },
}

impl SelectorChoice {
    pub fn is_learned(&self) -> bool {
        matches!(self, SelectorChoice::Cropr { .. })
    }
}

/// How (and whether) pruned tokens are reactivated at the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// No reactivation; the head sees only surviving tokens.
    None,
    /// Re-insert pruned tokens before the final block (no extra params).
    Llf,
    /// Re-insert after the final block; no further processing.
    TokenConcat,
    /// Learned grid queries cross-attend into the kept tokens only.
    CrossAttn,
    /// Grid queries cross-attend into the re-concatenated full sequence.
    CrossAttnConcat,
    /// A fresh self-attention block over the re-concatenated sequence.
    MhsaConcat,
    /// Stitch per-stage auxiliary logits with final-head logits by position.
    DtopLogit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub task: TaskKind,
    pub selector: SelectorChoice,
    pub fusion: FusionKind,
    pub variants: CroprVariants,
}

impl ModelConfig {
    /// Toy classification setup: learned scorer, plain routing, no fusion.
    pub fn toy_classification() -> Self {
        let vit = ViTConfig::toy();
        ModelConfig {
            task: TaskKind::Classification { classes: vit.num_classes },
            vit,
            selector: SelectorChoice::Cropr { invert: false },
            fusion: FusionKind::None,
            variants: CroprVariants::default(),
        }
    }

    /// Toy dense setup with Last Layer Fusion.
    pub fn toy_segmentation(classes: usize) -> Self {
        let mut vit = ViTConfig::toy();
        vit.num_classes = classes;
        ModelConfig {
            task: TaskKind::Dense { grid: vit.patches_per_side(), classes },
            vit,
            selector: SelectorChoice::Cropr { invert: false },
            fusion: FusionKind::Llf,
            variants: CroprVariants::default(),
        }
    }
}

/// What happened at one pruning point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageTrace {
    pub block: usize,
    pub pruned_positions: Vec<usize>,
}

/// The full routing story of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RouteTrace {
    pub stages: Vec<StageTrace>,
    /// Patch positions (CLS excluded) that survived every stage.
    pub final_keep: Vec<usize>,
}

impl RouteTrace {
    /// Per-patch prune block: `None` for survivors. Heatmaps render this.
    pub fn prune_stage_map(&self, m0: usize) -> Result<Vec<Option<usize>>> {
        let mut map = vec![None; m0];
        for stage in &self.stages {
            for &p in &stage.pruned_positions {
                if p >= m0 {
                    return Err(CroprError::index(format!("position {p} beyond {m0} patches")));
                }
                if map[p].is_some() {
                    return Err(CroprError::contract(format!("position {p} pruned twice")));
                }
                map[p] = Some(stage.block);
            }
        }
        for &p in &self.final_keep {
            if p < m0 && map[p].is_some() {
                return Err(CroprError::contract(format!("position {p} both kept and pruned")));
            }
        }
        Ok(map)
    }
}

/// One labeled image in model-ready form.
pub struct Example<T: Scalar> {
    pub image: Image<T>,
    pub target: Target<T>,
    /// Informative-patch mask when the generator knows it.
    pub mask: Option<Vec<bool>>,
}

impl<T: Scalar> Example<T> {
    pub fn from_needle(s: NeedleSample<T>) -> Self {
        Example { image: s.image, target: Target::Class(s.label), mask: Some(s.mask) }
    }

    /// Dense targets live at patch resolution: majority-vote downsampling
    /// of the pixel labels.
    pub fn from_seg(s: SegSample<T>, patch: usize) -> Result<Self> {
        let labels = crate::cropr::downsample_labels(&s.labels, s.image.side, patch)?;
        Ok(Example { image: s.image, target: Target::Dense(labels), mask: None })
    }

    pub fn from_multi(s: MultiSample<T>) -> Self {
        Example { image: s.image, target: Target::Multi(s.targets), mask: Some(s.mask) }
    }
}

/// Everything a forward pass produces.
pub struct ForwardOutput<T: Scalar> {
    /// Task logits: 1 x C pooled, or M0 x C dense in raster order.
    pub logits: Tensor<T>,
    pub main_loss: Tensor<T>,
    /// One per pruning module (learned selector only).
    pub aux_losses: Vec<Tensor<T>>,
    /// main + sum of aux at weight 1.0 each.
    pub total_loss: Tensor<T>,
    pub trace: RouteTrace,
    /// The sequence feeding the head: values with their positions
    /// (pre-head token export reads this).
    pub pre_head: (Vec<T>, Vec<usize>),
    /// Pruned-token values captured at prune time: (block, positions,
    /// row-major values). Lets exports cover tokens the head never saw.
    pub stage_values: Vec<(usize, Vec<usize>, Vec<T>)>,
}

/// One row of a pre-head token export.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRow<T> {
    pub position: usize,
    /// Block after which routing dropped the token; `None` for survivors
    /// (including tokens a fusion stage re-inserted before the head).
    pub pruned_at: Option<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    /// All `m0` patch tokens in raster order with their prune-stage tags.
    /// Tokens in the head input carry pre-head values; tokens routing
    /// dropped (and fusion never re-inserted) carry prune-time values.
    pub fn token_rows(&self, m0: usize) -> Result<Vec<TokenRow<T>>> {
        let stage_map = self.trace.prune_stage_map(m0)?;
        let (values, positions) = &self.pre_head;
        if positions.is_empty() || values.len() % positions.len() != 0 {
            return Err(CroprError::contract("malformed pre-head sequence"));
        }
        let dim = values.len() / positions.len();
        let mut rows: Vec<Option<Vec<T>>> = vec![None; m0];
        for (row, &p) in positions.iter().enumerate() {
            if p < m0 {
                rows[p] = Some(values[row * dim..(row + 1) * dim].to_vec());
            }
        }
        for (_, stage_positions, stage_vals) in &self.stage_values {
            for (row, &p) in stage_positions.iter().enumerate() {
                if p >= m0 {
                    return Err(CroprError::index(format!("pruned position {p} beyond {m0}")));
                }
                if rows[p].is_none() {
                    rows[p] = Some(stage_vals[row * dim..(row + 1) * dim].to_vec());
                }
            }
        }
        rows.into_iter()
            .enumerate()
            .map(|(p, vals)| {
                let values = vals.ok_or_else(|| {
                    CroprError::contract(format!("patch {p} missing from the export"))
                })?;
                Ok(TokenRow { position: p, pruned_at: stage_map[p], values })
            })
            .collect()
    }
}

enum Routing<'a, T: Scalar> {
    /// Module scorers (or training-free baselines), optionally stochastic.
    Live { train: bool },
    /// Precomputed folded routers, one per module.
    Folded(&'a [FoldedRouter<T>]),
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub schedule: PruningSchedule,
    pub vit: ViT<T>,
    /// One per schedule entry when the selector is learned; empty otherwise.
    pub modules: Vec<CroprModule<T>>,
    pub cross_fuser: Option<CrossAttnFuser<T>>,
    pub mhsa_fuser: Option<Block<T>>,
    tape: Tape<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(
        tape: &Tape<T>,
        rng: &mut impl Rng,
        config: ModelConfig,
        schedule: PruningSchedule,
    ) -> Result<Self> {
        config.vit.validate()?;
        if !schedule.entries.is_empty() {
            schedule.validate()?;
        }
        if schedule.depth != config.vit.depth {
            return Err(CroprError::config(format!(
                "schedule depth {} vs model depth {}",
                schedule.depth, config.vit.depth
            )));
        }
        if schedule.m0 != config.vit.num_patches() {
            return Err(CroprError::config(format!(
                "schedule covers {} patches but the model produces {}",
                schedule.m0,
                config.vit.num_patches()
            )));
        }
        if schedule.cls != config.vit.cls_token {
            return Err(CroprError::config("schedule and model disagree about the CLS token"));
        }
        let wants_llf = matches!(config.fusion, FusionKind::Llf);
        if wants_llf != schedule.llf {
            return Err(CroprError::config(
                "fusion kind and schedule fusion flag must agree (llf <-> llf)",
            ));
        }
        match config.task {
            TaskKind::Classification { classes } | TaskKind::Multilabel { classes } => {
                if classes != config.vit.num_classes {
                    return Err(CroprError::config("task classes differ from head width"));
                }
                if matches!(
                    config.fusion,
                    FusionKind::CrossAttn
                        | FusionKind::CrossAttnConcat
                        | FusionKind::MhsaConcat
                        | FusionKind::DtopLogit
                ) {
                    return Err(CroprError::config(
                        "grid fusers and logit fusion are dense-task mechanisms",
                    ));
                }
            }
            TaskKind::Dense { grid, classes } => {
                if classes != config.vit.num_classes {
                    return Err(CroprError::config("task classes differ from head width"));
                }
                if grid != config.vit.patches_per_side() {
                    return Err(CroprError::config(format!(
                        "dense grid {grid} must match {} patches per side",
                        config.vit.patches_per_side()
                    )));
                }
                if matches!(config.fusion, FusionKind::None) && !schedule.entries.is_empty() {
                    return Err(CroprError::config(
                        "dense prediction needs every position: pick a fusion mechanism",
                    ));
                }
            }
        }
        if matches!(config.selector, SelectorChoice::AttnTopK { readout: AttnReadout::Cls })
            && !config.vit.cls_token
        {
            return Err(CroprError::config("CLS attention readout needs a CLS token"));
        }

        let vit = ViT::new(tape, rng, config.vit.clone())?;
        let modules = if config.selector.is_learned() {
            schedule
                .entries
                .iter()
                .map(|_| {
                    CroprModule::new(
                        tape,
                        rng,
                        config.vit.width,
                        config.vit.mlp_ratio,
                        config.vit.heads,
                        config.task,
                        config.variants,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let cross_fuser = match config.fusion {
            FusionKind::CrossAttn | FusionKind::CrossAttnConcat => Some(CrossAttnFuser::new(
                tape,
                rng,
                config.vit.width,
                config.vit.patches_per_side(),
                config.vit.mlp_ratio,
            )?),
            _ => None,
        };
        let mhsa_fuser = match config.fusion {
            FusionKind::MhsaConcat => {
                Some(Block::new(tape, rng, config.vit.width, config.vit.heads, config.vit.mlp_ratio)?)
            }
            _ => None,
        };
        Ok(Model { config, schedule, vit, modules, cross_fuser, mhsa_fuser, tape: tape.clone() })
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    /// Training-mode pass: DropPath sampled, stochastic selector honored,
    /// auxiliary losses computed.
    pub fn forward_train(
        &self,
        example: &Example<T>,
        schedule: &PruningSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput<T>> {
        self.forward(example, schedule, Routing::Live { train: true }, Some(rng))
    }

    /// Deterministic evaluation pass: DropPath off, Top-K routing.
    pub fn forward_eval(
        &self,
        example: &Example<T>,
        schedule: &PruningSchedule,
    ) -> Result<ForwardOutput<T>> {
        self.forward(example, schedule, Routing::Live { train: false }, None)
    }

    /// Evaluation pass with an RNG available: still DropPath-off and Top-K,
    /// but the random baseline can draw its scores.
    pub fn forward_eval_rng(
        &self,
        example: &Example<T>,
        schedule: &PruningSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput<T>> {
        self.forward(example, schedule, Routing::Live { train: false }, Some(rng))
    }

    /// Inference with folded routers: scores are single dot products and
    /// the aggregator/auxiliary machinery is never touched.
    pub fn forward_folded(
        &self,
        example: &Example<T>,
        schedule: &PruningSchedule,
        routers: &[FoldedRouter<T>],
    ) -> Result<ForwardOutput<T>> {
        if routers.len() != schedule.entries.len() {
            return Err(CroprError::contract(format!(
                "{} folded routers for {} pruning points",
                routers.len(),
                schedule.entries.len()
            )));
        }
        self.forward(example, schedule, Routing::Folded(routers), None)
    }

    fn forward(
        &self,
        example: &Example<T>,
        schedule: &PruningSchedule,
        routing: Routing<'_, T>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput<T>> {
        if schedule.depth != self.config.vit.depth || schedule.m0 != self.config.vit.num_patches()
        {
            return Err(CroprError::config("forward schedule does not fit this model"));
        }
        if self.config.selector.is_learned() && schedule.entries.len() > self.modules.len() {
            return Err(CroprError::config(format!(
                "schedule has {} pruning points but the model built {} modules",
                schedule.entries.len(),
                self.modules.len()
            )));
        }
        let train = matches!(routing, Routing::Live { train: true });
        let depth = self.config.vit.depth;
        let rates = self.config.vit.drop_path_rates();

        // Stage-independent baseline scores.
        let variance_table = if matches!(self.config.selector, SelectorChoice::Variance) {
            Some(variance_score::<T>(&example.image, self.config.vit.patch_size)?)
        } else {
            None
        };

        let mut x = self.vit.embed_image(&example.image)?;
        let mut pruned_stages: Vec<TokenBatch<T>> = Vec::new();
        let mut stage_traces: Vec<StageTrace> = Vec::new();
        let mut aux_losses: Vec<Tensor<T>> = Vec::new();
        // Per-stage pruned-token logits for logit-level fusion.
        let mut stage_logits: Vec<(Tensor<T>, Vec<usize>)> = Vec::new();
        let mut stage_values: Vec<(usize, Vec<usize>, Vec<T>)> = Vec::new();
        let mut module_idx = 0usize;

        // Routing survivors, captured before any late re-insertion.
        let mut survivors: Option<Vec<usize>> = None;

        for block_no in 1..=depth {
            let is_final = block_no == depth;
            if schedule.llf && is_final {
                survivors =
                    Some(x.patch_rows().iter().map(|&r| x.positions[r]).collect());
                let (fused, _) = llf_fuse(&x, &pruned_stages)?;
                x = fused;
                pruned_stages.clear();
            }
            // LLF pins the final block's DropPath off so its training-mode
            // forward stays deterministic.
            let dp = if train && !(schedule.llf && is_final) {
                match rng.as_deref_mut() {
                    Some(r) => DropPath::sample(rates[block_no - 1], r),
                    None => DropPath::keep(),
                }
            } else {
                DropPath::keep()
            };
            let (tokens, attn_avg) = self.vit.blocks[block_no - 1].forward(&x.tokens, dp)?;
            x = TokenBatch::new(tokens, x.positions.clone(), x.cls_present)?;

            if let Some(r) = schedule.prune_at_block(block_no) {
                let (route, aux) = self.route_stage(
                    &x,
                    r,
                    block_no,
                    module_idx,
                    &routing,
                    rng.as_deref_mut(),
                    example,
                    &attn_avg,
                    variance_table.as_deref(),
                )?;
                if let Some(aux) = aux {
                    aux_losses.push(aux);
                }
                if matches!(self.config.fusion, FusionKind::DtopLogit)
                    && matches!(routing, Routing::Live { .. })
                {
                    // Pruned tokens carry the aux head's verdict from their
                    // pruning stage.
                    let logits =
                        self.modules[module_idx].aux_head.forward(&route.pruned.tokens)?;
                    stage_logits.push((logits, route.pruned.positions.clone()));
                }
                stage_traces.push(StageTrace {
                    block: block_no,
                    pruned_positions: route.pruned.positions.clone(),
                });
                stage_values.push((
                    block_no,
                    route.pruned.positions.clone(),
                    route.pruned.tokens.value(),
                ));
                pruned_stages.push(route.pruned);
                x = route.keep;
                module_idx += 1;
            }
        }

        let trace = RouteTrace {
            stages: stage_traces,
            final_keep: survivors.unwrap_or_else(|| {
                x.patch_rows().iter().map(|&r| x.positions[r]).collect()
            }),
        };

        // Fusion + head + main loss.
        let (logits, head_batch) = self.head_logits(&x, &pruned_stages, &stage_logits, &routing)?;
        let main_loss = self.main_loss(&logits, &example.target)?;
        let mut total_loss = main_loss.clone();
        for aux in &aux_losses {
            total_loss = total_loss.add(aux)?;
        }
        Ok(ForwardOutput {
            logits,
            main_loss,
            aux_losses,
            total_loss,
            trace,
            pre_head: head_batch,
            stage_values,
        })
    }

    /// Score and split one stage. Returns the route and, for learned
    /// selectors in live mode, the auxiliary loss.
    #[allow(clippy::too_many_arguments)]
    fn route_stage(
        &self,
        x: &TokenBatch<T>,
        r: usize,
        block_no: usize,
        module_idx: usize,
        routing: &Routing<'_, T>,
        rng: Option<&mut ChaCha8Rng>,
        example: &Example<T>,
        attn_avg: &[T],
        variance_table: Option<&[T]>,
    ) -> Result<(RouteResult<T>, Option<Tensor<T>>)> {
        let m = x.len();
        let reserved = usize::from(x.cls_present);
        if r + reserved >= m {
            return Err(CroprError::schedule(format!(
                "cannot prune {r} of {m} tokens at block {block_no}"
            )));
        }
        let k = m - r;

        if let Routing::Folded(routers) = routing {
            let scores = routers[module_idx].score(&x.tokens.value(), m, x.cls_present)?;
            let route = select_top_k(x, &scores, k, block_no)?;
            return Ok((route, None));
        }
        let train = matches!(routing, Routing::Live { train: true });

        match self.config.selector {
            SelectorChoice::Cropr { invert } => {
                let module = &self.modules[module_idx];
                let scored = module.score(x)?;
                let mut scores = if invert {
                    // Negate *raw* relevance; the CLS override is re-applied
                    // afterwards so the class token still survives.
                    invert_scores(&scored.scores)
                } else {
                    scored.scores.clone()
                };
                if x.cls_present {
                    scores[0] = T::infinity();
                }
                let route = if train
                    && matches!(self.config.variants.selector, SelectorKind::Sampling)
                {
                    let rng = rng.ok_or_else(|| {
                        CroprError::contract("stochastic routing needs an RNG")
                    })?;
                    select_sampling(x, &scores, k, block_no, rng)?
                } else {
                    select_top_k(x, &scores, k, block_no)?
                };
                let z = module.aggregate(&scored)?;
                let mut aux = module.aux_loss(&z, &example.target)?;
                if matches!(self.config.fusion, FusionKind::DtopLogit) {
                    // Logit fusion evaluates the aux head per token, so give
                    // those per-token logits their own training signal.
                    aux = aux.add(&self.per_token_aux_loss(module_idx, x, example)?)?;
                }
                Ok((route, Some(aux)))
            }
            SelectorChoice::Random => {
                let rng = rng
                    .ok_or_else(|| CroprError::contract("the random selector needs an RNG"))?;
                let mut scores: Vec<T> = random_score(m, rng);
                if x.cls_present {
                    scores[0] = T::infinity();
                }
                Ok((select_top_k(x, &scores, k, block_no)?, None))
            }
            SelectorChoice::Variance => {
                let table = variance_table
                    .ok_or_else(|| CroprError::contract("variance table missing"))?;
                let scores = scores_for_positions(table, &x.positions)?;
                Ok((select_top_k(x, &scores, k, block_no)?, None))
            }
            SelectorChoice::AttnTopK { readout } => {
                let mut scores = attention_scores(attn_avg, m, readout, x.cls_present)?;
                if x.cls_present {
                    scores[0] = T::infinity();
                }
                Ok((select_top_k(x, &scores, k, block_no)?, None))
            }
        }
    }

    /// Dense CE on the stage's own tokens (stop-gradiented), used to train
    /// the per-token logits consumed by logit fusion.
    fn per_token_aux_loss(
        &self,
        module_idx: usize,
        x: &TokenBatch<T>,
        example: &Example<T>,
    ) -> Result<Tensor<T>> {
        let labels_grid = match &example.target {
            Target::Dense(labels) => labels,
            _ => {
                return Err(CroprError::config("logit fusion requires a dense task"));
            }
        };
        let rows = x.patch_rows();
        let detached = x.tokens.stop_gradient()?.gather_rows(&rows)?;
        let logits = self.modules[module_idx].aux_head.forward(&detached)?;
        let labels: Vec<usize> =
            rows.iter().map(|&row| labels_grid[x.positions[row]]).collect();
        if labels.iter().all(|&l| l == IGNORE_LABEL) {
            return self.tape.input(1, 1, vec![T::zero()]);
        }
        logits.cross_entropy_mean(&labels)
    }

    /// Apply fusion and the task head; returns logits plus the pre-head
    /// sequence (values and positions) for export.
    fn head_logits(
        &self,
        x: &TokenBatch<T>,
        pruned_stages: &[TokenBatch<T>],
        stage_logits: &[(Tensor<T>, Vec<usize>)],
        routing: &Routing<'_, T>,
    ) -> Result<(Tensor<T>, (Vec<T>, Vec<usize>))> {
        let dense = matches!(self.config.task, TaskKind::Dense { .. });
        match self.config.fusion {
            FusionKind::None | FusionKind::Llf => {
                // Under LLF the re-insertion already happened before the
                // final block, so by now `x` holds the full sequence.
                let export = (x.tokens.value(), x.positions.clone());
                let logits = if dense {
                    self.dense_logits(x)?
                } else {
                    self.vit.pool_and_head(x)?
                };
                Ok((logits, export))
            }
            FusionKind::TokenConcat => {
                let (fused, _) = token_concat_fuse(x, pruned_stages)?;
                let export = (fused.tokens.value(), fused.positions.clone());
                let logits = if dense {
                    self.dense_logits(&fused)?
                } else {
                    self.vit.pool_and_head(&fused)?
                };
                Ok((logits, export))
            }
            FusionKind::CrossAttn => {
                let fuser = self.cross_fuser.as_ref().expect("checked at construction");
                let grid = cross_attn_fuse(x, fuser)?;
                let positions: Vec<usize> = (0..grid.rows()).collect();
                let export = (grid.value(), positions);
                Ok((self.vit.head.forward(&grid)?, export))
            }
            FusionKind::CrossAttnConcat => {
                let fuser = self.cross_fuser.as_ref().expect("checked at construction");
                let grid = cross_attn_concat_fuse(x, pruned_stages, fuser)?;
                let positions: Vec<usize> = (0..grid.rows()).collect();
                let export = (grid.value(), positions);
                Ok((self.vit.head.forward(&grid)?, export))
            }
            FusionKind::MhsaConcat => {
                let block = self.mhsa_fuser.as_ref().expect("checked at construction");
                let fused = crate::fusion::mhsa_concat_fuse(x, pruned_stages, block)?;
                let export = (fused.tokens.value(), fused.positions.clone());
                let logits = if dense {
                    self.dense_logits(&fused)?
                } else {
                    self.vit.pool_and_head(&fused)?
                };
                Ok((logits, export))
            }
            FusionKind::DtopLogit => {
                if matches!(routing, Routing::Folded(_)) {
                    return Err(CroprError::UnsupportedVariant(
                        "logit fusion needs the auxiliary heads, which folding removes".into(),
                    ));
                }
                let rows = x.patch_rows();
                let kept_logits = self.vit.head.forward(&x.tokens.gather_rows(&rows)?)?;
                let kept_positions: Vec<usize> =
                    rows.iter().map(|&row| x.positions[row]).collect();
                let stages: Vec<(Tensor<T>, Vec<usize>)> = stage_logits.to_vec();
                let logits = dtop_logit_fuse(&kept_logits, &kept_positions, &stages)?;
                let export = (x.tokens.value(), x.positions.clone());
                Ok((logits, export))
            }
        }
    }

    /// Per-patch logits in raster order; requires the batch to carry every
    /// patch position (guaranteed after reactivating fusion).
    fn dense_logits(&self, batch: &TokenBatch<T>) -> Result<Tensor<T>> {
        let rows = batch.patch_rows();
        let m0 = self.config.vit.num_patches();
        if rows.len() != m0 {
            return Err(CroprError::contract(format!(
                "dense head needs all {m0} patches, got {}",
                rows.len()
            )));
        }
        for (want, &row) in rows.iter().enumerate() {
            if batch.positions[row] != want {
                return Err(CroprError::contract("dense head input is not in raster order"));
            }
        }
        self.vit.head.forward(&batch.tokens.gather_rows(&rows)?)
    }

    fn main_loss(&self, logits: &Tensor<T>, target: &Target<T>) -> Result<Tensor<T>> {
        match target {
            Target::Class(c) => logits.cross_entropy_mean(&[*c]),
            Target::Dense(labels) => {
                if labels.iter().all(|&l| l == IGNORE_LABEL) {
                    return self.tape.input(1, 1, vec![T::zero()]);
                }
                logits.cross_entropy_mean(labels)
            }
            Target::Multi(t) => logits.bce_with_logits_mean(t),
        }
    }

    /// Every learnable parameter with its checkpoint name.
    pub fn collect_params(&self) -> NamedParams<T> {
        let mut out = NamedParams::new();
        self.vit.collect_params(&mut out);
        for (i, m) in self.modules.iter().enumerate() {
            m.collect(&format!("cropr.{i}"), &mut out);
        }
        if let Some(f) = &self.cross_fuser {
            f.collect("fusion.cross", &mut out);
        }
        if let Some(b) = &self.mhsa_fuser {
            b.collect("fusion.mhsa", &mut out);
        }
        out
    }

    pub fn param_elems(&self) -> usize {
        param_elems(&self.collect_params())
    }

    /// Parameters the fusion mechanism adds on top of backbone + routing.
    pub fn fusion_param_elems(&self) -> usize {
        let mut out = NamedParams::new();
        if let Some(f) = &self.cross_fuser {
            f.collect("fusion.cross", &mut out);
        }
        if let Some(b) = &self.mhsa_fuser {
            b.collect("fusion.mhsa", &mut out);
        }
        param_elems(&out)
    }

    /// Training checkpoint: all parameters plus the config and schedule.
    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        let mut ckpt = crate::nn::params_to_checkpoint(&self.collect_params())?;
        ckpt.set_meta("kind", "train")?;
        ckpt.set_meta("model", &serde_json::to_string(&self.config).expect("config is plain data"))?;
        ckpt.set_meta("schedule", &serde_json::to_string(&self.schedule).expect("schedule is plain data"))?;
        Ok(ckpt)
    }

    /// Restore all parameters from a training checkpoint (strict).
    pub fn load_checkpoint(&self, ckpt: &Checkpoint<T>) -> Result<()> {
        load_params(ckpt, &self.collect_params())
    }

    /// Fold every module's scorer into its summed query.
    pub fn fold(&self) -> Result<Vec<FoldedRouter<T>>> {
        if !self.config.selector.is_learned() {
            return Err(CroprError::UnsupportedVariant(
                "only the learned scorer folds; baseline selectors have no queries".into(),
            ));
        }
        self.modules.iter().map(CroprModule::fold).collect()
    }

    /// Inference checkpoint: backbone and fusion weights plus one summed
    /// query per pruning point. Aggregators, auxiliary heads, and the raw
    /// query matrices are all gone.
    pub fn folded_checkpoint(&self) -> Result<Checkpoint<T>> {
        let routers = self.fold()?;
        let mut keep = NamedParams::new();
        self.vit.collect_params(&mut keep);
        if let Some(f) = &self.cross_fuser {
            f.collect("fusion.cross", &mut keep);
        }
        if let Some(b) = &self.mhsa_fuser {
            b.collect("fusion.mhsa", &mut keep);
        }
        let mut ckpt = crate::nn::params_to_checkpoint(&keep)?;
        for (i, r) in routers.iter().enumerate() {
            ckpt.push(&format!("router.{i}.qbar"), 1, r.qbar.len(), r.qbar.clone())?;
        }
        ckpt.set_meta("kind", "folded")?;
        ckpt.set_meta("model", &serde_json::to_string(&self.config).expect("config is plain data"))?;
        ckpt.set_meta("schedule", &serde_json::to_string(&self.schedule).expect("schedule is plain data"))?;
        Ok(ckpt)
    }

    /// Restore backbone/fusion weights from a folded checkpoint and return
    /// its routers. The model's own module parameters stay untouched (and
    /// unused by [`Model::forward_folded`]).
    pub fn load_folded_checkpoint(&self, ckpt: &Checkpoint<T>) -> Result<Vec<FoldedRouter<T>>> {
        if ckpt.meta("kind") != Some("folded") {
            return Err(CroprError::checkpoint("not a folded checkpoint"));
        }
        let mut keep = NamedParams::new();
        self.vit.collect_params(&mut keep);
        if let Some(f) = &self.cross_fuser {
            f.collect("fusion.cross", &mut keep);
        }
        if let Some(b) = &self.mhsa_fuser {
            b.collect("fusion.mhsa", &mut keep);
        }
        for (name, tensor) in &keep {
            let entry = ckpt
                .get(name)
                .ok_or_else(|| CroprError::checkpoint(format!("missing tensor {name}")))?;
            if entry.rows != tensor.rows() || entry.cols != tensor.cols() {
                return Err(CroprError::checkpoint(format!("shape mismatch for {name}")));
            }
            tensor.set_value(&entry.data)?;
        }
        let mut routers = Vec::with_capacity(self.schedule.entries.len());
        for i in 0..self.schedule.entries.len() {
            let entry = ckpt
                .get(&format!("router.{i}.qbar"))
                .ok_or_else(|| CroprError::checkpoint(format!("missing router.{i}.qbar")))?;
            routers.push(FoldedRouter { qbar: entry.data.clone() });
        }
        Ok(routers)
    }
}
