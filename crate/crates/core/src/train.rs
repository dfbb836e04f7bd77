//! Single-image training loop with gradient accumulation, the AdamW
//! optimizer, and task-aware evaluation.
//!
//! The tape records one image at a time, so a "batch" here means gradients
//! from `batch` consecutive images averaged before each optimizer step.
//! Accumulators and moment estimates are kept in `f64` regardless of the
//! model scalar so that f32 models do not lose small gradient mass.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cropr::{FoldedRouter, Target, TaskKind};
use crate::error::{CroprError, Result};
use crate::model::{Example, ForwardOutput, Model};
use crate::nn::NamedParams;
use crate::scalar::Scalar;
use crate::schedule::PruningSchedule;
use crate::synth::{
    multi_sample, needle_sample, retention_recall, seg_sample, stream_rng, MultiSpec, NeedleSpec,
    SegSpec,
};
use crate::tensor::IGNORE_LABEL;
use crate::vit::{Pooling, ViTConfig};

/// Evaluation samples use indices far above any training index so the two
/// streams can never collide. Public so tooling that wants to look at "the
/// eval set" (heatmaps, token dumps) can draw the same images.
pub const EVAL_INDEX_OFFSET: u64 = 1 << 40;
/// Per-purpose RNG streams derived from the run seed.
const TRAIN_STREAM: u64 = 0x7452_4149;
const EVAL_STREAM: u64 = 0x4556_414c;

/// AdamW with decoupled weight decay. Biases and LayerNorm scales/shifts
/// (names ending in `.bias`, `.gamma`, `.beta`) are excluded from decay.
pub struct AdamW<T: Scalar> {
    params: NamedParams<T>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decayed: Vec<bool>,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: NamedParams<T>, lr: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let decayed = params
            .iter()
            .map(|(name, _)| {
                !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
            })
            .collect();
        AdamW {
            params,
            m,
            v,
            decayed,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
        }
    }

    /// Apply one update from per-parameter mean gradients (same order and
    /// shapes as the params this optimizer was built over).
    pub fn step(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(CroprError::contract(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (i, (name, tensor)) in self.params.iter().enumerate() {
            let g = &grads[i];
            if g.len() != tensor.len() {
                return Err(CroprError::contract(format!(
                    "gradient for {name} has {} elements, parameter has {}",
                    g.len(),
                    tensor.len()
                )));
            }
            let wd = if self.decayed[i] { self.weight_decay } else { 0.0 };
            let mut value = tensor.value();
            for (j, p) in value.iter_mut().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let pf = p.to_f64();
                *p = T::from_f64(pf - self.lr * (mhat / (vhat.sqrt() + self.eps) + wd * pf));
            }
            tensor.set_value(&value)?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Images per optimizer step.
    pub batch: usize,
    /// Training images per epoch (fixed set, revisited every epoch).
    pub train_count: usize,
    pub eval_count: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Small but realistic defaults for the toy tasks.
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 4,
            batch: 8,
            train_count: 96,
            eval_count: 48,
            lr: 3e-3,
            weight_decay: 1e-4,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.train_count == 0 || self.eval_count == 0 {
            return Err(CroprError::config(
                "epochs, batch, train_count, and eval_count must be positive",
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CroprError::config("learning rate must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(CroprError::config("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Which synthetic generator feeds the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "task")]
pub enum TaskData {
    Needle(NeedleSpec),
    Seg(SegSpec),
    Multi(MultiSpec),
}

impl TaskData {
    pub fn task_kind(&self) -> TaskKind {
        match self {
            TaskData::Needle(s) => TaskKind::Classification { classes: s.classes },
            TaskData::Seg(s) => {
                TaskKind::Dense { grid: s.image_side / s.patch, classes: s.classes }
            }
            TaskData::Multi(s) => TaskKind::Multilabel { classes: s.classes },
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            TaskData::Needle(s) => s.classes,
            TaskData::Seg(s) => s.classes,
            TaskData::Multi(s) => s.classes,
        }
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        match self {
            TaskData::Needle(s) => (s.image_side, s.patch, s.channels),
            TaskData::Seg(s) => (s.image_side, s.patch, s.channels),
            TaskData::Multi(s) => (s.image_side, s.patch, s.channels),
        }
    }

    /// A small backbone matched to this task's geometry — the default the
    /// CLI starts from before config overrides.
    pub fn toy_backbone(&self) -> ViTConfig {
        let (side, patch, channels) = self.geometry();
        ViTConfig {
            image_side: side,
            patch_size: patch,
            channels,
            depth: 4,
            width: 48,
            heads: 4,
            mlp_ratio: 2,
            drop_path_max: 0.0,
            pooling: Pooling::Avg,
            num_classes: self.classes(),
            cls_token: true,
        }
    }

    pub fn example<T: Scalar>(&self, seed: u64, index: u64) -> Result<Example<T>> {
        match self {
            TaskData::Needle(s) => Ok(Example::from_needle(needle_sample(s, seed, index)?)),
            TaskData::Seg(s) => Example::from_seg(seg_sample(s, seed, index)?, s.patch),
            TaskData::Multi(s) => Ok(Example::from_multi(multi_sample(s, seed, index)?)),
        }
    }
}

/// Task-appropriate quality plus routing quality over one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub samples: usize,
    /// Mean main-task loss.
    pub loss: f64,
    /// Name of the primary score: accuracy, miou, or macro_acc.
    pub metric: &'static str,
    pub score: f64,
    /// Mean fraction of known-informative patches that survived routing;
    /// absent for tasks without an informativeness mask.
    pub retention: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Tokens removed per image under this epoch's (curriculum) schedule.
    pub tokens_pruned: usize,
    /// Mean combined loss actually optimized.
    pub train_loss: f64,
    /// Mean main-task loss component.
    pub main_loss: f64,
    /// Mean auxiliary loss per pruning module; empty for baseline selectors.
    pub aux_losses: Vec<f64>,
    pub eval: EvalMetrics,
}

/// Train in place; parameters live on the model's tape. Returns one row
/// per epoch. `on_epoch` fires after each epoch's evaluation (progress
/// reporting for long runs).
pub fn train<T: Scalar>(
    model: &Model<T>,
    data: &TaskData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let params = model.collect_params();
    let mut opt = AdamW::new(params.clone(), cfg.lr, cfg.weight_decay);
    let tape = model.tape().clone();
    let mut rows = Vec::with_capacity(cfg.epochs);

    let mut sums: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    for epoch in 0..cfg.epochs {
        let sched = model.schedule.at_epoch(epoch)?;
        let mut rng = stream_rng(cfg.seed ^ TRAIN_STREAM, epoch as u64);
        let mut loss_sum = 0.0;
        let mut main_sum = 0.0;
        let mut aux_sums = vec![0.0f64; sched.entries.len()];
        let mut in_batch = 0usize;
        for s in &mut sums {
            s.iter_mut().for_each(|x| *x = 0.0);
        }
        for i in 0..cfg.train_count {
            let ex = data.example::<T>(cfg.seed, i as u64)?;
            tape.restart();
            let out = model.forward_train(&ex, &sched, &mut rng)?;
            let loss = out.total_loss.scalar()?.to_f64();
            if !loss.is_finite() {
                return Err(CroprError::contract(format!(
                    "non-finite loss at epoch {epoch}, image {i}"
                )));
            }
            loss_sum += loss;
            main_sum += out.main_loss.scalar()?.to_f64();
            for (sum, aux) in aux_sums.iter_mut().zip(&out.aux_losses) {
                *sum += aux.scalar()?.to_f64();
            }
            tape.backward(&out.total_loss)?;
            for (sum, (_, t)) in sums.iter_mut().zip(&params) {
                for (s, g) in sum.iter_mut().zip(t.grad()) {
                    *s += g.to_f64();
                }
            }
            tape.zero_grad();
            in_batch += 1;
            if in_batch == cfg.batch || i + 1 == cfg.train_count {
                let inv = 1.0 / in_batch as f64;
                for s in &mut sums {
                    s.iter_mut().for_each(|x| *x *= inv);
                }
                opt.step(&sums)?;
                for s in &mut sums {
                    s.iter_mut().for_each(|x| *x = 0.0);
                }
                in_batch = 0;
            }
        }
        let eval = evaluate(model, data, &sched, cfg.eval_count, cfg.seed)?;
        let n = cfg.train_count as f64;
        let has_aux = !model.modules.is_empty();
        let row = EpochMetrics {
            epoch,
            tokens_pruned: sched.total_pruned(),
            train_loss: loss_sum / n,
            main_loss: main_sum / n,
            aux_losses: if has_aux {
                aux_sums.iter().map(|s| s / n).collect()
            } else {
                Vec::new()
            },
            eval,
        };
        on_epoch(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Mergeable per-sample evaluation counts. Shards evaluated independently
/// (for example, one per worker thread) merge into exactly the same
/// metrics a single pass would produce.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTallies {
    pub samples: usize,
    pub loss_sum: f64,
    pub correct: usize,
    pub label_hits: usize,
    pub label_total: usize,
    /// Dense confusion counts, indexed by class.
    pub inter: Vec<usize>,
    pub pred_count: Vec<usize>,
    pub label_count: Vec<usize>,
    pub retention_sum: f64,
    pub masked: usize,
}

impl EvalTallies {
    pub fn new(classes: usize) -> Self {
        EvalTallies {
            samples: 0,
            loss_sum: 0.0,
            correct: 0,
            label_hits: 0,
            label_total: 0,
            inter: vec![0; classes],
            pred_count: vec![0; classes],
            label_count: vec![0; classes],
            retention_sum: 0.0,
            masked: 0,
        }
    }

    /// Fold one forward pass into the counts.
    pub fn record<T: Scalar>(
        &mut self,
        ex: &Example<T>,
        out: &ForwardOutput<T>,
    ) -> Result<()> {
        self.samples += 1;
        self.loss_sum += out.main_loss.scalar()?.to_f64();
        if let Some(mask) = &ex.mask {
            self.retention_sum += retention_recall(&out.trace.final_keep, mask);
            self.masked += 1;
        }
        let logits = out.logits.value();
        let (rows, cols) = out.logits.shape();
        match &ex.target {
            Target::Class(label) => {
                if argmax(&logits[..cols]) == *label {
                    self.correct += 1;
                }
            }
            Target::Dense(labels) => {
                if labels.len() != rows {
                    return Err(CroprError::contract(format!(
                        "{} labels for {rows} dense logit rows",
                        labels.len()
                    )));
                }
                for (p, &l) in labels.iter().enumerate() {
                    if l == IGNORE_LABEL {
                        continue;
                    }
                    let pred = argmax(&logits[p * cols..(p + 1) * cols]);
                    self.label_count[l] += 1;
                    self.pred_count[pred] += 1;
                    if pred == l {
                        self.inter[l] += 1;
                    }
                }
            }
            Target::Multi(t) => {
                for (c, target) in t.iter().enumerate() {
                    let want = Scalar::to_f64(*target) > 0.5;
                    let got = logits[c].to_f64() > 0.0;
                    if want == got {
                        self.label_hits += 1;
                    }
                    self.label_total += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &EvalTallies) -> Result<()> {
        if other.inter.len() != self.inter.len() {
            return Err(CroprError::contract("merging tallies with different class counts"));
        }
        self.samples += other.samples;
        self.loss_sum += other.loss_sum;
        self.correct += other.correct;
        self.label_hits += other.label_hits;
        self.label_total += other.label_total;
        for (a, b) in self.inter.iter_mut().zip(&other.inter) {
            *a += b;
        }
        for (a, b) in self.pred_count.iter_mut().zip(&other.pred_count) {
            *a += b;
        }
        for (a, b) in self.label_count.iter_mut().zip(&other.label_count) {
            *a += b;
        }
        self.retention_sum += other.retention_sum;
        self.masked += other.masked;
        Ok(())
    }

    pub fn metrics(&self, task: TaskKind) -> Result<EvalMetrics> {
        if self.samples == 0 {
            return Err(CroprError::contract("no samples recorded"));
        }
        let (metric, score) = match task {
            TaskKind::Classification { .. } => {
                ("accuracy", self.correct as f64 / self.samples as f64)
            }
            TaskKind::Dense { .. } => {
                // Dataset-level mean IoU over classes that appear at all.
                let mut iou_sum = 0.0;
                let mut present = 0usize;
                for c in 0..self.inter.len() {
                    let union = self.label_count[c] + self.pred_count[c] - self.inter[c];
                    if union > 0 {
                        iou_sum += self.inter[c] as f64 / union as f64;
                        present += 1;
                    }
                }
                ("miou", if present > 0 { iou_sum / present as f64 } else { 0.0 })
            }
            TaskKind::Multilabel { .. } => {
                ("macro_acc", self.label_hits as f64 / self.label_total.max(1) as f64)
            }
        };
        Ok(EvalMetrics {
            samples: self.samples,
            loss: self.loss_sum / self.samples as f64,
            metric,
            score,
            retention: if self.masked > 0 {
                Some(self.retention_sum / self.masked as f64)
            } else {
                None
            },
        })
    }
}

/// Evaluate with live scoring (deterministic except the random baseline,
/// which draws from a seed-derived stream).
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &TaskData,
    schedule: &PruningSchedule,
    count: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    evaluate_shard(model, data, schedule, 0, count, seed)?.metrics(data.task_kind())
}

/// Evaluate the shard of eval indices `[start, start + count)`. Workers
/// evaluate disjoint shards on their own model replicas and merge the
/// tallies; the union over shards `[0, n)` reproduces `evaluate` exactly
/// for deterministic selectors.
pub fn evaluate_shard<T: Scalar>(
    model: &Model<T>,
    data: &TaskData,
    schedule: &PruningSchedule,
    start: usize,
    count: usize,
    seed: u64,
) -> Result<EvalTallies> {
    eval_core(model, data, start, count, seed, |ex, rng| {
        model.forward_eval_rng(ex, schedule, rng)
    })
}

/// Evaluate with folded routers standing in for the learned scorers.
pub fn evaluate_folded<T: Scalar>(
    model: &Model<T>,
    routers: &[FoldedRouter<T>],
    data: &TaskData,
    schedule: &PruningSchedule,
    count: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    evaluate_folded_shard(model, routers, data, schedule, 0, count, seed)?
        .metrics(data.task_kind())
}

/// Shard variant of [`evaluate_folded`], for worker-parallel evaluation.
pub fn evaluate_folded_shard<T: Scalar>(
    model: &Model<T>,
    routers: &[FoldedRouter<T>],
    data: &TaskData,
    schedule: &PruningSchedule,
    start: usize,
    count: usize,
    seed: u64,
) -> Result<EvalTallies> {
    eval_core(model, data, start, count, seed, |ex, _| model.forward_folded(ex, schedule, routers))
}

fn eval_core<T: Scalar>(
    model: &Model<T>,
    data: &TaskData,
    start: usize,
    count: usize,
    seed: u64,
    forward: impl Fn(&Example<T>, &mut ChaCha8Rng) -> Result<ForwardOutput<T>>,
) -> Result<EvalTallies> {
    if count == 0 {
        return Err(CroprError::config("evaluation needs at least one sample"));
    }
    let tape = model.tape().clone();
    // The stream is tied to the shard start so a sharded run is
    // reproducible for a fixed worker count.
    let mut rng = stream_rng(seed ^ EVAL_STREAM, start as u64);
    let mut tallies = EvalTallies::new(data.classes());
    for i in start..start + count {
        let ex = data.example::<T>(seed, EVAL_INDEX_OFFSET + i as u64)?;
        tape.restart();
        let out = forward(&ex, &mut rng)?;
        tallies.record(&ex, &out)?;
    }
    Ok(tallies)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
