//! Command-line front end: build pruning schedules, train on the synthetic
//! tasks, evaluate checkpoints (live or folded, optionally sharded over
//! worker threads), fold checkpoints for inference, benchmark, and export
//! routing decisions as patch heatmaps or binary token dumps.
//!
//! Conventions every subcommand follows:
//! - output is deterministic for a fixed `--seed`;
//! - every file written starts with a self-describing `#` header carrying
//!   the format name, the build version, and the run-config hash;
//! - flags override whatever a `--config` JSON said;
//! - exit codes: 0 success, 2 configuration or usage errors, 3 violated
//!   data/numeric contracts, 1 I/O failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::thread;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use cropr_core::bench::{bench_forward, bench_router, BenchRow};
use cropr_core::checkpoint::Checkpoint;
use cropr_core::config::{BenchConfig, RunConfig};
use cropr_core::cropr::{FoldedRouter, ScorerKind, SelectorKind};
use cropr_core::error::{CroprError, Result};
use cropr_core::flops::{flops, flops_unpruned, FlopsConfig};
use cropr_core::model::{Example, ForwardOutput, FusionKind, Model, SelectorChoice};
use cropr_core::scalar::Scalar;
use cropr_core::schedule::{Curriculum, PruningSchedule};
use cropr_core::synth::{stream_rng, MultiSpec, NeedleSpec, SegSpec};
use cropr_core::tensor::Tape;
use cropr_core::train::{
    evaluate_folded_shard, evaluate_shard, train, EvalTallies, TaskData, EVAL_INDEX_OFFSET,
};
use cropr_core::vit::AttnReadout;

/// Build identifier stamped into every output file.
const VERSION: &str = concat!("cropr v", env!("CARGO_PKG_VERSION"), "-g", env!("CROPR_GIT_HASH"));

/// Per-stage prune count used when a flag forces a schedule rebuild and the
/// old schedule gives no better hint.
const DEFAULT_R: usize = 16;

/// Routing-noise stream for heatmaps and token dumps; distinct from the
/// train/eval streams so inspection never perturbs them.
const INSPECT_STREAM: u64 = 0x4d41_5053;

#[derive(Parser)]
#[command(name = "cropr", version = VERSION, about = "Token pruning for Vision Transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a pruning schedule (preset or custom) and print its trajectory.
    Schedule(ScheduleArgs),
    /// Train on a synthetic task; writes config, checkpoint, and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint and emit a metrics CSV.
    Eval(EvalArgs),
    /// Fold a training checkpoint into its smaller inference form.
    Fold(FoldArgs),
    /// Measure forward-pass latency and the folded-router microbenchmark.
    Bench(BenchArgs),
    /// Render which block pruned each patch as PGM images plus a CSV.
    Heatmap(HeatmapArgs),
    /// Dump pre-head token values with prune-stage tags to a binary file.
    ExportTokens(ExportTokensArgs),
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes (`cropr schedule | head`)
    // instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Schedule(args) => cmd_schedule(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Fold(args) => cmd_fold(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Heatmap(args) => cmd_heatmap(args),
        Command::ExportTokens(args) => cmd_export_tokens(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared flag vocabulary.

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    /// Classification where only a few patches carry the label.
    Needle,
    /// Dense per-patch labels on rectangle scenes.
    Seg,
    /// Multi-label presence/absence of class patches.
    Multi,
}

impl TaskArg {
    fn data(self) -> TaskData {
        match self {
            TaskArg::Needle => TaskData::Needle(NeedleSpec::toy()),
            TaskArg::Seg => TaskData::Seg(SegSpec::toy()),
            TaskArg::Multi => TaskData::Multi(MultiSpec::toy()),
        }
    }

    /// Dense tasks cannot run headless over survivors only, so they default
    /// to last-layer fusion.
    fn default_fusion(self) -> FusionKind {
        match self {
            TaskArg::Seg => FusionKind::Llf,
            _ => FusionKind::None,
        }
    }
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SelectorArg {
    /// Learned cross-attention scorer; keep the highest-scored tokens.
    Cropr,
    /// The learned scorer inverted: keep the lowest-scored tokens.
    NonSalient,
    /// Uniformly random keep set.
    Random,
    /// Keep the highest pixel-variance patches.
    Variance,
    /// Keep tokens by the CLS row of the previous block's attention.
    AttnCls,
    /// Keep tokens by column-averaged attention mass.
    AttnAvg,
}

impl SelectorArg {
    fn choice(self) -> SelectorChoice {
        match self {
            SelectorArg::Cropr => SelectorChoice::Cropr { invert: false },
            SelectorArg::NonSalient => SelectorChoice::Cropr { invert: true },
            SelectorArg::Random => SelectorChoice::Random,
            SelectorArg::Variance => SelectorChoice::Variance,
            SelectorArg::AttnCls => SelectorChoice::AttnTopK { readout: AttnReadout::Cls },
            SelectorArg::AttnAvg => SelectorChoice::AttnTopK { readout: AttnReadout::Avg },
        }
    }
}

/// Flag-compatible name for a selector, used in CSV metadata so the value a
/// user passed round-trips into the files a run writes.
fn selector_label(choice: &SelectorChoice) -> &'static str {
    match choice {
        SelectorChoice::Cropr { invert: false } => "cropr",
        SelectorChoice::Cropr { invert: true } => "non-salient",
        SelectorChoice::Random => "random",
        SelectorChoice::Variance => "variance",
        SelectorChoice::AttnTopK { readout: AttnReadout::Cls } => "attn-cls",
        SelectorChoice::AttnTopK { readout: AttnReadout::Avg } => "attn-avg",
    }
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
enum FusionArg {
    None,
    /// Re-insert pruned tokens before the final block (no extra params).
    Llf,
    /// Re-insert after the final block without further processing.
    TokenConcat,
    /// Learned grid queries cross-attend into the kept tokens.
    CrossAttn,
    /// Grid queries cross-attend into the re-concatenated sequence.
    CrossAttnConcat,
    /// A fresh self-attention block over the re-concatenated sequence.
    MhsaConcat,
    /// Stitch per-stage auxiliary logits with final-head logits.
    DtopLogit,
}

impl FusionArg {
    fn kind(self) -> FusionKind {
        match self {
            FusionArg::None => FusionKind::None,
            FusionArg::Llf => FusionKind::Llf,
            FusionArg::TokenConcat => FusionKind::TokenConcat,
            FusionArg::CrossAttn => FusionKind::CrossAttn,
            FusionArg::CrossAttnConcat => FusionKind::CrossAttnConcat,
            FusionArg::MhsaConcat => FusionKind::MhsaConcat,
            FusionArg::DtopLogit => FusionKind::DtopLogit,
        }
    }
}

fn fusion_label(kind: FusionKind) -> &'static str {
    match kind {
        FusionKind::None => "none",
        FusionKind::Llf => "llf",
        FusionKind::TokenConcat => "token-concat",
        FusionKind::CrossAttn => "cross-attn",
        FusionKind::CrossAttnConcat => "cross-attn-concat",
        FusionKind::MhsaConcat => "mhsa-concat",
        FusionKind::DtopLogit => "dtop-logit",
    }
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ScorerArg {
    /// Projection-free dot-product scorer (foldable).
    Simple,
    /// Full multi-head cross-attention scorer (ablation; does not fold).
    Mha,
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
enum RoutingArg {
    /// Keep the top-scored tokens.
    TopK,
    /// Sample the keep set from the score softmax during training.
    Sampling,
}

/// Run settings: either a `--config` JSON or a toy preset assembled from
/// `--task`; the remaining flags override either source field by field.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run-config JSON, as written by `cropr train`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic task family.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Which selector routes tokens.
    #[arg(long, value_enum)]
    selector: Option<SelectorArg>,
    /// How pruned tokens reach the head, if at all.
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    /// Uniform per-stage prune count; 0 disables pruning entirely.
    #[arg(long)]
    r: Option<usize>,
    /// Scorer form.
    #[arg(long, value_enum)]
    scorer: Option<ScorerArg>,
    /// Keep-set selection rule.
    #[arg(long, value_enum)]
    routing: Option<RoutingArg>,
    /// Drop the aggregator's MLP+LN residual path.
    #[arg(long)]
    no_mlp: bool,
    /// Let auxiliary losses reach backbone weights.
    #[arg(long)]
    no_stop_grad: bool,
    /// Run seed (weights, data, routing noise).
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Images per optimizer step.
    #[arg(long)]
    batch: Option<usize>,
    /// Training images per epoch.
    #[arg(long)]
    train_count: Option<usize>,
    /// Evaluation images.
    #[arg(long)]
    eval_count: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let mut cfg = RunConfig::load(path)?;
                if let Some(task) = self.task {
                    // A new task changes geometry, so backbone and schedule
                    // are rebuilt; selector, fusion, and training settings
                    // survive from the loaded config.
                    let rebuilt =
                        RunConfig::toy(task.data(), cfg.model.selector, cfg.model.fusion)?;
                    cfg.data = rebuilt.data;
                    cfg.model = rebuilt.model;
                    cfg.schedule = rebuilt.schedule;
                }
                cfg
            }
            None => {
                let task = self.task.unwrap_or(TaskArg::Needle);
                RunConfig::toy(
                    task.data(),
                    SelectorChoice::Cropr { invert: false },
                    task.default_fusion(),
                )?
            }
        };
        if let Some(selector) = self.selector {
            cfg.model.selector = selector.choice();
        }
        if let Some(fusion) = self.fusion {
            let kind = fusion.kind();
            let llf = matches!(kind, FusionKind::Llf);
            if llf != cfg.schedule.llf {
                // Last-layer fusion changes which blocks may prune, so the
                // per-stage count is re-spread over the eligible range.
                let r = cfg.schedule.entries.first().map(|e| e.r).unwrap_or(DEFAULT_R);
                let mut rebuilt = PruningSchedule::per_block(
                    cfg.schedule.depth,
                    cfg.schedule.m0,
                    r,
                    llf,
                    cfg.schedule.cls,
                )?;
                rebuilt.curriculum = cfg.schedule.curriculum;
                rebuilt.prefer_div8 = cfg.schedule.prefer_div8;
                cfg.schedule = rebuilt;
            }
            cfg.model.fusion = kind;
        }
        if let Some(r) = self.r {
            cfg.schedule = if r == 0 {
                let mut s = cfg.schedule.clone();
                s.entries.clear();
                s
            } else if cfg.schedule.entries.is_empty() {
                let mut s = PruningSchedule::per_block(
                    cfg.schedule.depth,
                    cfg.schedule.m0,
                    r,
                    cfg.schedule.llf,
                    cfg.schedule.cls,
                )?;
                s.curriculum = cfg.schedule.curriculum;
                s.prefer_div8 = cfg.schedule.prefer_div8;
                s
            } else {
                cfg.schedule.with_uniform_r(r)?
            };
        }
        if let Some(s) = self.scorer {
            cfg.model.variants.scorer = match s {
                ScorerArg::Simple => ScorerKind::Simple,
                ScorerArg::Mha => ScorerKind::Mha,
            };
        }
        if let Some(rt) = self.routing {
            cfg.model.variants.selector = match rt {
                RoutingArg::TopK => SelectorKind::TopK,
                RoutingArg::Sampling => SelectorKind::Sampling,
            };
        }
        if self.no_mlp {
            cfg.model.variants.use_mlp = false;
        }
        if self.no_stop_grad {
            cfg.model.variants.stop_grad = false;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.train.epochs = epochs;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(batch) = self.batch {
            cfg.train.batch = batch;
        }
        if let Some(n) = self.train_count {
            cfg.train.train_count = n;
        }
        if let Some(n) = self.eval_count {
            cfg.train.eval_count = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Small shared helpers.

/// `# key value` header lines every emitted file starts with.
fn header_lines(format: &str, config_hash: &str, extra: &[(&str, String)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# cropr {format} v1");
    let _ = writeln!(s, "# version {VERSION}");
    let _ = writeln!(s, "# config {config_hash}");
    for (key, value) in extra {
        let _ = writeln!(s, "# {key} {value}");
    }
    s
}

/// First 12 hex digits of SHA-256, for content that is not a full run
/// config (bare schedules).
fn short_sha(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Pretty JSON with `format`/`version`/`config_hash` keys spliced into the
/// top-level object. Deserialization ignores unknown keys, so files written
/// this way still round-trip through the plain `from_json` loaders.
fn self_describing_json<S: serde::Serialize>(
    value: &S,
    format: &str,
    config_hash: &str,
) -> String {
    let mut v = serde_json::to_value(value).expect("plain data");
    let obj = v.as_object_mut().expect("top-level JSON object");
    obj.insert("format".into(), format!("cropr {format} v1").into());
    obj.insert("version".into(), VERSION.into());
    obj.insert("config_hash".into(), config_hash.to_string().into());
    let mut s = serde_json::to_string_pretty(&v).expect("plain data");
    s.push('\n');
    s
}

fn build_model<T: Scalar>(cfg: &RunConfig) -> Result<Model<T>> {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    Model::new(&tape, &mut rng, cfg.model.clone(), cfg.schedule.clone())
}

fn run_from_checkpoint(ckpt: &Checkpoint<f64>) -> Result<RunConfig> {
    let run = ckpt.meta("run").ok_or_else(|| {
        CroprError::checkpoint("checkpoint carries no run config (was it written by `cropr train`?)")
    })?;
    RunConfig::from_json(run)
}

/// Load a checkpoint of either kind and bring a model up around it. For a
/// folded checkpoint the returned routers replace the live scorers.
fn load_model_any(
    path: &std::path::Path,
) -> Result<(RunConfig, Model<f64>, Option<Vec<FoldedRouter<f64>>>, Checkpoint<f64>)> {
    let ckpt = Checkpoint::<f64>::load(path)?;
    let cfg = run_from_checkpoint(&ckpt)?;
    let model = build_model::<f64>(&cfg)?;
    let routers = match ckpt.meta("kind") {
        Some("train") => {
            model.load_checkpoint(&ckpt)?;
            None
        }
        Some("folded") => Some(model.load_folded_checkpoint(&ckpt)?),
        other => {
            return Err(CroprError::checkpoint(format!("unknown checkpoint kind {other:?}")))
        }
    };
    Ok((cfg, model, routers, ckpt))
}

/// One eval-set image and its routed forward pass, shared by the heatmap
/// and token-dump commands so their stage tags agree image by image.
fn forward_for_inspection(
    model: &Model<f64>,
    routers: &Option<Vec<FoldedRouter<f64>>>,
    cfg: &RunConfig,
    seed: u64,
    index: usize,
) -> Result<(Example<f64>, ForwardOutput<f64>)> {
    let ex = cfg.data.example::<f64>(seed, EVAL_INDEX_OFFSET + index as u64)?;
    let out = match routers {
        Some(r) => model.forward_folded(&ex, &cfg.schedule, r)?,
        None => {
            let mut rng = stream_rng(seed ^ INSPECT_STREAM, index as u64);
            model.forward_eval_rng(&ex, &cfg.schedule, &mut rng)?
        }
    };
    Ok((ex, out))
}

/// Split `count` items into up to `workers` contiguous shards.
fn split_shards(count: usize, workers: usize) -> Vec<(usize, usize)> {
    let workers = workers.min(count).max(1);
    let base = count / workers;
    let rem = count % workers;
    let mut shards = Vec::with_capacity(workers);
    let mut start = 0;
    for i in 0..workers {
        let n = base + usize::from(i < rem);
        if n > 0 {
            shards.push((start, n));
        }
        start += n;
    }
    shards
}

// ---------------------------------------------------------------------------
// `cropr schedule`

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SchedulePreset {
    /// Depth 24, 196 patches + CLS, 8 pruned after every block but the last.
    ClsR8,
    /// The same with the final block reserved for fusion.
    ClsR8Llf,
    /// Three cuts of 50 at blocks 6, 12, and 18.
    ThreeStage,
    /// One deep cut (825 of 1024 patches) at block 3 of a 12-block model.
    DenseStaged,
    /// Five cuts over 9216 patches, pruning 97% of them.
    Aggressive,
    /// Segmentation recipe: R=40 with fusion and a 32-epoch warmup ramp.
    Seg,
}

impl SchedulePreset {
    fn schedule(self) -> Result<PruningSchedule> {
        match self {
            SchedulePreset::ClsR8 => PruningSchedule::per_block(24, 196, 8, false, true),
            SchedulePreset::ClsR8Llf => PruningSchedule::per_block(24, 196, 8, true, true),
            SchedulePreset::ThreeStage => {
                PruningSchedule::staged(24, 196, &[(6, 50), (12, 50), (18, 50)], false, true)
            }
            SchedulePreset::DenseStaged => {
                PruningSchedule::staged(12, 1024, &[(3, 825)], false, false)
            }
            SchedulePreset::Aggressive => PruningSchedule::staged(
                24,
                9216,
                &[(5, 2816), (8, 2304), (11, 1792), (14, 1280), (20, 768)],
                false,
                false,
            ),
            SchedulePreset::Seg => {
                let mut s = PruningSchedule::per_block(24, 1024, 40, true, true)?;
                s.curriculum =
                    Curriculum { enabled: true, start_r: 1, final_r: 40, warmup_epochs: 32 };
                Ok(s)
            }
        }
    }
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    /// Start from a named schedule instead of --depth/--m0.
    #[arg(long, value_enum, conflicts_with_all = ["depth", "m0", "r", "stages", "llf", "no_cls"])]
    preset: Option<SchedulePreset>,
    /// Transformer depth.
    #[arg(long)]
    depth: Option<usize>,
    /// Initial patch-token count (CLS excluded).
    #[arg(long)]
    m0: Option<usize>,
    /// Prune this many patches after every eligible block.
    #[arg(long, conflicts_with = "stages")]
    r: Option<usize>,
    /// Explicit stages as block:count pairs, e.g. "6:50,12:50,18:50".
    #[arg(long)]
    stages: Option<String>,
    /// Reserve the final block for fusion (no pruning in the last two).
    #[arg(long)]
    llf: bool,
    /// The model runs without a CLS token.
    #[arg(long)]
    no_cls: bool,
    /// Warn when a post-prune keep count is not a multiple of 8.
    #[arg(long)]
    prefer_div8: bool,
    /// Warmup ramp "start:final:epochs", e.g. "1:40:32".
    #[arg(long)]
    curriculum: Option<String>,
    /// Write the schedule JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the schedule JSON to stdout instead of the table.
    #[arg(long)]
    json: bool,
    /// Append an analytic FLOP table (2 FLOPs per multiply-add).
    #[arg(long)]
    flops: bool,
    /// Model width for --flops.
    #[arg(long, default_value_t = 1024)]
    width: usize,
    /// MLP expansion ratio for --flops.
    #[arg(long, default_value_t = 4)]
    mlp_ratio: usize,
    /// Flattened patch length (channels * patch^2) for --flops.
    #[arg(long, default_value_t = 768)]
    patch_dim: usize,
    /// Head classes for --flops.
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    /// Cost the head per patch rather than once (--flops).
    #[arg(long)]
    dense_head: bool,
}

fn parse_stages(spec: &str) -> Result<Vec<(usize, usize)>> {
    spec.split(',')
        .map(|part| {
            let (block, r) = part
                .split_once(':')
                .ok_or_else(|| CroprError::config(format!("stage {part:?} is not block:count")))?;
            let num = |s: &str, what: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CroprError::config(format!("stage {part:?}: bad {what}")))
            };
            Ok((num(block, "block")?, num(r, "count")?))
        })
        .collect()
}

fn parse_curriculum(spec: &str) -> Result<Curriculum> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, final_r, warmup] = parts.as_slice() else {
        return Err(CroprError::config(format!(
            "curriculum {spec:?} is not start:final:warmup_epochs"
        )));
    };
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| CroprError::config(format!("curriculum {spec:?}: bad number {s:?}")))
    };
    Ok(Curriculum {
        enabled: true,
        start_r: num(start)?,
        final_r: num(final_r)?,
        warmup_epochs: num(warmup)?,
    })
}

fn build_schedule(args: &ScheduleArgs) -> Result<PruningSchedule> {
    let mut schedule = match args.preset {
        Some(p) => p.schedule()?,
        None => {
            let depth = args
                .depth
                .ok_or_else(|| CroprError::config("pass --preset or both --depth and --m0"))?;
            let m0 =
                args.m0.ok_or_else(|| CroprError::config("pass --m0 alongside --depth"))?;
            let cls = !args.no_cls;
            if let Some(spec) = &args.stages {
                PruningSchedule::staged(depth, m0, &parse_stages(spec)?, args.llf, cls)?
            } else {
                match args.r.unwrap_or(0) {
                    0 => {
                        let mut s = PruningSchedule::empty(depth, m0, cls);
                        s.llf = args.llf;
                        s.validate()?;
                        s
                    }
                    r => PruningSchedule::per_block(depth, m0, r, args.llf, cls)?,
                }
            }
        }
    };
    if args.prefer_div8 {
        schedule.prefer_div8 = true;
    }
    if let Some(spec) = &args.curriculum {
        schedule.curriculum = parse_curriculum(spec)?;
    }
    schedule.validate()?;
    Ok(schedule)
}

fn cmd_schedule(args: ScheduleArgs) -> Result<()> {
    let schedule = build_schedule(&args)?;
    let compact = serde_json::to_string(&schedule).expect("schedule is plain data");
    let hash = short_sha(&compact);

    if args.json {
        println!("{}", schedule.to_json());
    } else {
        println!(
            "schedule {hash}: depth {}, {} patches{}{}, {} pruning stage(s)",
            schedule.depth,
            schedule.m0,
            if schedule.cls { " + CLS" } else { "" },
            if schedule.llf { ", last-layer fusion" } else { "" },
            schedule.entries.len(),
        );
        println!("{VERSION}");
        let traj = schedule.keep_trajectory();
        println!("{:>12}  {:>6}  {:>6}", "event", "prune", "keep");
        println!("{:>12}  {:>6}  {:>6}", "start", "-", traj[0]);
        for ((block, r), keep) in schedule.effective_entries().iter().zip(&traj[1..]) {
            println!("{:>12}  {:>6}  {:>6}", format!("block {block}"), r, keep);
        }
        if schedule.llf && !schedule.entries.is_empty() {
            println!("{:>12}  {:>6}  {:>6}", "fusion", "-", schedule.initial_tokens());
        }
        println!(
            "total pruned: {} of {} patches ({}% TPR)",
            schedule.total_pruned(),
            schedule.m0,
            schedule.tpr_percent()
        );
        if schedule.cls && !schedule.entries.is_empty() {
            println!("note: the first stage's count includes the extra initial token");
        }
        if schedule.curriculum.enabled {
            let c = &schedule.curriculum;
            println!(
                "curriculum: per-stage count ramps {} -> {} over {} epochs",
                c.start_r, c.final_r, c.warmup_epochs
            );
        }
    }
    for w in schedule.div8_warnings() {
        eprintln!("warning: {w}");
    }

    if args.flops {
        let cfg = FlopsConfig {
            depth: schedule.depth,
            width: args.width,
            mlp_ratio: args.mlp_ratio,
            patch_dim: args.patch_dim,
            classes: args.classes,
            dense_head: args.dense_head,
        };
        let pruned = flops(&cfg, &schedule)?;
        let unpruned = flops_unpruned(&cfg, schedule.m0, schedule.cls)?;
        println!(
            "flops (width {}, mlp x{}, patch dim {}, {} classes, 2 per multiply-add):",
            args.width, args.mlp_ratio, args.patch_dim, args.classes
        );
        println!("{:>7}  {:>7}  {:>16}", "block", "tokens", "flops");
        for b in &pruned.blocks {
            println!("{:>7}  {:>7}  {:>16}", b.block, b.tokens, b.total());
        }
        println!("{:>7}  {:>7}  {:>16}", "embed", "-", pruned.patch_embed);
        println!("{:>7}  {:>7}  {:>16}", "router", "-", pruned.router);
        println!("{:>7}  {:>7}  {:>16}", "head", "-", pruned.head);
        println!(
            "total {} vs unpruned {} ({:.1}%)",
            pruned.total(),
            unpruned.total(),
            100.0 * pruned.total() as f64 / unpruned.total() as f64
        );
    }

    if let Some(out) = &args.out {
        fs::write(out, self_describing_json(&schedule, "schedule", &hash))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// `cropr train`

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (default: runs/train-<config hash>).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let hash = cfg.hash_hex();
    let out_dir = args
        .out_dir
        .unwrap_or_else(|| PathBuf::from(format!("runs/train-{}", cfg.short_hash())));
    fs::create_dir_all(&out_dir)?;

    let model = build_model::<f64>(&cfg)?;
    println!(
        "training {}: task {}, selector {}, fusion {}, {} params, seed {}",
        cfg.short_hash(),
        task_label(&cfg.data),
        selector_label(&cfg.model.selector),
        fusion_label(cfg.model.fusion),
        model.param_elems(),
        cfg.train.seed,
    );

    let rows = train(&model, &cfg.data, &cfg.train, |m| {
        let retention = m
            .eval
            .retention
            .map(|r| format!(", retention {r:.3}"))
            .unwrap_or_default();
        println!(
            "epoch {:>3}: pruned {:>4}, train loss {:.4}, eval {} {:.4}{}",
            m.epoch, m.tokens_pruned, m.train_loss, m.eval.metric, m.eval.score, retention
        );
    })?;

    // Per-epoch metrics CSV. One aux-loss column per pruning module.
    let aux_n = rows.first().map(|r| r.aux_losses.len()).unwrap_or(0);
    let aux_names: Vec<String> = if aux_n == cfg.schedule.entries.len() {
        cfg.schedule.entries.iter().map(|e| format!("aux_b{}", e.block)).collect()
    } else {
        (0..aux_n).map(|i| format!("aux_{i}")).collect()
    };
    let mut csv = header_lines(
        "train-metrics",
        &hash,
        &[
            ("task", task_label(&cfg.data).to_string()),
            ("selector", selector_label(&cfg.model.selector).to_string()),
            ("fusion", fusion_label(cfg.model.fusion).to_string()),
            ("seed", cfg.train.seed.to_string()),
        ],
    );
    let _ = write!(csv, "epoch,tokens_pruned,train_loss,main_loss");
    for name in &aux_names {
        let _ = write!(csv, ",{name}");
    }
    csv.push_str(",eval_loss,eval_metric,eval_score,retention\n");
    for row in &rows {
        let _ = write!(
            csv,
            "{},{},{},{}",
            row.epoch, row.tokens_pruned, row.train_loss, row.main_loss
        );
        for aux in &row.aux_losses {
            let _ = write!(csv, ",{aux}");
        }
        let retention = row.eval.retention.map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            ",{},{},{},{}",
            row.eval.loss, row.eval.metric, row.eval.score, retention
        );
    }
    fs::write(out_dir.join("metrics.csv"), &csv)?;

    fs::write(out_dir.join("config.json"), self_describing_json(&cfg, "run-config", &hash))?;

    let mut ckpt = model.to_checkpoint()?;
    ckpt.set_meta("run", &serde_json::to_string(&cfg).expect("config is plain data"))?;
    ckpt.set_meta("config_hash", &hash)?;
    ckpt.set_meta("version", VERSION)?;
    ckpt.save(out_dir.join("checkpoint.bin"))?;

    if let Some(last) = rows.last() {
        println!(
            "done: eval {} {:.4} after {} epochs",
            last.eval.metric,
            last.eval.score,
            rows.len()
        );
    }
    println!("wrote {}", out_dir.join("config.json").display());
    println!("wrote {}", out_dir.join("metrics.csv").display());
    println!("wrote {}", out_dir.join("checkpoint.bin").display());
    Ok(())
}

fn task_label(data: &TaskData) -> &'static str {
    match data {
        TaskData::Needle(_) => "needle",
        TaskData::Seg(_) => "seg",
        TaskData::Multi(_) => "multi",
    }
}

// ---------------------------------------------------------------------------
// `cropr eval`

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `cropr train` or `cropr fold`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Route with folded dot-product scorers instead of live modules.
    /// Implied when the checkpoint itself is folded.
    #[arg(long)]
    folded: bool,
    /// Shard the eval set over this many threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Number of eval images (default: the run config's eval_count).
    #[arg(long)]
    count: Option<usize>,
    /// Eval seed (default: the run config's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the per-stage prune count; 0 evaluates unpruned.
    #[arg(long)]
    r: Option<usize>,
    /// Re-route with a different selector. Only selectors sharing the
    /// checkpoint's parameter shape load (e.g. cropr <-> non-salient, or
    /// any two parameter-free baselines).
    #[arg(long, value_enum)]
    selector: Option<SelectorArg>,
    /// Write the metrics CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if args.workers == 0 {
        return Err(CroprError::config("--workers must be positive"));
    }
    let ckpt = Checkpoint::<f64>::load(&args.checkpoint)?;
    let mut cfg = run_from_checkpoint(&ckpt)?;
    if let Some(sel) = args.selector {
        cfg.model.selector = sel.choice();
    }
    let kind = ckpt.meta("kind").unwrap_or("train").to_string();
    let folded = args.folded || kind == "folded";
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let count = args.count.unwrap_or(cfg.train.eval_count);
    if count == 0 {
        return Err(CroprError::config("need at least one eval image"));
    }
    // The model is built from the training schedule so its module count
    // matches the checkpoint; only the routing at eval time changes.
    let eval_schedule = match args.r {
        None => cfg.schedule.clone(),
        Some(0) => {
            let mut s = cfg.schedule.clone();
            s.entries.clear();
            s
        }
        Some(r) if cfg.schedule.entries.is_empty() => PruningSchedule::per_block(
            cfg.schedule.depth,
            cfg.schedule.m0,
            r,
            cfg.schedule.llf,
            cfg.schedule.cls,
        )?,
        Some(r) => cfg.schedule.with_uniform_r(r)?,
    };

    let worker = |start: usize, n: usize| -> Result<EvalTallies> {
        let model = build_model::<f64>(&cfg)?;
        if folded {
            let routers = match kind.as_str() {
                "folded" => model.load_folded_checkpoint(&ckpt)?,
                _ => {
                    model.load_checkpoint(&ckpt)?;
                    model.fold()?
                }
            };
            evaluate_folded_shard(&model, &routers, &cfg.data, &eval_schedule, start, n, seed)
        } else {
            if kind == "folded" {
                return Err(CroprError::checkpoint(
                    "folded checkpoints carry no live scorers; pass --folded",
                ));
            }
            model.load_checkpoint(&ckpt)?;
            evaluate_shard(&model, &cfg.data, &eval_schedule, start, n, seed)
        }
    };

    let shards = split_shards(count, args.workers);
    let mut tallies = EvalTallies::new(cfg.data.classes());
    if shards.len() == 1 {
        let (start, n) = shards[0];
        tallies.merge(&worker(start, n)?)?;
    } else {
        let worker = &worker;
        let results: Vec<Result<EvalTallies>> = thread::scope(|scope| {
            let handles: Vec<_> = shards
                .iter()
                .map(|&(start, n)| scope.spawn(move || worker(start, n)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| Err(CroprError::contract("eval worker panicked")))
                })
                .collect()
        });
        for r in results {
            tallies.merge(&r?)?;
        }
    }
    let metrics = tallies.metrics(cfg.data.task_kind())?;

    let mut csv = header_lines(
        "eval",
        &cfg.hash_hex(),
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("kind", kind.clone()),
            ("task", task_label(&cfg.data).to_string()),
            ("selector", selector_label(&cfg.model.selector).to_string()),
            ("fusion", fusion_label(cfg.model.fusion).to_string()),
            ("folded", folded.to_string()),
            ("workers", args.workers.to_string()),
            ("seed", seed.to_string()),
            ("tokens_pruned", eval_schedule.total_pruned().to_string()),
        ],
    );
    csv.push_str("samples,loss,metric,score,retention\n");
    let retention = metrics.retention.map(|r| r.to_string()).unwrap_or_default();
    let _ = writeln!(
        csv,
        "{},{},{},{},{}",
        metrics.samples, metrics.loss, metrics.metric, metrics.score, retention
    );

    let human = format!(
        "eval: {} images, loss {:.4}, {} {:.4}{}",
        metrics.samples,
        metrics.loss,
        metrics.metric,
        metrics.score,
        metrics.retention.map(|r| format!(", retention {r:.3}")).unwrap_or_default()
    );
    match &args.out {
        Some(path) => {
            fs::write(path, &csv)?;
            println!("{human}");
            println!("wrote {}", path.display());
        }
        None => {
            eprintln!("{human}");
            print!("{csv}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// `cropr fold`

#[derive(Debug, Args)]
struct FoldArgs {
    /// Training checkpoint to fold.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output path (default: folded.bin next to the input).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_fold(args: FoldArgs) -> Result<()> {
    let ckpt = Checkpoint::<f64>::load(&args.checkpoint)?;
    if ckpt.meta("kind") != Some("train") {
        return Err(CroprError::checkpoint("fold expects a training checkpoint"));
    }
    let cfg = run_from_checkpoint(&ckpt)?;
    let model = build_model::<f64>(&cfg)?;
    model.load_checkpoint(&ckpt)?;
    let mut folded = model.folded_checkpoint()?;
    for key in ["run", "config_hash"] {
        if let Some(value) = ckpt.meta(key) {
            folded.set_meta(key, value)?;
        }
    }
    folded.set_meta("version", VERSION)?;

    let out = args.out.unwrap_or_else(|| args.checkpoint.with_file_name("folded.bin"));
    folded.save(&out)?;
    println!(
        "training checkpoint: {:>3} tensors, {:>8} values, {:>9} bytes",
        ckpt.len(),
        ckpt.param_count(),
        ckpt.byte_size()
    );
    println!(
        "folded checkpoint:   {:>3} tensors, {:>8} values, {:>9} bytes",
        folded.len(),
        folded.param_count(),
        folded.byte_size()
    );
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// `cropr bench`

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (default: runs/bench-<config hash>).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also bench the same weights with pruning disabled.
    #[arg(long)]
    baseline: bool,
    /// Bench folded routing (learned scorer only).
    #[arg(long)]
    folded: bool,
    /// Timed passes per batch size.
    #[arg(long)]
    iters: Option<usize>,
    /// Untimed warmup passes.
    #[arg(long)]
    warmup: Option<usize>,
    /// Comma-separated batch sizes, e.g. "1,4,8".
    #[arg(long)]
    batches: Option<String>,
    /// Token count for the router microbenchmark.
    #[arg(long, default_value_t = 4096)]
    router_m: usize,
    /// Width for the router microbenchmark.
    #[arg(long, default_value_t = 64)]
    router_d: usize,
    /// Passes for the router microbenchmark.
    #[arg(long, default_value_t = 200)]
    router_iters: usize,
    /// Skip the router microbenchmark.
    #[arg(long)]
    no_router: bool,
}

fn bench_rows<T: Scalar>(
    cfg: &RunConfig,
    bench_cfg: &BenchConfig,
    args: &BenchArgs,
    short: &str,
) -> Result<Vec<BenchRow>> {
    let model = build_model::<T>(cfg)?;
    let routers = if args.folded { Some(model.fold()?) } else { None };
    let label = if args.folded { format!("{short}+folded") } else { short.to_string() };
    let mut rows = bench_forward(
        &model,
        &cfg.data,
        &cfg.schedule,
        bench_cfg,
        cfg.train.seed,
        &label,
        routers.as_deref(),
    )?;
    if args.baseline {
        let mut empty =
            PruningSchedule::empty(cfg.schedule.depth, cfg.schedule.m0, cfg.schedule.cls);
        empty.llf = cfg.schedule.llf;
        rows.extend(bench_forward(
            &model,
            &cfg.data,
            &empty,
            bench_cfg,
            cfg.train.seed,
            &format!("{short}+unpruned"),
            None,
        )?);
    }
    Ok(rows)
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let mut bench_cfg = cfg.bench.clone();
    if let Some(i) = args.iters {
        bench_cfg.iters = i;
    }
    if let Some(w) = args.warmup {
        bench_cfg.warmup = w;
    }
    if let Some(spec) = &args.batches {
        bench_cfg.batch_sizes = spec
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CroprError::config(format!("bad batch size {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
    }
    bench_cfg.validate()?;
    let hash = cfg.hash_hex();
    let short = cfg.short_hash();
    let out_dir =
        args.out_dir.clone().unwrap_or_else(|| PathBuf::from(format!("runs/bench-{short}")));
    fs::create_dir_all(&out_dir)?;

    let mut csv = header_lines(
        "bench",
        &hash,
        &[
            ("task", task_label(&cfg.data).to_string()),
            ("selector", selector_label(&cfg.model.selector).to_string()),
            ("fusion", fusion_label(cfg.model.fusion).to_string()),
            ("warmup", bench_cfg.warmup.to_string()),
            ("seed", cfg.train.seed.to_string()),
        ],
    );
    csv.push_str("config,precision,batch,iters,mean_ms,p50_ms,p95_ms,imgs_per_s\n");
    for (precision, rows) in [
        ("f64", bench_rows::<f64>(&cfg, &bench_cfg, &args, &short)?),
        ("f32", bench_rows::<f32>(&cfg, &bench_cfg, &args, &short)?),
    ] {
        for row in rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                row.label,
                precision,
                row.batch,
                row.stats.iters,
                row.stats.mean_ms,
                row.stats.p50_ms,
                row.stats.p95_ms,
                row.imgs_per_s
            );
            println!(
                "{} {} batch {:>2}: p50 {:.3} ms, p95 {:.3} ms, {:.1} imgs/s",
                row.label, precision, row.batch, row.stats.p50_ms, row.stats.p95_ms, row.imgs_per_s
            );
        }
    }
    fs::write(out_dir.join("bench.csv"), &csv)?;
    println!("wrote {}", out_dir.join("bench.csv").display());

    if !args.no_router {
        let mut rcsv = header_lines(
            "router-bench",
            &hash,
            &[(
                "note",
                "per-module routing: score + top-k + split; folded scorer adds one dot \
                 product per token"
                    .to_string(),
            )],
        );
        rcsv.push_str("m,d,k,precision,iters,folded_ns,random_ns,ratio,mults\n");
        for precision in ["f64", "f32"] {
            let r = match precision {
                "f64" => bench_router::<f64>(
                    args.router_m,
                    args.router_d,
                    args.router_iters,
                    cfg.train.seed,
                )?,
                _ => bench_router::<f32>(
                    args.router_m,
                    args.router_d,
                    args.router_iters,
                    cfg.train.seed,
                )?,
            };
            let _ = writeln!(
                rcsv,
                "{},{},{},{},{},{},{},{},{}",
                r.m,
                r.d,
                r.k,
                precision,
                r.iters,
                r.folded_ns,
                r.random_ns,
                r.ratio(),
                r.mults
            );
            println!(
                "router {precision} (M={}, D={}, K={}): folded {:.0} ns vs random {:.0} ns \
                 per module (ratio {:.3}, {} mults)",
                r.m,
                r.d,
                r.k,
                r.folded_ns,
                r.random_ns,
                r.ratio(),
                r.mults
            );
        }
        fs::write(out_dir.join("router.csv"), &rcsv)?;
        println!("wrote {}", out_dir.join("router.csv").display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// `cropr heatmap`

#[derive(Debug, Args)]
struct HeatmapArgs {
    /// Checkpoint to inspect (training or folded).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of eval-set images to render.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Image-stream seed (default: the run config's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: runs/heatmap-<config hash>).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Grey level for one patch: survivors are white, pruned patches darken
/// with how early routing dropped them.
fn stage_shade(pruned_at: Option<usize>, block_rank: &BTreeMap<usize, usize>) -> u32 {
    match pruned_at {
        None => 255,
        Some(block) => {
            let rank = block_rank.get(&block).copied().unwrap_or(0) as u32;
            (rank + 1) * 255 / (block_rank.len() as u32 + 1)
        }
    }
}

fn cmd_heatmap(args: HeatmapArgs) -> Result<()> {
    let (cfg, model, routers, _ckpt) = load_model_any(&args.checkpoint)?;
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let hash = cfg.hash_hex();
    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/heatmap-{}", cfg.short_hash())));
    fs::create_dir_all(&out_dir)?;
    let m0 = cfg.schedule.m0;
    let side = cfg.model.vit.patches_per_side();

    let mut csv = header_lines(
        "heatmap",
        &hash,
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("selector", selector_label(&cfg.model.selector).to_string()),
            ("seed", seed.to_string()),
            ("images", args.count.to_string()),
            ("grid", format!("{side}x{side}")),
        ],
    );
    csv.push_str("image,position,row,col,pruned_after_block,shade\n");

    for i in 0..args.count {
        let (_, out) = forward_for_inspection(&model, &routers, &cfg, seed, i)?;
        let map = out.trace.prune_stage_map(m0)?;
        // Prune events in block order; rank 0 is the earliest (darkest).
        let block_rank: BTreeMap<usize, usize> = out
            .trace
            .stages
            .iter()
            .enumerate()
            .map(|(rank, s)| (s.block, rank))
            .collect();

        let mut pgm = String::new();
        let _ = writeln!(pgm, "P2");
        let _ = writeln!(pgm, "# cropr heatmap v1");
        let _ = writeln!(pgm, "# version {VERSION}");
        // PGM readers expect lines under 70 characters, so the comment
        // carries the short config hash rather than the full digest.
        let _ = writeln!(pgm, "# config {}", cfg.short_hash());
        let _ = writeln!(pgm, "# image {i} seed {seed}");
        let _ = writeln!(pgm, "{side} {side}");
        let _ = writeln!(pgm, "255");
        for (p, pruned_at) in map.iter().enumerate() {
            let shade = stage_shade(*pruned_at, &block_rank);
            let block = pruned_at.map(|b| b.to_string()).unwrap_or_default();
            let _ = writeln!(csv, "{i},{p},{},{},{block},{shade}", p / side, p % side);
            // PGM pixels, at most 16 per line to respect the format's
            // 70-character line limit.
            let _ = write!(pgm, "{shade}");
            pgm.push(if p % side == side - 1 || p % 16 == 15 { '\n' } else { ' ' });
        }
        if !pgm.ends_with('\n') {
            pgm.push('\n');
        }
        let path = out_dir.join(format!("heatmap_{i:03}.pgm"));
        fs::write(&path, &pgm)?;
        let kept = map.iter().filter(|m| m.is_none()).count();
        println!("image {i}: kept {kept} of {m0} patches -> {}", path.display());
    }
    fs::write(out_dir.join("heatmap.csv"), &csv)?;

    let stages = cfg.schedule.effective_entries();
    if stages.is_empty() {
        println!("no pruning stages: maps are uniform");
    } else {
        let pretty: Vec<String> =
            stages.iter().map(|(block, r)| format!("block {block}: {r}")).collect();
        println!("pruned per stage: {}", pretty.join(", "));
    }
    println!("wrote {}", out_dir.join("heatmap.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// `cropr export-tokens`

#[derive(Debug, Args)]
struct ExportTokensArgs {
    /// Checkpoint to inspect (training or folded).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of eval-set images to dump.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Image-stream seed (default: the run config's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: runs/tokens-<config hash>).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn cmd_export_tokens(args: ExportTokensArgs) -> Result<()> {
    let (cfg, model, routers, _ckpt) = load_model_any(&args.checkpoint)?;
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/tokens-{}", cfg.short_hash())));
    fs::create_dir_all(&out_dir)?;
    let m0 = cfg.schedule.m0;
    let dim = cfg.model.vit.width;

    let mut bin: Vec<u8> = Vec::with_capacity(args.count * m0 * (8 + dim * 8));
    for i in 0..args.count {
        let (_, out) = forward_for_inspection(&model, &routers, &cfg, seed, i)?;
        let rows = out.token_rows(m0)?;
        for row in &rows {
            // Tag 0 marks a survivor; tag b > 0 means pruned after block b
            // (blocks are 1-based, so 0 is never a prune point).
            let tag = row.pruned_at.map(|b| b as u64).unwrap_or(0);
            bin.extend_from_slice(&tag.to_le_bytes());
            if row.values.len() != dim {
                return Err(CroprError::contract(format!(
                    "token row has {} values, expected {dim}",
                    row.values.len()
                )));
            }
            for v in &row.values {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    let mut header = String::new();
    let _ = writeln!(header, "croprtokens v1");
    let _ = writeln!(header, "version {VERSION}");
    let _ = writeln!(header, "config {}", cfg.hash_hex());
    let _ = writeln!(header, "images {}", args.count);
    let _ = writeln!(header, "m0 {m0}");
    let _ = writeln!(header, "dim {dim}");
    let _ = writeln!(header, "dtype f64");
    let _ = writeln!(header, "seed {seed}");
    let _ = writeln!(header, "tags 0=kept b=pruned-after-block-b");
    fs::write(out_dir.join("header.txt"), &header)?;
    fs::write(out_dir.join("tokens.bin"), &bin)?;

    println!(
        "dumped {} images x {m0} tokens x {dim} dims ({} bytes)",
        args.count,
        bin.len()
    );
    println!("wrote {}", out_dir.join("header.txt").display());
    println!("wrote {}", out_dir.join("tokens.bin").display());
    Ok(())
}
