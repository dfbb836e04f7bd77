//! Wall-clock measurement: end-to-end forward passes and the folded
//! router's per-module routing cost.
//!
//! All timings use the monotonic clock, exclude warmup passes, and are
//! collected per image so percentiles are meaningful. Wall-clock numbers
//! vary with the host; tests that compare them leave generous margins and
//! the analytic cost model in [`crate::flops`] stays the source of truth
//! for work ratios.

use std::time::{Duration, Instant};

use rand::Rng;

use crate::config::BenchConfig;
use crate::cropr::{top_k_rows, FoldedRouter};
use crate::error::{CroprError, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::schedule::PruningSchedule;
use crate::synth::stream_rng;
use crate::train::TaskData;

/// Latency summary over individually timed passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub iters: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over the sorted samples.
    pub fn from_durations(times: &[Duration]) -> Result<Self> {
        if times.is_empty() {
            return Err(CroprError::contract("no timing samples"));
        }
        let mut ms: Vec<f64> = times.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
        let rank = |p: f64| -> f64 {
            let idx = (p * ms.len() as f64).ceil() as usize;
            ms[idx.clamp(1, ms.len()) - 1]
        };
        Ok(LatencyStats {
            iters: ms.len(),
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p50_ms: rank(0.50),
            p95_ms: rank(0.95),
        })
    }
}

/// One CSV row: a (configuration, batch size) pair. Latency percentiles
/// are per image; throughput amortizes over chunks of `batch` images.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub label: String,
    pub batch: usize,
    pub stats: LatencyStats,
    pub imgs_per_s: f64,
}

/// Time `cfg.iters` forward passes of `model` under `schedule`, reported
/// once per configured batch size. Example generation happens up front and
/// is never on the clock.
pub fn bench_forward<T: Scalar>(
    model: &Model<T>,
    data: &TaskData,
    schedule: &PruningSchedule,
    cfg: &BenchConfig,
    seed: u64,
    label: &str,
    folded: Option<&[FoldedRouter<T>]>,
) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    // A handful of distinct images, cycled; more would only measure the
    // generator.
    let distinct = cfg.iters.min(8).max(1);
    let examples: Vec<_> = (0..distinct)
        .map(|i| data.example::<T>(seed, i as u64))
        .collect::<Result<_>>()?;
    let tape = model.tape().clone();
    let mut rng = stream_rng(seed ^ 0xBE4C, 0);

    let mut run = |i: usize| -> Result<Duration> {
        let ex = &examples[i % distinct];
        tape.restart();
        let start = Instant::now();
        match folded {
            Some(routers) => model.forward_folded(ex, schedule, routers)?,
            None => model.forward_eval_rng(ex, schedule, &mut rng)?,
        };
        Ok(start.elapsed())
    };

    for i in 0..cfg.warmup {
        run(i)?;
    }
    let mut times = Vec::with_capacity(cfg.iters);
    for i in 0..cfg.iters {
        times.push(run(i)?);
    }
    let stats = LatencyStats::from_durations(&times)?;

    // Throughput per chunk size: a chunk's rate is its image count over
    // its summed time; sizes that never fit the measured passes are errors
    // rather than silently missing rows.
    let mut rows = Vec::with_capacity(cfg.batch_sizes.len());
    for &b in &cfg.batch_sizes {
        let chunks = times.len() / b;
        if chunks == 0 {
            return Err(CroprError::config(format!(
                "batch size {b} does not fit {} measured passes",
                times.len()
            )));
        }
        let mut rate_sum = 0.0;
        for c in 0..chunks {
            let chunk_time: f64 =
                times[c * b..(c + 1) * b].iter().map(Duration::as_secs_f64).sum();
            rate_sum += b as f64 / chunk_time;
        }
        rows.push(BenchRow {
            label: label.to_string(),
            batch: b,
            stats,
            imgs_per_s: rate_sum / chunks as f64,
        });
    }
    Ok(rows)
}

/// Per-module routing cost at one pruning point: everything a module adds
/// to the forward pass — scoring, Top-K selection, and splitting the token
/// buffer into keep/prune halves. Selection and splitting are identical in
/// both arms, so the folded-vs-random ratio isolates what the learned
/// dot-product scorer actually costs over the cheapest possible selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouterBench {
    pub m: usize,
    pub d: usize,
    /// Tokens kept per pass (m/2, a mid-network stage).
    pub k: usize,
    pub iters: usize,
    pub folded_ns: f64,
    pub random_ns: f64,
    /// Multiplications one folded scoring pass performs (always m*d).
    pub mults: usize,
}

impl RouterBench {
    pub fn ratio(&self) -> f64 {
        self.folded_ns / self.random_ns
    }
}

/// Route `m` tokens of width `d` repeatedly with both selectors.
pub fn bench_router<T: Scalar>(m: usize, d: usize, iters: usize, seed: u64) -> Result<RouterBench> {
    if m < 2 || d == 0 || iters == 0 {
        return Err(CroprError::config("router bench needs m >= 2, d >= 1, iters >= 1"));
    }
    let mut rng = stream_rng(seed, 0);
    let tokens: Vec<T> =
        (0..m * d).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect();
    let router = FoldedRouter {
        qbar: (0..d).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect(),
    };
    let k = m / 2;

    let (_, mults) = router.score_counted(&tokens, m, true)?;

    // The selector-independent tail of a routing module: pick the keep set
    // and physically partition the token rows for the downstream blocks.
    let mut keep_buf = vec![T::zero(); k * d];
    let mut prune_buf = vec![T::zero(); (m - k) * d];
    let select_and_split =
        |scores: &[T], keep_buf: &mut [T], prune_buf: &mut [T]| -> Result<T> {
            let (keep, prune) = top_k_rows(scores, k)?;
            for (slot, &row) in keep.iter().enumerate() {
                keep_buf[slot * d..(slot + 1) * d]
                    .copy_from_slice(&tokens[row * d..(row + 1) * d]);
            }
            for (slot, &row) in prune.iter().enumerate() {
                prune_buf[slot * d..(slot + 1) * d]
                    .copy_from_slice(&tokens[row * d..(row + 1) * d]);
            }
            Ok(keep_buf[0] + prune_buf[prune_buf.len() - 1])
        };

    let start = Instant::now();
    let mut sink = T::zero();
    for _ in 0..iters {
        let scores = router.score(&tokens, m, true)?;
        sink = sink + select_and_split(&scores, &mut keep_buf, &mut prune_buf)?;
    }
    let folded_ns = start.elapsed().as_secs_f64() * 1e9 / iters as f64;

    let start = Instant::now();
    for _ in 0..iters {
        let mut scores: Vec<T> = crate::selectors::random_score(m, &mut rng);
        scores[0] = T::infinity();
        sink = sink + select_and_split(&scores, &mut keep_buf, &mut prune_buf)?;
    }
    let random_ns = start.elapsed().as_secs_f64() * 1e9 / iters as f64;
    // Keep the sink live so the measured loops cannot be optimized away.
    if !sink.to_f64().is_finite() && !sink.to_f64().is_nan() {
        return Err(CroprError::contract("benchmark sink diverged"));
    }

    Ok(RouterBench { m, d, k, iters, folded_ns, random_ns, mults })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FusionKind, ModelConfig, SelectorChoice};
    use crate::synth::NeedleSpec;
    use crate::tensor::Tape;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn percentiles_use_nearest_rank() {
        let times: Vec<Duration> = (1..=20).map(Duration::from_millis).collect();
        let stats = LatencyStats::from_durations(&times).unwrap();
        assert_eq!(stats.iters, 20);
        assert!((stats.p50_ms - 10.0).abs() < 1e-9);
        assert!((stats.p95_ms - 19.0).abs() < 1e-9);
        assert!((stats.mean_ms - 10.5).abs() < 1e-9);

        let one = LatencyStats::from_durations(&[Duration::from_millis(4)]).unwrap();
        assert_eq!(one.p50_ms, one.p95_ms);
        assert!(LatencyStats::from_durations(&[]).is_err());
    }

    fn toy_model(schedule: PruningSchedule) -> (Tape<f64>, Model<f64>, TaskData) {
        let data = TaskData::Needle(NeedleSpec::toy());
        let mut vit = data.toy_backbone();
        vit.depth = 4;
        let config = ModelConfig {
            task: data.task_kind(),
            vit,
            selector: SelectorChoice::Cropr { invert: false },
            fusion: FusionKind::None,
            variants: Default::default(),
        };
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(&tape, &mut rng, config, schedule).unwrap();
        (tape, model, data)
    }

    #[test]
    fn forward_bench_emits_one_row_per_batch_size() {
        let schedule = PruningSchedule::per_block(4, 64, 16, false, true).unwrap();
        let (_tape, model, data) = toy_model(schedule);
        let cfg = BenchConfig { warmup: 1, iters: 5, batch_sizes: vec![1, 2] };
        let rows =
            bench_forward(&model, &data, &model.schedule, &cfg, 3, "pruned", None).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].batch, rows[1].batch), (1, 2));
        for row in &rows {
            assert_eq!(row.stats.iters, 5);
            assert!(row.stats.p50_ms > 0.0);
            assert!(row.stats.p95_ms >= row.stats.p50_ms);
            assert!(row.imgs_per_s > 0.0);
            assert_eq!(row.label, "pruned");
        }

        // A batch size larger than the measured passes cannot be reported.
        let none = BenchConfig { warmup: 0, iters: 3, batch_sizes: vec![50] };
        assert!(bench_forward(&model, &data, &model.schedule, &none, 3, "x", None).is_err());
    }

    #[test]
    fn pruning_buys_wall_clock_time() {
        // Same weights, two schedules: dropping 48 of 64 patches by block 3
        // must beat processing everything, with a wide safety margin.
        let schedule = PruningSchedule::per_block(4, 64, 16, false, true).unwrap();
        let (_tape, model, data) = toy_model(schedule.clone());
        let cfg = BenchConfig { warmup: 2, iters: 8, batch_sizes: vec![1] };
        let pruned =
            bench_forward(&model, &data, &schedule, &cfg, 5, "pruned", None).unwrap();
        let empty = PruningSchedule::empty(4, 64, true);
        let full = bench_forward(&model, &data, &empty, &cfg, 5, "unpruned", None).unwrap();
        assert!(
            pruned[0].imgs_per_s > full[0].imgs_per_s,
            "pruned {:.1} imgs/s should beat unpruned {:.1} imgs/s",
            pruned[0].imgs_per_s,
            full[0].imgs_per_s
        );
    }

    #[test]
    fn folded_router_cost_is_one_dot_product_per_token() {
        let b = bench_router::<f64>(256, 32, 50, 11).unwrap();
        assert_eq!(b.mults, 256 * 32);
        assert!(b.folded_ns > 0.0 && b.random_ns > 0.0);
        assert!(b.ratio().is_finite());
        assert!(bench_router::<f64>(1, 4, 1, 0).is_err());
    }
}
