//! Experiment drivers: batch-size sweeps, backend comparisons and
//! instrumented training runs.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::OP_INDEX_ADD;
use crate::profile::{HotspotReport, Profiler};
use crate::scatter::ScatterKind;
use crate::throughput::{summarize, ThroughputSample};
use crate::trainer::{train_corpus, train_corpus_timed, Corpus, TrainConfig, TrainOutcome};

/// CPU stand-in for device utilisation counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EfficiencyMetrics {
    /// Time inside scatter kernels over total training-step time.
    pub parallel_section_fraction: f64,
    /// Worker busy time over worker capacity during those kernels.
    pub mean_worker_utilization: f64,
}

/// Mean rate and σ of a run's samples. Falls back to the single overall
/// rate with σ = 0 when the run was too short for three windows.
fn rate_of(samples: &[ThroughputSample]) -> (f64, f64) {
    match summarize(samples) {
        Ok(s) => (s.mean, s.sigma),
        Err(_) => {
            let ex: usize = samples.iter().map(|s| s.window_examples).sum();
            let t: f64 = samples.iter().map(|s| s.window_time).sum();
            if t > 0.0 {
                (ex as f64 / t, 0.0)
            } else {
                (0.0, 0.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub batch_size: usize,
    pub mean_rate: f64,
    pub rate_sigma: f64,
    /// Examples consumed before the threshold was met, or before the update
    /// cap when it was not.
    pub examples_to_converge: usize,
    pub wall_s_to_converge: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Sizes whose run failed, with the error text.
    pub failures: Vec<(usize, String)>,
}

pub const SWEEP_CSV_HEADER: &str =
    "batch_size,mean_rate,rate_sigma,examples_to_converge,wall_s_to_converge,converged";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.3},{:.3},{},{:.6},{}",
                r.batch_size, r.mean_rate, r.rate_sigma, r.examples_to_converge, r.wall_s_to_converge, r.converged
            );
        }
        out
    }

    pub fn row(&self, batch_size: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.batch_size == batch_size)
    }
}

pub const PAPER_SWEEP_SIZES: [usize; 6] = [16, 32, 64, 128, 256, 512];

/// Train once per batch size with everything else held fixed, learning
/// rate included. A failing size is recorded and the sweep continues.
pub fn sweep_batch_sizes(base: &TrainConfig, corpus: &Corpus, sizes: &[usize]) -> Result<SweepResult> {
    if sizes.is_empty() {
        return Err(Error::Config("sweep needs at least one batch size".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sweep batch sizes must be strictly increasing".into()));
    }
    let mut result = SweepResult::default();
    for &b in sizes {
        let cfg = TrainConfig {
            batch_size: b,
            ..base.clone()
        };
        match train_corpus(corpus, &cfg) {
            Ok(out) => {
                let (mean_rate, rate_sigma) = rate_of(&out.throughput);
                result.rows.push(SweepRow {
                    batch_size: b,
                    mean_rate,
                    rate_sigma,
                    examples_to_converge: out.record.examples_seen,
                    wall_s_to_converge: out.record.wall_time,
                    converged: out.record.converged,
                });
            }
            Err(e) => result.failures.push((b, e.to_string())),
        }
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BackendRow {
    pub strategy: ScatterKind,
    pub threads: usize,
    pub mean_rate: f64,
    pub rate_sigma: f64,
    pub speedup_vs_serial: f64,
    /// Largest elementwise `|C - C_serial| / max(|C_serial|, 1e-6)` over the
    /// final embedding table.
    pub max_rel_diff: f64,
    pub matches_serial: bool,
}

pub const BACKEND_CSV_HEADER: &str = "strategy,threads,mean_rate,rate_sigma,speedup_vs_serial,max_rel_diff,matches_serial";

pub fn backends_to_csv(rows: &[BackendRow]) -> String {
    let mut out = format!("{BACKEND_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.3},{:.3},{:.4},{:.3e},{}",
            r.strategy, r.threads, r.mean_rate, r.rate_sigma, r.speedup_vs_serial, r.max_rel_diff, r.matches_serial
        );
    }
    out
}

/// Relative tolerance for end-of-run embedding agreement between backends.
pub const BACKEND_TOLERANCE: f64 = 1e-5;

/// Run the same configuration under each scatter backend. The serial run
/// is always performed first and is the speedup and agreement baseline.
pub fn compare_backends(cfg: &TrainConfig, corpus: &Corpus, strategies: &[ScatterKind]) -> Result<Vec<BackendRow>> {
    let run = |kind: ScatterKind| -> Result<TrainOutcome> {
        train_corpus(
            corpus,
            &TrainConfig {
                strategy: kind,
                ..cfg.clone()
            },
        )
    };
    let baseline = run(ScatterKind::Serial)?;
    let (base_rate, base_sigma) = rate_of(&baseline.throughput);
    let mut rows = Vec::new();
    for &kind in strategies {
        let (out, rate, sigma) = if kind == ScatterKind::Serial {
            (None, base_rate, base_sigma)
        } else {
            let out = run(kind)?;
            let (r, s) = rate_of(&out.throughput);
            (Some(out), r, s)
        };
        let emb = out.as_ref().map_or(&baseline.params.embeddings, |o| &o.params.embeddings);
        let max_rel_diff = emb
            .data()
            .iter()
            .zip(baseline.params.embeddings.data())
            .map(|(&a, &b)| ((a - b).abs() as f64) / (b.abs() as f64).max(1e-6))
            .fold(0.0, f64::max);
        rows.push(BackendRow {
            strategy: kind,
            threads: if kind == ScatterKind::Serial { 1 } else { cfg.threads },
            mean_rate: rate,
            rate_sigma: sigma,
            speedup_vs_serial: if base_rate > 0.0 { rate / base_rate } else { 0.0 },
            max_rel_diff,
            matches_serial: max_rel_diff <= BACKEND_TOLERANCE,
        });
    }
    Ok(rows)
}

/// An instrumented training run.
#[derive(Clone, Debug)]
pub struct ProfileRun {
    pub report: HotspotReport,
    pub outcome: TrainOutcome,
}

impl ProfileRun {
    /// Whether the scatter-add op is the largest entry.
    pub fn scatter_dominates(&self) -> bool {
        self.report.top().is_some_and(|e| e.op == OP_INDEX_ADD)
    }
}

pub fn profile_training(corpus: &Corpus, cfg: &TrainConfig) -> Result<ProfileRun> {
    let mut profiler = Profiler::new();
    let outcome = train_corpus_timed(corpus, cfg, &mut profiler)?;
    let report = profiler.finish()?;
    Ok(ProfileRun { report, outcome })
}
