//! Explicit call-site instrumentation and hotspot reports.
//!
//! An op's time is whatever elapses inside its [`Profiler::instrument`]
//! call. Nested instrumentation is counted in both the inner and the outer
//! op (self time is not subtracted), so a report over nested ops can exceed
//! the run's total and is rejected by [`hotspot_report`].

use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};

/// Anything that can time a named closure. The model's training step is
/// written against this so it can run instrumented or not.
pub trait OpTimer {
    fn time<R>(&mut self, op: &'static str, f: impl FnOnce() -> R) -> R;
}

/// Timer that records nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoProfile;

impl OpTimer for NoProfile {
    #[inline(always)]
    fn time<R>(&mut self, _op: &'static str, f: impl FnOnce() -> R) -> R {
        f()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OpStat {
    pub calls: u64,
    pub total: Duration,
}

/// Per-run registry of op timings.
#[derive(Debug)]
pub struct Profiler {
    started: Instant,
    ops: HashMap<&'static str, OpStat>,
}

impl Default for Profiler {
    fn default() -> Self {
        Self::new()
    }
}

impl Profiler {
    pub fn new() -> Self {
        Profiler {
            started: Instant::now(),
            ops: HashMap::new(),
        }
    }

    pub fn instrument<R>(&mut self, op: &'static str, thunk: impl FnOnce() -> R) -> R {
        let start = Instant::now();
        let out = thunk();
        let elapsed = start.elapsed();
        let stat = self.ops.entry(op).or_default();
        stat.calls += 1;
        stat.total += elapsed;
        out
    }

    /// Like [`Profiler::instrument`] but hands the registry to the thunk so
    /// it can instrument nested ops.
    pub fn scope<R>(&mut self, op: &'static str, thunk: impl FnOnce(&mut Self) -> R) -> R {
        let start = Instant::now();
        let out = thunk(self);
        let elapsed = start.elapsed();
        let stat = self.ops.entry(op).or_default();
        stat.calls += 1;
        stat.total += elapsed;
        out
    }

    pub fn stat(&self, op: &str) -> Option<OpStat> {
        self.ops.get(op).copied()
    }

    pub fn ops(&self) -> impl Iterator<Item = (&'static str, OpStat)> + '_ {
        self.ops.iter().map(|(k, v)| (*k, *v))
    }

    /// Time since the registry was created.
    pub fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }

    /// Report against the registry's own lifetime.
    pub fn finish(&self) -> Result<HotspotReport> {
        hotspot_report(self, self.elapsed())
    }
}

impl OpTimer for Profiler {
    #[inline]
    fn time<R>(&mut self, op: &'static str, f: impl FnOnce() -> R) -> R {
        self.instrument(op, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HotspotEntry {
    pub op: String,
    pub calls: u64,
    pub total_s: f64,
    pub fraction: f64,
    pub per_call_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HotspotReport {
    /// Sorted by `fraction`, largest first.
    pub entries: Vec<HotspotEntry>,
    pub total_s: f64,
    pub unattributed_s: f64,
}

impl HotspotReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hotspot report serialises")
    }

    pub fn top(&self) -> Option<&HotspotEntry> {
        self.entries.first()
    }

    pub fn entry(&self, op: &str) -> Option<&HotspotEntry> {
        self.entries.iter().find(|e| e.op == op)
    }

    /// Fixed-width table with the same three columns as a classic per-op
    /// profiler dump.
    pub fn to_table(&self) -> String {
        let width = self.entries.iter().map(|e| e.op.len()).max().unwrap_or(2).max(2);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>12}  {:>10}\n",
            "op", "fraction", "per call (s)", "calls"
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{:<width$}  {:>7.1}%  {:>12.3e}  {:>10}\n",
                e.op,
                e.fraction * 100.0,
                e.per_call_s,
                e.calls
            ));
        }
        out.push_str(&format!(
            "total {:.3} s, unattributed {:.3} s\n",
            self.total_s, self.unattributed_s
        ));
        out
    }
}

/// Build a report with fractions computed against `total`.
///
/// Fails when the attributed time exceeds `total`, which happens when the
/// total is wrong or ops were nested.
pub fn hotspot_report(registry: &Profiler, total: Duration) -> Result<HotspotReport> {
    let total_s = total.as_secs_f64();
    let attributed: f64 = registry.ops.values().map(|s| s.total.as_secs_f64()).sum();
    if attributed > total_s {
        return Err(Error::Inconsistency(format!(
            "attributed {attributed:.6} s exceeds run total {total_s:.6} s"
        )));
    }
    let mut entries: Vec<HotspotEntry> = registry
        .ops
        .iter()
        .filter(|(_, s)| s.calls > 0)
        .map(|(op, s)| {
            let t = s.total.as_secs_f64();
            HotspotEntry {
                op: (*op).to_string(),
                calls: s.calls,
                total_s: t,
                fraction: if total_s > 0.0 { t / total_s } else { 0.0 },
                per_call_s: t / s.calls as f64,
            }
        })
        .collect();
    entries.sort_by(|a, b| b.fraction.total_cmp(&a.fraction).then_with(|| a.op.cmp(&b.op)));
    Ok(HotspotReport {
        entries,
        total_s,
        unattributed_s: (total_s - attributed).max(0.0),
    })
}
