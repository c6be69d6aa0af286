//! Training-rate sampling in fixed windows of examples.

use std::cell::Cell;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::stats::mean_and_population_sd;

/// Examples per sampling window unless configured otherwise.
pub const DEFAULT_WINDOW_EXAMPLES: usize = 2048;

pub trait Clock {
    /// Monotonic time since an arbitrary origin.
    fn now(&self) -> Duration;
}

#[derive(Clone, Copy, Debug)]
pub struct MonotonicClock(Instant);

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock(Instant::now())
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// Clock advanced by hand, for deterministic tests.
#[derive(Debug, Default)]
pub struct ManualClock(Cell<Duration>);

impl ManualClock {
    pub fn advance(&self, by: Duration) {
        self.0.set(self.0.get() + by);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        self.0.get()
    }
}

impl<C: Clock + ?Sized> Clock for &C {
    fn now(&self) -> Duration {
        (**self).now()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThroughputSample {
    pub window_examples: usize,
    pub window_time: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputSummary {
    pub mean: f64,
    /// Population standard deviation across windows.
    pub sigma: f64,
    pub samples: Vec<ThroughputSample>,
}

/// Accumulates examples and closes a sample each time a window fills.
///
/// Time spent paused (for evaluation, say) is excluded from the window.
#[derive(Debug)]
pub struct ThroughputMeter<C: Clock> {
    clock: C,
    window_size: usize,
    window_start: Duration,
    window_examples: usize,
    paused_at: Option<Duration>,
    samples: Vec<ThroughputSample>,
}

impl<C: Clock> ThroughputMeter<C> {
    pub fn new(window_size: usize, clock: C) -> Self {
        let window_start = clock.now();
        ThroughputMeter {
            clock,
            window_size: window_size.max(1),
            window_start,
            window_examples: 0,
            paused_at: None,
            samples: Vec::new(),
        }
    }

    /// Restart the current window at the present instant.
    pub fn reset_window(&mut self) {
        self.window_start = self.clock.now();
        self.window_examples = 0;
    }

    pub fn record(&mut self, examples: usize) {
        self.window_examples += examples;
        if self.window_examples >= self.window_size {
            let now = self.clock.now();
            let t = (now - self.window_start).as_secs_f64();
            if t > 0.0 {
                self.samples.push(ThroughputSample {
                    window_examples: self.window_examples,
                    window_time: t,
                    rate: self.window_examples as f64 / t,
                });
            }
            self.window_start = now;
            self.window_examples = 0;
        }
    }

    pub fn pause(&mut self) {
        if self.paused_at.is_none() {
            self.paused_at = Some(self.clock.now());
        }
    }

    pub fn resume(&mut self) {
        if let Some(p) = self.paused_at.take() {
            self.window_start += self.clock.now() - p;
        }
    }

    pub fn samples(&self) -> &[ThroughputSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<ThroughputSample> {
        self.samples
    }
}

/// Mean and σ of completed windows; needs at least three.
pub fn summarize(samples: &[ThroughputSample]) -> Result<ThroughputSummary> {
    if samples.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "throughput needs at least 3 sampling windows, got {}",
            samples.len()
        )));
    }
    let rates: Vec<f64> = samples.iter().map(|s| s.rate).collect();
    let (mean, sigma) = mean_and_population_sd(&rates);
    Ok(ThroughputSummary {
        mean,
        sigma,
        samples: samples.to_vec(),
    })
}

/// Drive `source` until it returns `None`, sampling its rate.
///
/// Each call to `source` does one unit of work and reports how many
/// examples it processed.
pub fn measure_throughput<C: Clock>(
    window_size: usize,
    clock: C,
    mut source: impl FnMut() -> Option<usize>,
) -> Result<ThroughputSummary> {
    let mut meter = ThroughputMeter::new(window_size, clock);
    while let Some(n) = source() {
        meter.record(n);
    }
    summarize(meter.samples())
}
