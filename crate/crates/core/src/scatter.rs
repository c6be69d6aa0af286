//! Parallel scatter-add kernels.
//!
//! Two conflict policies for duplicate target rows:
//!
//! * [`index_add_atomic`] splits the flattened `(update, column)` element
//!   space across workers, so rows and the cells inside a row are processed
//!   in parallel. Each cell is added with a compare-and-swap loop. Results
//!   match [`index_add_serial`] bit-for-bit when indices are distinct and up
//!   to floating-point reordering otherwise.
//! * [`index_add_sort_segment`] stable-sorts update positions by target row
//!   (a counting sort), then hands disjoint blocks of target rows to workers.
//!   Each row receives its updates in original sequence order, so the result
//!   is bit-identical to the serial kernel for every input and thread count.
//!
//! All kernels validate before mutating and work in place on `w`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::stats;
use crate::tensor::{check_index_add, index_add_serial, IndexVector, Matrix, Real};

/// Work items handed to the pool per worker thread; extra slack evens out
/// blocks that finish early.
const TASKS_PER_THREAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScatterKind {
    Serial,
    #[serde(rename = "atomic")]
    AtomicParallel,
    #[serde(rename = "sortseg")]
    SortSegment,
}

impl ScatterKind {
    pub const ALL: [ScatterKind; 3] = [
        ScatterKind::Serial,
        ScatterKind::AtomicParallel,
        ScatterKind::SortSegment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScatterKind::Serial => "serial",
            ScatterKind::AtomicParallel => "atomic",
            ScatterKind::SortSegment => "sortseg",
        }
    }

    /// Whether repeated runs give bit-identical results.
    pub fn is_deterministic(self) -> bool {
        !matches!(self, ScatterKind::AtomicParallel)
    }
}

impl fmt::Display for ScatterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScatterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(ScatterKind::Serial),
            "atomic" => Ok(ScatterKind::AtomicParallel),
            "sortseg" => Ok(ScatterKind::SortSegment),
            other => Err(Error::Parse(format!(
                "unknown scatter strategy {other:?} (expected serial, atomic or sortseg)"
            ))),
        }
    }
}

/// Which kernel to run and how many workers it may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScatterStrategy {
    kind: ScatterKind,
    threads: usize,
}

impl ScatterStrategy {
    pub fn new(kind: ScatterKind, threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        Ok(ScatterStrategy { kind, threads })
    }

    pub fn serial() -> Self {
        ScatterStrategy {
            kind: ScatterKind::Serial,
            threads: 1,
        }
    }

    pub fn kind(&self) -> ScatterKind {
        self.kind
    }

    /// Worker count; always 1 for [`ScatterKind::Serial`].
    pub fn threads(&self) -> usize {
        match self.kind {
            ScatterKind::Serial => 1,
            _ => self.threads,
        }
    }

    /// Heuristic choice when the caller has no preference.
    ///
    /// Heavy contention (more than four updates per target row) or an
    /// unknown duplicate rate selects the sort-segment kernel; otherwise the
    /// atomic kernel.
    pub fn auto(duplicate_fraction: Option<f64>, updates: usize, target_rows: usize) -> Self {
        let contended = target_rows == 0 || updates as f64 / target_rows as f64 > 4.0;
        let kind = if duplicate_fraction.is_none() || contended {
            ScatterKind::SortSegment
        } else {
            ScatterKind::AtomicParallel
        };
        ScatterStrategy {
            kind,
            threads: default_threads(updates),
        }
    }

    pub fn apply<T: Real>(&self, w: &mut Matrix<T>, y: &Matrix<T>, idx: &IndexVector) -> Result<()> {
        match self.kind {
            ScatterKind::Serial => index_add_serial(w, y, idx),
            ScatterKind::AtomicParallel => index_add_atomic(w, y, idx, self.threads),
            ScatterKind::SortSegment => index_add_sort_segment(w, y, idx, self.threads),
        }
    }

    /// As [`ScatterStrategy::apply`], additionally reporting worker busy time.
    pub fn apply_with_stats<T: Real>(
        &self,
        w: &mut Matrix<T>,
        y: &Matrix<T>,
        idx: &IndexVector,
    ) -> Result<KernelStats> {
        match self.kind {
            ScatterKind::Serial => {
                let start = Instant::now();
                index_add_serial(w, y, idx)?;
                let wall = start.elapsed();
                Ok(KernelStats {
                    wall,
                    threads: 1,
                    busy: wall,
                })
            }
            ScatterKind::AtomicParallel => atomic_impl(w, y, idx, self.threads),
            ScatterKind::SortSegment => sort_segment_impl(w, y, idx, self.threads),
        }
    }
}

impl fmt::Display for ScatterStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.kind, self.threads())
    }
}

/// Hardware parallelism, clamped to the number of updates.
pub fn default_threads(updates: usize) -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    hw.min(updates).max(1)
}

/// Timing of one kernel call as seen by the calling thread plus the summed
/// busy time of the work items that ran inside it.
#[derive(Clone, Copy, Debug, Default)]
pub struct KernelStats {
    pub wall: Duration,
    pub threads: usize,
    pub busy: Duration,
}

impl KernelStats {
    /// Share of the available worker time spent doing kernel work, in `[0, 1]`.
    pub fn utilization(&self) -> f64 {
        let capacity = self.wall.as_secs_f64() * self.threads as f64;
        if capacity <= 0.0 {
            return 1.0;
        }
        (self.busy.as_secs_f64() / capacity).clamp(0.0, 1.0)
    }
}

/// Worker pool shared by every parallel kernel, one per thread count.
pub(crate) fn pool(threads: usize) -> Arc<ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS
        .get_or_init(Default::default)
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    pools
        .entry(threads)
        .or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .thread_name(move |i| format!("worker-{threads}-{i}"))
                    .build()
                    .expect("failed to spawn worker pool"),
            )
        })
        .clone()
}

/// Run `tasks` on `threads` workers, or inline when one worker suffices.
fn run_tasks<W: Send>(threads: usize, tasks: Vec<W>, work: impl Fn(W) -> Duration + Sync) -> Duration {
    if threads <= 1 || tasks.len() <= 1 {
        return tasks.into_iter().map(work).sum();
    }
    pool(threads).install(|| tasks.into_par_iter().map(&work).sum())
}

/// Scatter-add with atomic per-cell accumulation.
pub fn index_add_atomic<T: Real>(
    w: &mut Matrix<T>,
    y: &Matrix<T>,
    idx: &IndexVector,
    threads: usize,
) -> Result<()> {
    atomic_impl(w, y, idx, threads).map(|_| ())
}

fn atomic_impl<T: Real>(
    w: &mut Matrix<T>,
    y: &Matrix<T>,
    idx: &IndexVector,
    threads: usize,
) -> Result<KernelStats> {
    check_index_add("index_add_atomic", w, y, idx)?;
    if threads == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    let start = Instant::now();
    let cols = w.cols();
    let total = y.data().len();
    let targets = idx.as_slice();
    let src = y.data();
    let cells = T::as_atomic(w.data_mut());

    let n_tasks = (threads * TASKS_PER_THREAD).min(total.max(1));
    let chunk = total.div_ceil(n_tasks.max(1)).max(1);
    let tasks: Vec<(usize, usize)> = (0..total)
        .step_by(chunk)
        .map(|lo| (lo, (lo + chunk).min(total)))
        .collect();

    let busy = run_tasks(threads, tasks, |(lo, hi)| {
        let t0 = Instant::now();
        let mut e = lo;
        while e < hi {
            let k = e / cols;
            let col = e - k * cols;
            let row_end = ((k + 1) * cols).min(hi);
            let base = targets[k] * cols;
            for (off, &v) in src[e..row_end].iter().enumerate() {
                T::atomic_add(&cells[base + col + off], v);
            }
            e = row_end;
        }
        t0.elapsed()
    });
    Ok(KernelStats {
        wall: start.elapsed(),
        threads,
        busy,
    })
}

/// Scatter-add by stable counting sort on target row followed by parallel
/// per-row accumulation. Bit-identical to [`index_add_serial`].
pub fn index_add_sort_segment<T: Real>(
    w: &mut Matrix<T>,
    y: &Matrix<T>,
    idx: &IndexVector,
    threads: usize,
) -> Result<()> {
    sort_segment_impl(w, y, idx, threads).map(|_| ())
}

/// Stable counting sort of update positions by target row. Returns
/// `(offsets, order)`: the updates for row `r` are
/// `order[offsets[r]..offsets[r + 1]]`, in increasing position.
pub fn segment_by_row(idx: &IndexVector, rows: usize) -> (Vec<usize>, Vec<usize>) {
    let mut offsets = vec![0usize; rows + 1];
    for &r in idx.iter() {
        offsets[r + 1] += 1;
    }
    for r in 0..rows {
        offsets[r + 1] += offsets[r];
    }
    let mut cursor = offsets.clone();
    let mut order = vec![0usize; idx.len()];
    for (k, &r) in idx.iter().enumerate() {
        order[cursor[r]] = k;
        cursor[r] += 1;
    }
    (offsets, order)
}

fn sort_segment_impl<T: Real>(
    w: &mut Matrix<T>,
    y: &Matrix<T>,
    idx: &IndexVector,
    threads: usize,
) -> Result<KernelStats> {
    check_index_add("index_add_sort_segment", w, y, idx)?;
    if threads == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    let start = Instant::now();
    let (rows, cols) = w.shape();
    let (offsets, order) = segment_by_row(idx, rows);

    // Cut row blocks so each carries a similar amount of row + update work.
    let n_tasks = (threads * TASKS_PER_THREAD).min(rows.max(1));
    let weight = |r: usize| offsets[r] + r;
    let per_task = (weight(rows)).div_ceil(n_tasks.max(1)).max(1);
    let mut bounds = vec![0usize];
    for r in 1..rows {
        if weight(r) >= per_task * bounds.len() {
            bounds.push(r);
        }
    }
    bounds.push(rows);

    let mut tasks = Vec::with_capacity(bounds.len() - 1);
    let mut rest = w.data_mut();
    for pair in bounds.windows(2) {
        let (block, tail) = rest.split_at_mut((pair[1] - pair[0]) * cols);
        tasks.push((pair[0], block));
        rest = tail;
    }

    let busy = run_tasks(threads, tasks, |(first_row, block): (usize, &mut [T])| {
        let t0 = Instant::now();
        for (i, dst) in block.chunks_exact_mut(cols).enumerate() {
            let r = first_row + i;
            for &k in &order[offsets[r]..offsets[r + 1]] {
                for (d, &s) in dst.iter_mut().zip(y.row(k)) {
                    *d += s;
                }
            }
        }
        t0.elapsed()
    });
    Ok(KernelStats {
        wall: start.elapsed(),
        threads,
        busy,
    })
}

/// Draw `n` row indices in `0..rows` where roughly `duplicate_fraction` of
/// them repeat an index drawn earlier.
///
/// A pool of `max(1, n - round(n * dup))` fresh rows is sampled, distinct
/// when the pool fits in `rows`. The remaining draws pick uniformly from the
/// pool and the result is shuffled. `duplicate_fraction = 1` therefore
/// yields the all-same-index case.
pub fn random_indices(rows: usize, n: usize, duplicate_fraction: f64, rng: &mut impl Rng) -> IndexVector {
    if n == 0 || rows == 0 {
        return IndexVector::default();
    }
    let n_dup = ((n as f64) * duplicate_fraction.clamp(0.0, 1.0)).round() as usize;
    let n_fresh = n.saturating_sub(n_dup).max(1);
    let mut out: Vec<usize> = if n_fresh <= rows {
        rand::seq::index::sample(rng, rows, n_fresh).into_vec()
    } else {
        (0..n_fresh).map(|_| rng.gen_range(0..rows)).collect()
    };
    for _ in n_fresh..n {
        let pick = out[rng.gen_range(0..n_fresh)];
        out.push(pick);
    }
    out.shuffle(rng);
    IndexVector::new(out)
}

/// Per-element `|w| + Σ|y_k|` over the updates landing on that element.
///
/// Reordering a floating-point sum perturbs it by a multiple of this
/// magnitude, so it is the scale against which the atomic kernel's relative
/// error is measured.
pub fn accumulation_magnitude<T: Real>(w: &Matrix<T>, y: &Matrix<T>, idx: &IndexVector) -> Vec<f64> {
    let cols = w.cols();
    let mut out: Vec<f64> = w.data().iter().map(|v| v.as_f64().abs()).collect();
    for (k, &r) in idx.iter().enumerate() {
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(y.row(k)) {
            *o += v.as_f64().abs();
        }
    }
    out
}

/// Inputs for one scatter microbenchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterBenchConfig {
    pub rows_in_w: usize,
    pub cols: usize,
    pub rows_indexed: usize,
    pub duplicate_fraction: f64,
    pub repetitions: usize,
    pub seed: u64,
}

/// Result of [`bench_index_add`].
#[derive(Clone, Debug)]
pub struct ScatterTiming {
    pub strategy: ScatterStrategy,
    pub rows_indexed: usize,
    /// Sum of the timed repetitions.
    pub wall_time: f64,
    pub repetitions: usize,
    pub mean: f64,
    pub stddev: f64,
    pub config: ScatterBenchConfig,
}

pub const SCATTER_CSV_HEADER: &str =
    "strategy,threads,rows_w,cols,rows_indexed,dup_frac,mean_s,stddev_s,reps,seed";

impl ScatterTiming {
    pub fn csv_row(&self) -> String {
        let c = &self.config;
        format!(
            "{},{},{},{},{},{},{:.9},{:.9},{},{}",
            self.strategy.kind(),
            self.strategy.threads(),
            c.rows_in_w,
            c.cols,
            c.rows_indexed,
            c.duplicate_fraction,
            self.mean,
            self.stddev,
            self.repetitions,
            c.seed
        )
    }
}

/// Deterministic benchmark inputs for a configuration.
pub struct ScatterInputs {
    pub w: Matrix<f32>,
    pub y: Matrix<f32>,
    pub idx: IndexVector,
}

impl ScatterInputs {
    pub fn generate(cfg: &ScatterBenchConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut w = Matrix::try_zeros(cfg.rows_in_w, cfg.cols)?;
        w.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let mut y = Matrix::try_zeros(cfg.rows_indexed, cfg.cols)?;
        y.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let idx = random_indices(cfg.rows_in_w, cfg.rows_indexed, cfg.duplicate_fraction, &mut rng);
        Ok(ScatterInputs { w, y, idx })
    }
}

/// Time a scatter kernel over freshly generated inputs.
///
/// One untimed warm-up call precedes `repetitions` timed calls; `w` is
/// restored from a pristine copy between calls, outside the timed region.
pub fn bench_index_add(cfg: &ScatterBenchConfig, strategy: ScatterStrategy) -> Result<ScatterTiming> {
    let inputs = ScatterInputs::generate(cfg)?;
    bench_with_inputs(cfg, &inputs, strategy)
}

/// [`bench_index_add`] on inputs the caller already generated, so several
/// strategies can share one allocation.
pub fn bench_with_inputs(
    cfg: &ScatterBenchConfig,
    inputs: &ScatterInputs,
    strategy: ScatterStrategy,
) -> Result<ScatterTiming> {
    if cfg.repetitions < 3 {
        return Err(Error::Config("at least 3 repetitions are required".into()));
    }
    if cfg.rows_in_w == 0 || cfg.cols == 0 || cfg.rows_indexed == 0 {
        return Err(Error::Config("benchmark sizes must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.duplicate_fraction) {
        return Err(Error::Config("duplicate fraction must lie in [0, 1]".into()));
    }
    let mut w = Matrix::try_zeros(cfg.rows_in_w, cfg.cols)?;
    let mut samples = Vec::with_capacity(cfg.repetitions);
    for rep in 0..=cfg.repetitions {
        w.data_mut().copy_from_slice(inputs.w.data());
        let start = Instant::now();
        strategy.apply(&mut w, &inputs.y, &inputs.idx)?;
        let elapsed = start.elapsed().as_secs_f64();
        if rep > 0 {
            samples.push(elapsed);
        }
    }
    let (mean, stddev) = stats::mean_and_population_sd(&samples);
    Ok(ScatterTiming {
        strategy,
        rows_indexed: cfg.rows_indexed,
        wall_time: samples.iter().sum(),
        repetitions: cfg.repetitions,
        mean,
        stddev,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn bits(m: &Matrix<f32>) -> Vec<u32> {
        m.data().iter().map(|v| v.to_bits()).collect()
    }

    fn case(seed: u64, rows: usize, cols: usize, n: usize, dup: f64) -> (Matrix<f32>, Matrix<f32>, IndexVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
        let y = Matrix::from_fn(n, cols, |_, _| rng.gen_range(-1.0..1.0));
        let idx = random_indices(rows, n, dup, &mut rng);
        (w, y, idx)
    }

    #[test]
    fn sort_segment_duplicate_heavy_example() {
        let mut w = Matrix::<f32>::zeros(2, 2);
        let y = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![4.0, 0.0], vec![8.0, 0.0]]).unwrap();
        index_add_sort_segment(&mut w, &y, &vec![0, 1, 0, 1].into(), 2).unwrap();
        assert_eq!(w, Matrix::from_rows(&[vec![5.0, 0.0], vec![10.0, 0.0]]).unwrap());
    }

    #[test]
    fn atomic_single_hot_row_sums_exactly() {
        let mut w = Matrix::<f32>::zeros(1, 64);
        let y = Matrix::from_fn(10_000, 64, |_, _| 1.0f32);
        let idx = IndexVector::new(vec![0; 10_000]);
        index_add_atomic(&mut w, &y, &idx, 4).unwrap();
        // serial loop oracle: every cell accumulates 10000 ones
        let mut oracle = Matrix::<f32>::zeros(1, 64);
        for k in 0..10_000 {
            for c in 0..64 {
                let v = oracle.get(0, c) + y.get(k, c);
                oracle.set(0, c, v);
            }
        }
        assert!(oracle.data().iter().all(|&v| v == 10_000.0));
        assert_eq!(w, oracle);
    }

    #[test]
    fn threads_one_matches_serial() {
        let (w0, y, idx) = case(7, 30, 5, 200, 0.5);
        let mut serial = w0.clone();
        index_add_serial(&mut serial, &y, &idx).unwrap();
        for kind in [ScatterKind::AtomicParallel, ScatterKind::SortSegment] {
            let mut w = w0.clone();
            ScatterStrategy::new(kind, 1).unwrap().apply(&mut w, &y, &idx).unwrap();
            assert_eq!(bits(&w), bits(&serial), "{kind}");
        }
    }

    #[test]
    fn precondition_failures_leave_w_unchanged() {
        let (w0, y, _) = case(8, 10, 4, 6, 0.0);
        let bad_idx = IndexVector::new(vec![0, 1, 2, 3, 4, 10]);
        for kind in ScatterKind::ALL {
            let strategy = ScatterStrategy::new(kind, 3).unwrap();
            let mut w = w0.clone();
            assert!(matches!(strategy.apply(&mut w, &y, &bad_idx), Err(Error::Index { position: 5, .. })));
            assert!(matches!(
                strategy.apply(&mut w, &Matrix::zeros(6, 3), &bad_idx),
                Err(Error::Dimension { .. })
            ));
            assert_eq!(bits(&w), bits(&w0));
        }
        assert!(ScatterStrategy::new(ScatterKind::SortSegment, 0).is_err());
    }

    #[test]
    fn empty_updates_are_noops() {
        let (w0, _, _) = case(9, 5, 3, 0, 0.0);
        for kind in ScatterKind::ALL {
            let mut w = w0.clone();
            ScatterStrategy::new(kind, 4)
                .unwrap()
                .apply(&mut w, &Matrix::zeros(0, 3), &IndexVector::default())
                .unwrap();
            assert_eq!(w, w0);
        }
    }

    #[test]
    fn random_indices_duplicate_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let distinct = random_indices(100, 80, 0.0, &mut rng);
        let set: std::collections::HashSet<_> = distinct.iter().collect();
        assert_eq!(set.len(), 80);

        let same = random_indices(100, 50, 1.0, &mut rng);
        assert!(same.iter().all(|&i| i == same.as_slice()[0]));

        let half = random_indices(1000, 400, 0.5, &mut rng);
        let set: std::collections::HashSet<_> = half.iter().collect();
        assert_eq!(set.len(), 200);
    }

    #[test]
    fn auto_selection() {
        assert_eq!(ScatterStrategy::auto(None, 10, 100).kind(), ScatterKind::SortSegment);
        assert_eq!(ScatterStrategy::auto(Some(0.1), 1000, 100).kind(), ScatterKind::SortSegment);
        assert_eq!(ScatterStrategy::auto(Some(0.1), 100, 100).kind(), ScatterKind::AtomicParallel);
        assert!(ScatterStrategy::auto(Some(0.0), 1, 100).threads() == 1);
    }

    #[test]
    fn kernel_stats_utilization_bounded() {
        let (w0, y, idx) = case(10, 50, 16, 400, 0.5);
        for kind in ScatterKind::ALL {
            let mut w = w0.clone();
            let s = ScatterStrategy::new(kind, 3).unwrap().apply_with_stats(&mut w, &y, &idx).unwrap();
            let u = s.utilization();
            assert!((0.0..=1.0).contains(&u));
        }
    }

    #[test]
    fn bench_is_deterministic_and_validated() {
        let cfg = ScatterBenchConfig {
            rows_in_w: 200,
            cols: 8,
            rows_indexed: 500,
            duplicate_fraction: 0.5,
            repetitions: 3,
            seed: 11,
        };
        let a = ScatterInputs::generate(&cfg).unwrap();
        let b = ScatterInputs::generate(&cfg).unwrap();
        assert_eq!((a.w, a.y, a.idx), (b.w, b.y, b.idx));

        let t = bench_index_add(&cfg, ScatterStrategy::serial()).unwrap();
        assert!(t.mean > 0.0 && t.stddev >= 0.0 && t.repetitions == 3);
        assert_eq!(t.csv_row().split(',').count(), SCATTER_CSV_HEADER.split(',').count());
        assert!(t.csv_row().starts_with("serial,1,200,8,500,0.5,"));

        let short = ScatterBenchConfig { repetitions: 2, ..cfg.clone() };
        assert!(bench_index_add(&short, ScatterStrategy::serial()).is_err());
    }

    #[test]
    fn huge_request_reports_bytes() {
        let cfg = ScatterBenchConfig {
            rows_in_w: usize::MAX / 64,
            cols: 16,
            rows_indexed: 1,
            duplicate_fraction: 0.0,
            repetitions: 3,
            seed: 0,
        };
        assert!(matches!(ScatterInputs::generate(&cfg), Err(Error::Resource { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn sort_segment_bit_identical_to_serial(
            seed in any::<u64>(),
            rows in 1usize..40,
            cols in 1usize..9,
            n in 0usize..300,
            dup in prop::sample::select(vec![0.0, 0.3, 0.5, 0.9, 1.0]),
            threads in 1usize..9,
        ) {
            let (w0, y, idx) = case(seed, rows, cols, n, dup);
            let mut serial = w0.clone();
            index_add_serial(&mut serial, &y, &idx).unwrap();
            let mut w = w0.clone();
            index_add_sort_segment(&mut w, &y, &idx, threads).unwrap();
            prop_assert_eq!(bits(&w), bits(&serial));
        }

        #[test]
        fn atomic_within_tolerance_and_exact_when_distinct(
            seed in any::<u64>(),
            rows in 1usize..40,
            cols in 1usize..9,
            n in 0usize..300,
            dup in prop::sample::select(vec![0.0, 0.5, 1.0]),
            threads in 1usize..9,
        ) {
            let (w0, y, idx) = case(seed, rows, cols, n, dup);
            let mut serial = w0.clone();
            index_add_serial(&mut serial, &y, &idx).unwrap();
            let mut w = w0.clone();
            index_add_atomic(&mut w, &y, &idx, threads).unwrap();
            let distinct = idx.iter().collect::<std::collections::HashSet<_>>().len() == idx.len();
            if distinct {
                prop_assert_eq!(bits(&w), bits(&serial));
            } else {
                let scale = accumulation_magnitude(&w0, &y, &idx);
                for ((a, b), s) in w.data().iter().zip(serial.data()).zip(scale) {
                    prop_assert!(((*a - *b) as f64).abs() <= 1e-5 * s);
                }
            }
        }
    }
}
