//! Corpus ingestion, vocabulary, window and batch generation, and the
//! mini-batch SGD loop with convergence detection.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::EfficiencyMetrics;
use crate::model::{Batch, ContextWindow, ModelParams, ModelShape};
use crate::profile::{NoProfile, OpTimer};
use crate::scatter::{default_threads, ScatterKind, ScatterStrategy};
use crate::throughput::{MonotonicClock, ThroughputMeter, ThroughputSample, DEFAULT_WINDOW_EXAMPLES};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Windows held out for validation.
pub const VALIDATION_WINDOWS: usize = 1000;

/// Sentences of lowercased whitespace-separated tokens, one per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    sentences: Vec<Vec<String>>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Self {
        let sentences = text
            .lines()
            .map(|l| l.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .filter(|s| !s.is_empty())
            .collect();
        Corpus { sentences }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Corpus {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_text(&text))
    }

    pub fn sentences(&self) -> &[Vec<String>] {
        &self.sentences
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().flatten().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

/// Token ↔ id bijection with `PAD = 0` and `UNK = 1` reserved.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Rebuild from an id-ordered token list whose first two entries are the
    /// reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Parse("vocabulary must start with <pad> and <unk>".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { ids, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Keep the `cap - 2` most frequent tokens seen at least `min_count` times.
/// Ties go to the token that appeared first.
pub fn build_vocab<'a>(tokens: impl IntoIterator<Item = &'a str>, cap: usize, min_count: usize) -> Result<Vocab> {
    if cap < 3 {
        return Err(Error::Config(format!("vocabulary cap must be at least 3, got {cap}")));
    }
    // token -> (count, first occurrence)
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut n = 0;
    for (pos, t) in tokens.into_iter().enumerate() {
        counts.entry(t).or_insert((0, pos)).0 += 1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Domain("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut ranked: Vec<(&str, usize, usize)> = counts
        .into_iter()
        .filter(|(t, (c, _))| *c >= min_count && *t != PAD_TOKEN && *t != UNK_TOKEN)
        .map(|(t, (c, first))| (t, c, first))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(cap - 2);

    let mut list = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    list.extend(ranked.into_iter().map(|(t, _, _)| t.to_string()));
    Vocab::from_tokens(list)
}

/// One window per token of `sentence`, PAD-extended past either end.
pub fn sentence_windows(sentence: &[usize], n: usize) -> impl Iterator<Item = ContextWindow> + '_ {
    let center = n / 2;
    (0..sentence.len()).map(move |c| {
        ContextWindow(
            (0..n)
                .map(|j| {
                    let pos = c as isize + j as isize - center as isize;
                    if pos < 0 || pos as usize >= sentence.len() {
                        PAD
                    } else {
                        sentence[pos as usize]
                    }
                })
                .collect(),
        )
    })
}

pub fn corpus_windows(corpus: &Corpus, vocab: &Vocab, n: usize) -> Vec<ContextWindow> {
    let mut out = Vec::with_capacity(corpus.token_count());
    for s in corpus.sentences() {
        let ids: Vec<usize> = s.iter().map(|t| vocab.id(t)).collect();
        out.extend(sentence_windows(&ids, n));
    }
    out
}

/// Uniform non-PAD id different from `center`.
pub fn corrupt_center(vocab_size: usize, center: usize, rng: &mut impl Rng) -> usize {
    debug_assert!(vocab_size >= 3);
    loop {
        let c = rng.gen_range(1..vocab_size);
        if c != center {
            return c;
        }
    }
}

pub fn make_batch(positives: Vec<ContextWindow>, vocab_size: usize, rng: &mut impl Rng) -> Result<Batch> {
    let negatives = positives
        .iter()
        .map(|p| p.corrupted(corrupt_center(vocab_size, p.0[p.center()], rng)))
        .collect();
    Batch::new(positives, negatives)
}

/// Consecutive batches over a fixed window list, drawing a fresh negative
/// for every positive. The last batch of a pass may be short.
#[derive(Debug)]
pub struct BatchStream<R> {
    windows: Vec<ContextWindow>,
    pos: usize,
    batch_size: usize,
    vocab_size: usize,
    rng: R,
    cycle: bool,
}

impl<R: Rng> BatchStream<R> {
    pub fn new(windows: Vec<ContextWindow>, batch_size: usize, vocab_size: usize, rng: R, cycle: bool) -> Self {
        BatchStream {
            windows,
            pos: 0,
            batch_size: batch_size.max(1),
            vocab_size,
            rng,
            cycle,
        }
    }
}

impl<R: Rng> Iterator for BatchStream<R> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.windows.len() {
            if !self.cycle || self.windows.is_empty() {
                return None;
            }
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.windows.len());
        let positives = self.windows[self.pos..end].to_vec();
        self.pos = end;
        Some(make_batch(positives, self.vocab_size, &mut self.rng).expect("corrupted windows are valid"))
    }
}

/// A single pass of batches over every window of `corpus`.
pub fn generate_batches<R: Rng>(corpus: &Corpus, vocab: &Vocab, cfg: &TrainConfig, rng: R) -> BatchStream<R> {
    BatchStream::new(
        corpus_windows(corpus, vocab, cfg.window),
        cfg.batch_size,
        vocab.len(),
        rng,
        false,
    )
}

/// Deterministic corpus with strong bigram structure: word `w{i}` is
/// always followed by `w{(i + 1) % words}` (after a fixed shuffle of the
/// cycle), sentences start at a random word and hold 5 to 15 tokens.
pub fn synthetic_corpus(words: usize, tokens: usize, seed: u64) -> String {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cycle: Vec<usize> = (0..words.max(1)).collect();
    cycle.shuffle(&mut rng);
    let mut next = vec![0; cycle.len()];
    for (i, &w) in cycle.iter().enumerate() {
        next[w] = cycle[(i + 1) % cycle.len()];
    }
    let mut out = String::with_capacity(tokens * 4);
    let mut emitted = 0;
    while emitted < tokens {
        let len = rng.gen_range(5..=15).min(tokens - emitted);
        let mut w = rng.gen_range(0..cycle.len());
        for j in 0..len {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "w{w}");
            w = next[w];
        }
        out.push('\n');
        emitted += len;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub corpus: PathBuf,
    pub batch_size: usize,
    pub window: usize,
    pub dim: usize,
    pub hidden: usize,
    pub lr: f32,
    pub max_updates: usize,
    pub threshold: f64,
    pub eval_interval: usize,
    pub seed: u64,
    pub strategy: ScatterKind,
    pub threads: usize,
    pub vocab_cap: usize,
    pub min_count: usize,
    /// Examples per throughput sampling window.
    pub rate_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            corpus: PathBuf::new(),
            batch_size: 16,
            window: 5,
            dim: 64,
            hidden: 32,
            lr: 0.1,
            max_updates: 500_000,
            threshold: 0.05,
            eval_interval: 100,
            seed: 42,
            strategy: ScatterKind::SortSegment,
            threads: default_threads(usize::MAX),
            vocab_cap: 10_000,
            min_count: 1,
            rate_window: DEFAULT_WINDOW_EXAMPLES,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`].
pub const CONFIG_KEYS: &[&str] = &[
    "corpus",
    "batch_size",
    "window",
    "dim",
    "hidden",
    "lr",
    "max_updates",
    "threshold",
    "eval_interval",
    "seed",
    "strategy",
    "threads",
    "vocab_cap",
    "min_count",
    "rate_window",
];

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.max_updates == 0 {
            return fail("max_updates must be at least 1");
        }
        if !(self.threshold > 0.0) {
            return fail("threshold must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail("lr must be positive");
        }
        if self.window == 0 || self.dim == 0 || self.hidden == 0 {
            return fail("window, dim and hidden must be positive");
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be at least 1");
        }
        if self.threads == 0 {
            return fail("threads must be at least 1");
        }
        if self.vocab_cap < 3 {
            return fail("vocab_cap must be at least 3");
        }
        Ok(())
    }

    pub fn scatter(&self) -> ScatterStrategy {
        ScatterStrategy::new(self.strategy, self.threads.max(1)).expect("threads validated")
    }

    /// Set one field by its name. Dashes in `key` are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        match key.as_str() {
            "corpus" => self.corpus = PathBuf::from(value.trim()),
            "batch_size" => self.batch_size = parse_field(&key, value)?,
            "window" => self.window = parse_field(&key, value)?,
            "dim" => self.dim = parse_field(&key, value)?,
            "hidden" => self.hidden = parse_field(&key, value)?,
            "lr" => self.lr = parse_field(&key, value)?,
            "max_updates" => self.max_updates = parse_field(&key, value)?,
            "threshold" => self.threshold = parse_field(&key, value)?,
            "eval_interval" => self.eval_interval = parse_field(&key, value)?,
            "seed" => self.seed = parse_field(&key, value)?,
            "strategy" => self.strategy = value.trim().parse()?,
            "threads" => self.threads = parse_field(&key, value)?,
            "vocab_cap" => self.vocab_cap = parse_field(&key, value)?,
            "min_count" => self.min_count = parse_field(&key, value)?,
            "rate_window" => self.rate_window = parse_field(&key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "corpus={}", self.corpus.display());
        let _ = writeln!(out, "batch_size={}", self.batch_size);
        let _ = writeln!(out, "window={}", self.window);
        let _ = writeln!(out, "dim={}", self.dim);
        let _ = writeln!(out, "hidden={}", self.hidden);
        let _ = writeln!(out, "lr={}", self.lr);
        let _ = writeln!(out, "max_updates={}", self.max_updates);
        let _ = writeln!(out, "threshold={}", self.threshold);
        let _ = writeln!(out, "eval_interval={}", self.eval_interval);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "strategy={}", self.strategy);
        let _ = writeln!(out, "threads={}", self.threads);
        let _ = writeln!(out, "vocab_cap={}", self.vocab_cap);
        let _ = writeln!(out, "min_count={}", self.min_count);
        let _ = writeln!(out, "rate_window={}", self.rate_window);
        out
    }
}

/// Parse flat `key=value` text. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub updates: usize,
    pub examples: usize,
    pub wall_s: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRecord {
    pub converged: bool,
    pub updates_used: usize,
    pub examples_seen: usize,
    pub wall_time: f64,
    pub final_error: f64,
    pub error_trace: Vec<TracePoint>,
}

impl ConvergenceRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("updates,examples,wall_s,error\n");
        for p in &self.error_trace {
            let _ = writeln!(out, "{},{},{:.6},{:.9}", p.updates, p.examples, p.wall_s, p.error);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub vocab: Vocab,
    pub record: ConvergenceRecord,
    pub throughput: Vec<ThroughputSample>,
    pub efficiency: EfficiencyMetrics,
}

/// Load `cfg.corpus` and train on it.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus = Corpus::load(&cfg.corpus)?;
    train_corpus(&corpus, cfg)
}

pub fn train_corpus(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_corpus_timed(corpus, cfg, &mut NoProfile)
}

/// The training loop, reporting every primitive op to `timer`.
///
/// Validation uses the first [`VALIDATION_WINDOWS`] windows of the corpus
/// (at most half of them on small corpora); the rest cycle as the training
/// stream. Validation time is excluded from throughput samples.
pub fn train_corpus_timed(corpus: &Corpus, cfg: &TrainConfig, timer: &mut impl OpTimer) -> Result<TrainOutcome> {
    run(corpus, cfg, timer, |_| {})
}

fn run(
    corpus: &Corpus,
    cfg: &TrainConfig,
    timer: &mut impl OpTimer,
    after_init: impl FnOnce(&mut ModelParams<f32>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vocab = build_vocab(corpus.tokens(), cfg.vocab_cap, cfg.min_count)?;
    let mut windows = corpus_windows(corpus, &vocab, cfg.window);
    if windows.len() < 2 {
        return Err(Error::Domain(format!(
            "corpus yields {} windows; need at least 2",
            windows.len()
        )));
    }
    let n_val = VALIDATION_WINDOWS.min(windows.len() / 2);
    let train_windows = windows.split_off(n_val);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = ModelShape {
        vocab: vocab.len(),
        dim: cfg.dim,
        window: cfg.window,
        hidden: cfg.hidden,
    };
    let mut params = ModelParams::<f32>::init(shape, &mut rng);
    after_init(&mut params);
    let validation = make_batch(windows, vocab.len(), &mut rng)?;
    let stream = BatchStream::new(train_windows, cfg.batch_size, vocab.len(), rng, true);
    let scatter = cfg.scatter();

    let clock = MonotonicClock::new();
    let mut meter = ThroughputMeter::new(cfg.rate_window, clock);
    let started = Instant::now();
    let mut record = ConvergenceRecord {
        converged: false,
        updates_used: 0,
        examples_seen: 0,
        wall_time: 0.0,
        final_error: f64::NAN,
        error_trace: Vec::new(),
    };
    let mut eff = EfficiencyAccumulator::default();

    for batch in stream {
        let step_start = Instant::now();
        let grads = params.backward_threads(&batch, timer, cfg.threads)?;
        if !grads.loss.is_finite() {
            return Err(Error::Divergence {
                update: record.updates_used,
            });
        }
        let kernel = params.sgd_update_timed(&grads, cfg.lr, &scatter, timer)?;
        eff.add(step_start.elapsed().as_secs_f64(), &kernel);

        record.updates_used += 1;
        record.examples_seen += batch.len();
        meter.record(batch.len());

        let last = record.updates_used == cfg.max_updates;
        if record.updates_used.is_multiple_of(cfg.eval_interval) || last {
            meter.pause();
            let err = params.batch_loss(&validation)? as f64;
            if !err.is_finite() || !params.is_finite() {
                return Err(Error::Divergence {
                    update: record.updates_used,
                });
            }
            record.final_error = err;
            record.error_trace.push(TracePoint {
                updates: record.updates_used,
                examples: record.examples_seen,
                wall_s: started.elapsed().as_secs_f64(),
                error: err,
            });
            meter.resume();
            if err < cfg.threshold {
                record.converged = true;
                break;
            }
        }
        if last {
            break;
        }
    }
    record.wall_time = started.elapsed().as_secs_f64();

    Ok(TrainOutcome {
        params,
        vocab,
        record,
        throughput: meter.into_samples(),
        efficiency: eff.finish(),
    })
}

#[derive(Default)]
struct EfficiencyAccumulator {
    step_s: f64,
    kernel_s: f64,
    busy_s: f64,
    capacity_s: f64,
}

impl EfficiencyAccumulator {
    fn add(&mut self, step_s: f64, k: &crate::scatter::KernelStats) {
        let wall = k.wall.as_secs_f64();
        self.step_s += step_s;
        self.kernel_s += wall;
        self.busy_s += k.busy.as_secs_f64();
        self.capacity_s += wall * k.threads as f64;
    }

    fn finish(&self) -> EfficiencyMetrics {
        let ratio = |a: f64, b: f64| if b > 0.0 { (a / b).clamp(0.0, 1.0) } else { 0.0 };
        EfficiencyMetrics {
            parallel_section_fraction: ratio(self.kernel_s, self.step_s),
            mean_worker_utilization: ratio(self.busy_s, self.capacity_s),
        }
    }
}
