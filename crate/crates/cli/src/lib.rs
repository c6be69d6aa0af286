//! Command-line front end. Every experiment is a subcommand; exit codes are
//! 0 on success, 1 on usage errors and 2 on runtime errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::info;

use scatterlm::harness::{backends_to_csv, PAPER_SWEEP_SIZES};
use scatterlm::io::{embeddings_text, load_checkpoint, save_checkpoint, write_atomic};
use scatterlm::scatter::{bench_with_inputs, default_threads, ScatterInputs, SCATTER_CSV_HEADER};
use scatterlm::trainer::{parse_kv, CONFIG_KEYS};
use scatterlm::{
    compare_backends, profile_training, sweep_batch_sizes, train, Corpus, ScatterBenchConfig, ScatterKind,
    ScatterStrategy, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "scatterlm", version, about = "Scatter-add kernels and embedding-training experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, embeddings and convergence trace.
    Train {
        #[command(flatten)]
        train: TrainArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the scatter-add kernels on synthetic inputs.
    BenchScatter(BenchArgs),
    /// Train once per batch size and report rate and time to converge.
    Sweep {
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated, strictly increasing batch sizes.
        #[arg(long, default_value = "16,32,64,128,256,512", value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Sweep CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Instrumented training run reporting per-op hotspots.
    Profile {
        #[command(flatten)]
        train: TrainArgs,
        /// Hotspot JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train under each scatter backend and compare rates.
    CompareBackends {
        #[command(flatten)]
        train: TrainArgs,
        /// Comparison CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the embeddings of a checkpoint as text.
    ExportEmbeddings {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Training flags. Values given on the command line override the config
/// file, which overrides the defaults shown here.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value config file using the long flag names with underscores.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// UTF-8 corpus, one sentence per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Windows per update (each paired with one corrupted window).
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Context window length.
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Embedding width.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Hidden units.
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Learning rate (fixed).
    #[arg(long, default_value_t = 0.1)]
    pub lr: f32,
    /// Update budget; the run stops unconverged when it is spent.
    #[arg(long, default_value_t = 500_000)]
    pub max_updates: usize,
    /// Validation error that counts as converged.
    #[arg(long, default_value_t = 0.05)]
    pub threshold: f64,
    /// Updates between validation evaluations.
    #[arg(long, default_value_t = 100)]
    pub eval_interval: usize,
    /// RNG seed; a random seed is drawn and logged when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for scatter kernels and dense products.
    #[arg(long, default_value_t = default_threads(usize::MAX))]
    pub threads: usize,
    /// Scatter kernel: serial, atomic or sortseg.
    #[arg(long, default_value = "sortseg")]
    pub strategy: String,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Rows in the target matrix.
    #[arg(long, default_value_t = 100_000)]
    pub rows: usize,
    /// Columns in the target matrix.
    #[arg(long, default_value_t = 64)]
    pub cols: usize,
    /// Number of update rows.
    #[arg(long, default_value_t = 1_000_000)]
    pub indexed: usize,
    /// Fraction of updates that repeat an earlier target row.
    #[arg(long, default_value_t = 0.5)]
    pub dup_frac: f64,
    /// serial, atomic, sortseg or all.
    #[arg(long, default_value = "all")]
    pub strategy: String,
    /// Worker threads for the parallel kernels.
    #[arg(long, default_value_t = default_threads(usize::MAX))]
    pub threads: usize,
    /// Timed repetitions after one warm-up.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// RNG seed; a random seed is drawn and logged when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<scatterlm::Error> for CliError {
    fn from(e: scatterlm::Error) -> Self {
        match e {
            scatterlm::Error::Config(m) | scatterlm::Error::Parse(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn entropy_seed() -> u64 {
    let seed = rand::random::<u64>();
    info!("no --seed given; using seed {seed}");
    seed
}

/// Defaults, then the config file, then flags typed on the command line.
fn resolve_train_config(args: &TrainArgs, matches: &ArgMatches) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    let mut seeded = false;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (k, v) in parse_kv(&text)? {
            seeded |= k.replace('-', "_") == "seed";
            cfg.set(&k, &v)?;
        }
    }
    for key in CONFIG_KEYS {
        if matches!(matches.try_get_raw(key), Ok(Some(_)))
            && matches.value_source(key) == Some(ValueSource::CommandLine)
        {
            let raw = matches.get_raw(key).and_then(|mut v| v.next()).expect("value present");
            cfg.set(key, &raw.to_string_lossy())?;
            seeded |= *key == "seed";
        }
    }
    if !seeded {
        cfg.seed = entropy_seed();
    }
    if cfg.corpus.as_os_str().is_empty() {
        return Err(CliError::Usage("--corpus is required (flag or config file)".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpus(cfg: &TrainConfig) -> Result<Corpus, CliError> {
    Ok(Corpus::load(&cfg.corpus)?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => Ok(write_atomic(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sub_matches(m: &ArgMatches) -> &ArgMatches {
    m.subcommand().map(|(_, s)| s).expect("subcommand required")
}

fn execute(cli: Cli, matches: &ArgMatches) -> Result<(), CliError> {
    let sub = sub_matches(matches);
    match cli.command {
        Command::Train { train: args, out } => {
            let cfg = resolve_train_config(&args, sub)?;
            info!("training on {} (batch {}, {})", cfg.corpus.display(), cfg.batch_size, cfg.scatter());
            let run = train(&cfg)?;
            let r = &run.record;
            info!(
                "converged={} after {} updates ({} examples, {:.2} s), error {:.4}",
                r.converged, r.updates_used, r.examples_seen, r.wall_time, r.final_error
            );
            save_checkpoint(&out.join("checkpoint"), &run.params, &run.vocab, &cfg)?;
            write_atomic(&out.join("convergence.csv"), r.to_csv().as_bytes())?;
            write_atomic(
                &out.join("embeddings.txt"),
                embeddings_text(&run.vocab, &run.params.embeddings)?.as_bytes(),
            )?;
            let mut tp = String::from("window_examples,window_s,rate\n");
            for s in &run.throughput {
                tp.push_str(&format!("{},{:.6},{:.3}\n", s.window_examples, s.window_time, s.rate));
            }
            write_atomic(&out.join("throughput.csv"), tp.as_bytes())?;
            Ok(())
        }
        Command::BenchScatter(args) => {
            if args.reps < 3 {
                return Err(CliError::Usage("--reps must be at least 3".into()));
            }
            let kinds: Vec<ScatterKind> = if args.strategy == "all" {
                ScatterKind::ALL.to_vec()
            } else {
                vec![args.strategy.parse()?]
            };
            let seed = args.seed.unwrap_or_else(entropy_seed);
            let cfg = ScatterBenchConfig {
                rows_in_w: args.rows,
                cols: args.cols,
                rows_indexed: args.indexed,
                duplicate_fraction: args.dup_frac,
                repetitions: args.reps,
                seed,
            };
            let inputs = ScatterInputs::generate(&cfg)?;
            let mut csv = format!("{SCATTER_CSV_HEADER}\n");
            for kind in kinds {
                let strategy = ScatterStrategy::new(kind, args.threads.min(args.indexed).max(1))?;
                let t = bench_with_inputs(&cfg, &inputs, strategy)?;
                info!("{strategy}: mean {:.6} s, sd {:.6} s", t.mean, t.stddev);
                csv.push_str(&t.csv_row());
                csv.push('\n');
            }
            emit(args.out.as_deref(), &csv)
        }
        Command::Sweep { train: args, sizes, out } => {
            let cfg = resolve_train_config(&args, sub)?;
            let corpus = load_corpus(&cfg)?;
            if sizes == PAPER_SWEEP_SIZES {
                info!("sweeping the default sizes 16..512");
            }
            let result = sweep_batch_sizes(&cfg, &corpus, &sizes)?;
            for (b, e) in &result.failures {
                log::error!("batch size {b} failed: {e}");
            }
            emit(out.as_deref(), &result.to_csv())
        }
        Command::Profile { train: args, out } => {
            let cfg = resolve_train_config(&args, sub)?;
            let corpus = load_corpus(&cfg)?;
            let run = profile_training(&corpus, &cfg)?;
            eprint!("{}", run.report.to_table());
            let e = run.outcome.efficiency;
            eprintln!(
                "parallel section fraction {:.4}, mean worker utilization {:.4}",
                e.parallel_section_fraction, e.mean_worker_utilization
            );
            let mut json = run.report.to_json();
            json.push('\n');
            emit(out.as_deref(), &json)
        }
        Command::CompareBackends { train: args, out } => {
            let cfg = resolve_train_config(&args, sub)?;
            let corpus = load_corpus(&cfg)?;
            let rows = compare_backends(&cfg, &corpus, &ScatterKind::ALL)?;
            emit(out.as_deref(), &backends_to_csv(&rows))
        }
        Command::ExportEmbeddings { checkpoint, out } => {
            let (params, vocab, _) = load_checkpoint(&checkpoint)?;
            write_atomic(&out, embeddings_text(&vocab, &params.embeddings)?.as_bytes())?;
            Ok(())
        }
    }
}

/// Parse `argv` and run the selected experiment, returning the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    match execute(cli, &matches) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("{}", Cli::command().render_usage());
            EXIT_USAGE
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}
