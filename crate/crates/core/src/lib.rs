//! Scatter-add kernels, a window-ranking word embedding model built on
//! them, and the measurement harness used to study where training time goes.

pub mod error;
pub mod harness;
pub mod io;
pub mod model;
pub mod profile;
pub mod scatter;
pub mod stats;
pub mod tensor;
pub mod throughput;
pub mod trainer;

pub use error::{Error, Result};
pub use harness::{compare_backends, profile_training, sweep_batch_sizes, EfficiencyMetrics, SweepResult, SweepRow};
pub use model::{Batch, ContextWindow, Gradients, ModelParams, ModelShape, SparseGrad};
pub use profile::{hotspot_report, HotspotEntry, HotspotReport, NoProfile, OpTimer, Profiler};
pub use scatter::{
    bench_index_add, index_add_atomic, index_add_sort_segment, KernelStats, ScatterBenchConfig, ScatterKind,
    ScatterStrategy, ScatterTiming,
};
pub use tensor::{elementwise_tanh, gather_rows, index_add_serial, matmul, matmul_threads, matmul_tn, matmul_tn_threads, scale_add, IndexVector, Matrix, Real};
pub use throughput::{measure_throughput, ThroughputSample, ThroughputSummary};
pub use trainer::{build_vocab, generate_batches, train, train_corpus, ConvergenceRecord, Corpus, TrainConfig, Vocab};
