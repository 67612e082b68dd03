//! Configuration, experiment execution, evaluation, sweeps and output.

pub mod config;
pub mod emit;
pub mod gradcheck;
pub mod metrics;
pub mod run;
pub mod selftest;
pub mod sweep;
pub mod world;

pub use config::{DatasetConfig, DatasetKind, ExperimentConfig, ModelConfig, PretrainConfig};
pub use emit::{emit_run, emit_sweep, Formats};
pub use metrics::{evaluate, ClientMetrics, EvalInput, RoundMetrics};
pub use run::{run, run_with_monitor, summarise, RunResult, StealthAudit, Summary};
pub use sweep::{sweep, trend_verdict, SweepAxis, SweepResult, SweepRow, Trend, TrendVerdict};
pub use world::{build_streams, build_world, pretrain_source, source_model, Pretrained};
