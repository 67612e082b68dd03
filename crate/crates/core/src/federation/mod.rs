//! Server-side protocol: client sampling, clipping, aggregation and the
//! round loop.

mod aggregate;

pub use aggregate::{
    aggregate, clip_delta, cosine, normalised_weights, sample_clients, similarity_weights,
    Aggregated, ServerConfig, Strategy,
};
mod access;
mod experiment;

pub use access::{AccessEvent, AccessKind, AccessMonitor, ClientStore, NoopMonitor, Reader, RecordingMonitor};
pub use experiment::{param_digest, run_experiment, ExperimentOutcome, RoundRecord, World};
