//! Private federated rounds: Poisson cohorts, local SGD, clipped and noised
//! aggregation of sparse payloads, the server optimizer, the moving average
//! of the server model and the experiment loop.

mod aggregate;
mod checkpoint;
mod cohort;
mod experiment;
mod local;
mod server;

pub use aggregate::{aggregate_round, combine_payloads, prepare_payload, ClientPayload, Normalization};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use cohort::sample_cohort;
pub use experiment::{
    resolve_sigma, run_experiment, unigram_perplexity, ExperimentOutcome, RoundReport, METRICS_VERSION,
};
pub use local::{local_train, make_minibatch, sgd_epochs, LocalSettings, NoiseSampler};
pub use server::{ema_update, server_step, ServerOptimizer, ServerState};
