//! Round engine: local training, aggregation, downlink and reporting.

mod aggregate;
mod client;
mod experiment;
mod round;

pub use aggregate::{aggregate, aggregate_mean, aggregate_weighted, AggregatorKind};
pub use client::{
    batch_gradient, evaluate, local_train, predict, score, ClientState, LocalHyper, LocalOutcome, Prediction,
    TrainingContext,
};
pub use experiment::{
    partition, prepare_base, prepare_data, split_pool, AdapterSettings, DataSettings, Experiment, ExperimentConfig, FederationSettings,
    FieldError, PartitionKind, RunMode, ScaleMode,
};
pub use round::{
    initial_report, run_round, select_participants, ClientRoundMetrics, Executor, RoundReport, Sequential, ServerState,
    Split,
};
