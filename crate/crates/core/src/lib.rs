//! Federated averaging over noisy uplink and downlink channels.
//!
//! The crate simulates Noisy-FedAvg and single-machine Noisy-SGD on
//! synthetic regression and classification tasks, provides SNR-control noise
//! schedules for both links, and evaluates the closed-form convergence bounds
//! that predict how each noise source affects training.
//!
//! Every run is a pure function of its configuration and seed.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod channel;
pub mod data;
mod error;
pub mod model;
pub mod rng;
pub mod theory;

pub use algorithms::{
    client_sample, kstar_distribution, learning_rate, local_update, min_rounds, run_noisy_fedavg,
    run_noisy_fedavg_with, run_noisy_sgd, sample_kstar, Execution, FedAvgConfig, RoundMetrics, RunResult, RunStatus,
    SgdConfig, UplinkMessage,
};
pub use channel::{Direction, NoiseSchedule, ScheduleKind};
pub use data::{ClientPartition, Dataset};
pub use error::{Error, Result};
pub use model::{LabeledExample, LossKind, LossModel, ParamVector, Target};
pub use theory::{BoundReport, TheoryParams};
