//! Teacher-student pruning lab: soft-committee machines trained by online
//! SGD, node and edge pruning (including k-DPP node selection), closed-form
//! generalization error and an experiment harness.

pub mod analytics;
pub mod dpp;
pub mod error;
pub mod harness;
pub mod netcore;
pub mod pruning;
pub mod rng;
pub mod theory;
pub mod trainer;

pub use analytics::{assign_groups, ge_closed_form, ge_monte_carlo, order_params, GeEstimate, OrderParams, TestSet};
pub use dpp::{sample_kdpp, DppKernel, KernelSource, Subset};
pub use error::{Error, Result};
pub use harness::table::{reproduce_table, TableReport};
pub use harness::verify::{verify_theorems, Status, VerifyOptions, VerifyReport};
pub use harness::{
    emit, run_experiment, EdgeMode, ExperimentConfig, ExperimentRecord, ExperimentReport, Format, KernelChoice, Method,
};
pub use netcore::{NoiseConfig, TwoLayerNet};
pub use pruning::{EdgeMask, Mask, MatchSpec, NodeMask};
pub use theory::{DiffGrid, TheoryParams};
pub use trainer::{train, TrainConfig, TrainTrace};
