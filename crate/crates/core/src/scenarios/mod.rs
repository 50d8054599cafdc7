//! Canned scenarios, trace checkers and workload generation.

pub mod checks;
pub mod named;
pub mod workload;

pub use checks::{
    check_agreement, check_rsm_liveness, completions, measure, surviving_executions, verdict, Blocked, Stats,
    TxnLiveness, Verdict, Violation, ViolationKind,
};
pub use named::{base_config, build_scenario, partition, workload_for, run_named_scenario, Partition, ScenarioError, ScenarioName, ScenarioParams};
pub use workload::{generate_workload, into_batches, KeyDistribution, Workload};
