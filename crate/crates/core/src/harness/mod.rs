//! Experiment plumbing: configs, runs, sweeps, bound reports and the
//! property suites behind `verify`.

pub mod config;
pub mod runner;
pub mod verify;

pub use config::{parse_config, Algorithm, ExperimentSpec, NoiseRule, ParamsSpec, PrivacySpec, ScheduleSpec, SweepSpec};
pub use runner::{
    bound_for_spec, output_root, resolve, run_experiment, run_resolved, run_sweep, write_csv, BoundOutput, CommRow,
    ExperimentOutcome, ResolvedExperiment, Stats, Summary, SweepSummary, CSV_SCHEMA, OUTPUT_ROOT_ENV,
};
pub use verify::{verify, CheckResult, VerifyReport, VerifySuite};
