//! Resolving specs into runs and writing their artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::{Algorithm, ExperimentSpec, NoiseRule};
use crate::baselines::{run_fedavg, FedAvgConfig};
use crate::error::{Error, Result};
use crate::fed_core::{run_training, MemoryInit, RoundRecord, RunConfig, RunFailure, Trajectory};
use crate::privacy::{calibrate_sigma, experiment_sigma, schedule_from_corollary, Schedule, ScheduleInputs, ScheduleName};
use crate::problems::{make_suite, FederationProblem};
use crate::theory::{bound_for, BoundReport, ProblemConstants};
use crate::vecmath::{gaussian_vector, Purpose, StreamSeed, Vector};

/// Version tag of the metrics CSV layout.
pub const CSV_SCHEMA: &str = "fed-normec-metrics/1";

/// Environment variable naming the root directory for run outputs.
pub const OUTPUT_ROOT_ENV: &str = "FED_NORMEC_OUTPUT";

/// Output root from [`OUTPUT_ROOT_ENV`], defaulting to `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// A spec turned into concrete objects.
#[derive(Clone, Debug)]
pub struct ResolvedExperiment {
    pub spec: ExperimentSpec,
    pub problem: FederationProblem<f64>,
    pub x0: Vector<f64>,
    pub run: RunConfig<f64>,
    pub schedule: Option<Schedule<f64>>,
    pub constants: ProblemConstants<f64>,
    /// Initial memory mismatch `R` realized by the init strategy.
    pub r0: f64,
}

impl ResolvedExperiment {
    /// Seed of replicate `r`; replicates share the problem and `x⁰`.
    pub fn replicate_seed(&self, r: usize) -> u64 {
        self.spec.seed.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn fedavg_config(&self, seed: u64) -> FedAvgConfig<f64> {
        FedAvgConfig {
            eta: self.spec.params.eta.unwrap_or(self.run.gamma),
            gamma: self.run.gamma,
            local: self.run.local,
            p: self.run.p,
            sigma_dp: self.run.sigma_dp,
            alpha: self.run.alpha,
            private: self.run.private,
            rounds: self.run.rounds,
            seed,
        }
    }

    /// Theory bound for the resolved Fed-α-NormEC parameters.
    pub fn bound(&self) -> BoundReport<f64> {
        let mut report = bound_for(&self.constants, &self.run.bound_params(self.r0));
        report.advisory |= self.constants.approximate;
        report
    }

    /// Spec with every default that resolution filled in made explicit.
    pub fn resolved_spec(&self) -> ExperimentSpec {
        let mut spec = self.spec.clone();
        let p = &mut spec.params;
        if self.schedule.is_none() {
            p.gamma = Some(self.run.gamma);
            if spec.algorithm == Algorithm::FedAlphaNormec {
                p.beta = Some(self.run.beta);
            }
            p.eta = Some(match spec.algorithm {
                Algorithm::FedAlphaNormec => self.run.eta,
                Algorithm::DpFedavg => p.eta.unwrap_or(self.run.gamma),
            });
            if p.private {
                p.sigma_dp = Some(self.run.sigma_dp);
            }
        }
        p.init = Some(self.run.init);
        spec
    }
}

fn start_point(problem: &FederationProblem<f64>, distance: f64, seed: u64) -> Result<Vector<f64>> {
    let d = problem.dim();
    let mut stream = StreamSeed(seed).stream(0, 0, Purpose::Init);
    let dir: Vector<f64> = gaussian_vector(&mut stream, d, 1.0)?;
    let n = dir.norm();
    let mut x0 = problem.minimizer().cloned().unwrap_or_else(|| Vector::zeros(d));
    if n > 0.0 {
        x0.axpy(distance / n, &dir);
    }
    Ok(x0)
}

/// Builds the problem, start point and run parameters a spec describes.
pub fn resolve(spec: &ExperimentSpec) -> Result<ResolvedExperiment> {
    spec.validate()?;
    let problem: FederationProblem<f64> = make_suite(&spec.problem, spec.seed)?;
    let x0 = start_point(&problem, spec.start_distance, spec.seed)?;
    let constants = ProblemConstants::from_problem(&problem, &x0);
    let l = problem.smoothness();
    let params = &spec.params;
    let budget = spec.privacy.as_ref().map(|p| p.budget()).transpose()?;

    let schedule = match &spec.schedule {
        Some(s) if s.name != ScheduleName::Manual => {
            let inputs = ScheduleInputs {
                rounds: params.rounds,
                smoothness: l,
                alpha: params.alpha,
                d1: s.d1,
                d2: s.d2,
                delta_inf: constants.delta_inf,
                f_gap: constants.f0 - constants.f_inf,
                clients: problem.num_clients(),
                dim: problem.dim(),
                sampled: s.sampled.unwrap_or(params.p * problem.num_clients() as f64),
                local_steps: s.local_steps,
                budget,
            };
            let sched: Schedule<f64> = schedule_from_corollary(s.name, &inputs)?;
            for w in &sched.warnings {
                log::warn!("{}: {w}", s.name);
            }
            Some(sched)
        }
        _ => None,
    };

    let mut run = match &schedule {
        Some(s) => {
            let mut run = RunConfig::new(s.gamma, s.beta, s.eta, s.alpha, params.rounds);
            run.p = s.p;
            run.sigma_dp = s.sigma_dp;
            run.private = params.private || s.name == ScheduleName::CorollaryOneStepDp;
            run.local = s.local;
            run.init = params.init.unwrap_or(MemoryInit::ResidualPlusOffset { offset: s.r });
            run
        }
        None => {
            let gamma = params.gamma.unwrap_or(0.5 / l);
            if spec.algorithm == Algorithm::FedAlphaNormec && params.beta.is_none() {
                return Err(Error::config("params.beta", "required outside a sweep"));
            }
            // unused by DP-FedAvg
            let beta = params.beta.unwrap_or(1.0);
            let eta = params.eta.unwrap_or(gamma);
            let mut run = RunConfig::new(gamma, beta, eta, params.alpha, params.rounds);
            run.p = params.p;
            run.private = params.private;
            run.local = params.local;
            run.init = params.init.unwrap_or(MemoryInit::ExactResidual);
            run.sigma_dp = if !params.private {
                0.0
            } else if let Some(s) = params.sigma_dp {
                s
            } else {
                let privacy = spec.privacy.as_ref().expect("validated: private runs carry a budget");
                let budget = privacy.budget()?;
                match privacy.noise {
                    NoiseRule::Calibrated => calibrate_sigma(&budget, params.p, params.rounds)?,
                    NoiseRule::Experiment => experiment_sigma(params.p, beta, params.rounds, &budget),
                }
            };
            run
        }
    };
    run.server_normalize = params.server_normalize;
    run.theory_mode = params.theory_mode;
    run.degenerate_tol = params.degenerate_tol;
    run.seed = spec.seed;
    run.validate()?;

    let memories = crate::fed_core::init_memories(run.init, &problem, &x0, &run.local_config())?;
    let r0 = crate::theory::compute_r(&memories, &problem, &x0, &run.local_config())?;
    Ok(ResolvedExperiment {
        spec: spec.clone(),
        problem,
        x0,
        run,
        schedule,
        constants,
        r0,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    algorithm: &'a str,
    k: usize,
    f_value: f64,
    grad_norm: f64,
    min_grad_norm: f64,
    #[serde(rename = "R_k")]
    r_k: f64,
    participants: usize,
    v_hat_norm: f64,
    step_norm: f64,
    degenerate_flag: u8,
}

/// Writes records in the versioned long-format schema.
pub fn write_csv(path: &Path, algorithm: Algorithm, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(CsvRow {
            algorithm: algorithm.as_str(),
            k: r.k,
            f_value: r.f_value,
            grad_norm: r.grad_norm,
            min_grad_norm: r.min_grad_norm,
            r_k: r.r_k,
            participants: r.participants,
            v_hat_norm: r.v_hat_norm,
            step_norm: r.step_norm,
            degenerate_flag: r.degenerate as u8,
        })?;
    }
    if records.is_empty() {
        w.write_record([
            "algorithm",
            "k",
            "f_value",
            "grad_norm",
            "min_grad_norm",
            "R_k",
            "participants",
            "v_hat_norm",
            "step_norm",
            "degenerate_flag",
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation (0 for one replicate).
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stats {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / n };
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stats { mean, std, values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub rounds_completed: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub csv_schema: &'static str,
    pub spec_hash: String,
    pub algorithm: Algorithm,
    pub replicates: usize,
    pub rounds: usize,
    /// `min_k ‖∇f(x^k)‖` per replicate (last `min_grad_norm` of each CSV).
    pub min_grad_norm: Stats,
    pub final_grad_norm: Stats,
    pub bound_total: Option<f64>,
    pub bound_conditions_satisfied: Option<bool>,
    pub failures: Vec<ReplicateFailure>,
}

/// Everything a run produced, in replicate order.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub records: Vec<Vec<RoundRecord>>,
    pub summary: Summary,
    pub bound: Option<BoundReport<f64>>,
}

fn run_replicate(res: &ResolvedExperiment, r: usize) -> std::result::Result<Trajectory<f64>, RunFailure> {
    let seed = res.replicate_seed(r);
    match res.spec.algorithm {
        Algorithm::FedAlphaNormec => {
            let mut cfg = res.run.clone();
            cfg.seed = seed;
            run_training(&res.problem, &res.x0, &cfg)
        }
        Algorithm::DpFedavg => run_fedavg(&res.problem, &res.x0, &res.fedavg_config(seed)),
    }
}

#[derive(Serialize)]
struct BoundFile<'a> {
    algorithm: Algorithm,
    r0: f64,
    constants: &'a ProblemConstants<f64>,
    params: Option<crate::theory::BoundParams<f64>>,
    report: Option<&'a BoundReport<f64>>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Runs every replicate of `spec` into `root/<output>` and writes the CSVs,
/// `bound.json`, `summary.json` and `resolved_spec.toml`.
///
/// A diverging replicate keeps its partial CSV; the first failure is returned
/// after all artifacts are written.
pub fn run_experiment(spec: &ExperimentSpec, root: &Path) -> Result<ExperimentOutcome> {
    let res = resolve(spec)?;
    run_resolved(&res, &root.join(spec.output_dir_name()))
}

pub fn run_resolved(res: &ResolvedExperiment, dir: &Path) -> Result<ExperimentOutcome> {
    fs::create_dir_all(dir)?;
    let resolved = res.resolved_spec();
    fs::write(dir.join("resolved_spec.toml"), resolved.to_toml()?)?;

    let results: Vec<_> = (0..res.spec.replicates)
        .into_par_iter()
        .map(|r| run_replicate(res, r))
        .collect();

    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    let mut first_error = None;
    for (r, result) in results.into_iter().enumerate() {
        let recs = match result {
            Ok(t) => t.records,
            Err(f) => {
                failures.push(ReplicateFailure {
                    replicate: r,
                    rounds_completed: f.records.len(),
                    error: f.source.to_string(),
                });
                first_error.get_or_insert(f.source);
                f.records
            }
        };
        write_csv(&dir.join(format!("replicate_{r:03}.csv")), res.spec.algorithm, &recs)?;
        records.push(recs);
    }

    let bound = (res.spec.algorithm == Algorithm::FedAlphaNormec).then(|| res.bound());
    write_json(
        &dir.join("bound.json"),
        &BoundFile {
            algorithm: res.spec.algorithm,
            r0: res.r0,
            constants: &res.constants,
            params: bound.as_ref().map(|_| res.run.bound_params(res.r0)),
            report: bound.as_ref(),
        },
    )?;

    let last = |f: fn(&RoundRecord) -> f64| -> Vec<f64> {
        records.iter().filter_map(|rs| rs.last().map(f)).collect()
    };
    let summary = Summary {
        csv_schema: CSV_SCHEMA,
        spec_hash: resolved.hash()?,
        algorithm: res.spec.algorithm,
        replicates: res.spec.replicates,
        rounds: res.run.rounds,
        min_grad_norm: Stats::of(last(|r| r.min_grad_norm)),
        final_grad_norm: Stats::of(last(|r| r.grad_norm)),
        bound_total: bound.as_ref().map(|b| b.total),
        bound_conditions_satisfied: bound.as_ref().map(|b| b.all_satisfied()),
        failures,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    if let Some(e) = first_error {
        return Err(e);
    }
    Ok(ExperimentOutcome {
        dir: dir.to_path_buf(),
        records,
        summary,
        bound,
    })
}

/// One row of the communication table: expected transmissions `k·p·M`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CommRow {
    pub p: f64,
    pub beta: f64,
    pub k: usize,
    pub transmissions: f64,
    /// Replicate mean of the realized cumulative participant count.
    pub realized_transmissions: f64,
    pub mean_grad_norm: f64,
    pub mean_min_grad_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepCell {
    pub p: f64,
    pub beta: f64,
    pub dir: String,
    pub min_grad_norm: Stats,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepSummary {
    pub spec_hash: String,
    pub cells: Vec<SweepCell>,
}

fn cell_name(p: f64, beta: f64) -> String {
    format!("p{p}_beta{beta}")
}

/// Runs the `p × β` grid (the preset grid when `[sweep]` is absent), one
/// subdirectory per cell, plus `comm_table.csv` and `sweep_summary.json`.
pub fn run_sweep(spec: &ExperimentSpec, root: &Path) -> Result<SweepSummary> {
    spec.validate()?;
    let grid = spec.sweep.clone().unwrap_or_default();
    let dir = root.join(spec.output_dir_name());
    fs::create_dir_all(&dir)?;
    let cells: Vec<(f64, f64)> = grid
        .p
        .iter()
        .flat_map(|&p| grid.beta.iter().map(move |&b| (p, b)))
        .collect();
    let clients = spec.problem.clients as f64;

    let outcomes: Vec<(f64, f64, Result<ExperimentOutcome>)> = cells
        .par_iter()
        .map(|&(p, beta)| {
            let mut cell = spec.clone();
            cell.sweep = None;
            cell.params.p = p;
            cell.params.beta = Some(beta);
            cell.name = cell_name(p, beta);
            cell.output = None;
            let out = resolve(&cell).and_then(|res| run_resolved(&res, &dir.join(&cell.name)));
            (p, beta, out)
        })
        .collect();

    let mut comm = csv::Writer::from_path(dir.join("comm_table.csv"))?;
    let mut summary_cells = Vec::new();
    let mut first_error = None;
    for (p, beta, out) in outcomes {
        match out {
            Ok(o) => {
                let n = o.records.len() as f64;
                let rounds = o.records.iter().map(|r| r.len()).min().unwrap_or(0);
                let mut cumulative = vec![0.0; o.records.len()];
                for k in 0..rounds {
                    let mut g = 0.0;
                    let mut mg = 0.0;
                    for (i, recs) in o.records.iter().enumerate() {
                        g += recs[k].grad_norm;
                        mg += recs[k].min_grad_norm;
                        cumulative[i] += recs[k].participants as f64;
                    }
                    comm.serialize(CommRow {
                        p,
                        beta,
                        k,
                        transmissions: k as f64 * p * clients,
                        realized_transmissions: cumulative.iter().sum::<f64>() / n,
                        mean_grad_norm: g / n,
                        mean_min_grad_norm: mg / n,
                    })?;
                }
                summary_cells.push(SweepCell {
                    p,
                    beta,
                    dir: cell_name(p, beta),
                    min_grad_norm: o.summary.min_grad_norm,
                    error: None,
                });
            }
            Err(e) => {
                summary_cells.push(SweepCell {
                    p,
                    beta,
                    dir: cell_name(p, beta),
                    min_grad_norm: Stats::of(Vec::new()),
                    error: Some(e.to_string()),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    comm.flush()?;
    let summary = SweepSummary {
        spec_hash: spec.hash()?,
        cells: summary_cells,
    };
    write_json(&dir.join("sweep_summary.json"), &summary)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

/// The theory bound of a spec without running it.
#[derive(Clone, Debug, Serialize)]
pub struct BoundOutput {
    pub r0: f64,
    pub constants: ProblemConstants<f64>,
    pub params: crate::theory::BoundParams<f64>,
    pub schedule: Option<Schedule<f64>>,
    pub report: BoundReport<f64>,
    pub eta_max: f64,
}

pub fn bound_for_spec(spec: &ExperimentSpec) -> Result<BoundOutput> {
    let mut spec = spec.clone();
    // the bound is about the algorithm, so evaluate it even if theory mode would reject the config
    spec.params.theory_mode = false;
    let res = resolve(&spec)?;
    let params = res.run.bound_params(res.r0);
    let eta_max = crate::theory::eta_max(&res.constants, &params).value;
    Ok(BoundOutput {
        r0: res.r0,
        constants: res.constants.clone(),
        report: res.bound(),
        params,
        schedule: res.schedule,
        eta_max,
    })
}
