//! Property suites behind the `verify` subcommand.
//!
//! Each check evaluates an inequality or identity on generated fixtures and
//! reports the worst observed margin, so a failure says by how much.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fed_core::{client_round, sample_participation, transmit, MemoryInit, RunConfig, Simulation};
use crate::local_ops::{local_gd, local_ig, LocalMode, LocalOpConfig};
use crate::privacy::{calibrate_sigma, dp_utility_bound, schedule_from_corollary, PrivacyBudget, ScheduleInputs, ScheduleName};
use crate::problems::{make_suite, ClientProblem, Component, FederationProblem, QuadraticComponent, SuiteFamily, SuiteSpec};
use crate::theory::{
    avg_gradient_norm_slack, eta_max, local_gd_slacks, local_ig_slack, local_lipschitz_slack, noise_second_moment,
    participation_noise_constant, participation_noise_constant_alt, BoundParams, ProblemConstants,
};
use crate::vecmath::{gaussian_vector, Purpose, RngStream, StreamSeed, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifySuite {
    Lemmas,
    Sampling,
    Convergence,
    Bounds,
    All,
}

impl VerifySuite {
    pub fn as_str(self) -> &'static str {
        match self {
            VerifySuite::Lemmas => "lemmas",
            VerifySuite::Sampling => "sampling",
            VerifySuite::Convergence => "convergence",
            VerifySuite::Bounds => "bounds",
            VerifySuite::All => "all",
        }
    }
}

impl fmt::Display for VerifySuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VerifySuite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lemmas" => Ok(VerifySuite::Lemmas),
            "sampling" => Ok(VerifySuite::Sampling),
            "convergence" => Ok(VerifySuite::Convergence),
            "bounds" => Ok(VerifySuite::Bounds),
            "all" => Ok(VerifySuite::All),
            other => Err(Error::InvalidInput(format!("unknown verify suite `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub suite: VerifySuite,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

struct Collector {
    suite: &'static str,
    out: Vec<CheckResult>,
}

impl Collector {
    fn new(suite: &'static str) -> Self {
        Collector { suite, out: Vec::new() }
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.out.push(CheckResult {
            suite: self.suite,
            name: name.to_string(),
            passed,
            detail,
        });
    }

    /// Records `result`, turning an error into a failed check.
    fn run(&mut self, name: &str, result: Result<(bool, String)>) {
        match result {
            Ok((passed, detail)) => self.push(name, passed, detail),
            Err(e) => self.push(name, false, format!("error: {e}")),
        }
    }
}

/// Runs `suite` (every suite for `All`) with fixtures derived from `seed`.
pub fn verify(suite: VerifySuite, seed: u64) -> VerifyReport {
    let suites: &[VerifySuite] = match suite {
        VerifySuite::All => &[
            VerifySuite::Lemmas,
            VerifySuite::Sampling,
            VerifySuite::Convergence,
            VerifySuite::Bounds,
        ],
        _ => std::slice::from_ref(&suite),
    };
    let mut checks = Vec::new();
    for s in suites {
        checks.extend(match s {
            VerifySuite::Lemmas => lemma_checks(seed),
            VerifySuite::Sampling => sampling_checks(seed),
            VerifySuite::Convergence => convergence_checks(seed),
            VerifySuite::Bounds => bound_checks(seed),
            VerifySuite::All => unreachable!(),
        });
    }
    VerifyReport {
        suite,
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn random_point(problem: &FederationProblem<f64>, stream: &mut RngStream, scale: f64) -> Result<Vector<f64>> {
    let mut x = problem.minimizer().cloned().unwrap_or_else(|| Vector::zeros(problem.dim()));
    x.axpy(1.0, &gaussian_vector(stream, problem.dim(), scale)?);
    Ok(x)
}

/// Problem, evaluation point, stepsize and local step count.
type LemmaFixture = (FederationProblem<f64>, Vector<f64>, f64, usize);

fn lemma_checks(seed: u64) -> Vec<CheckResult> {
    let mut c = Collector::new("lemmas");
    let trials = 200;
    let fixtures = || -> Result<Vec<LemmaFixture>> {
        (0..trials)
            .map(|t| {
                let spec = SuiteSpec::new(SuiteFamily::QuadraticHetero, 3, 1 + t % 4, 2 + t % 5);
                let problem: FederationProblem<f64> = make_suite(&spec, seed.wrapping_add(t as u64))?;
                let mut stream = StreamSeed(seed).stream(t as u64, 0, Purpose::Init);
                let x = random_point(&problem, &mut stream, 2.0)?;
                let gamma = (0.05 + 0.95 * stream.uniform()) / (2.0 * problem.smoothness());
                Ok((problem, x, gamma, 1 + t % 6))
            })
            .collect()
    };
    let cases = match fixtures() {
        Ok(f) => f,
        Err(e) => {
            c.push("fixtures", false, format!("error: {e}"));
            return c.out;
        }
    };

    c.run("local GD inner drift <= 2 gamma |grad f_i|", (|| {
        let mut worst = f64::INFINITY;
        for (problem, x, gamma, steps) in &cases {
            for client in problem.clients() {
                worst = worst.min(local_gd_slacks(client, x, *gamma, *steps, problem.smoothness())?.inner_drift);
            }
        }
        Ok((worst >= -1e-12, format!("min slack {worst:.3e}")))
    })());

    c.run("local GD gap to one step <= 2 L gamma^2 |grad f_i|", (|| {
        let mut worst = f64::INFINITY;
        for (problem, x, gamma, steps) in &cases {
            for client in problem.clients() {
                worst = worst.min(local_gd_slacks(client, x, *gamma, *steps, problem.smoothness())?.one_step_gap);
            }
        }
        Ok((worst >= -1e-12, format!("min slack {worst:.3e}")))
    })());

    c.run("local operator is 2-Lipschitz", (|| {
        let mut worst = f64::INFINITY;
        for (t, (problem, x, gamma, steps)) in cases.iter().enumerate() {
            let mut stream = StreamSeed(seed).stream(t as u64, 1, Purpose::Init);
            let y = random_point(problem, &mut stream, 1.0)?;
            for mode in [LocalMode::Gd { steps: *steps }, LocalMode::Ig] {
                let cfg = LocalOpConfig::new(mode, *gamma)?;
                for client in problem.clients() {
                    worst = worst.min(local_lipschitz_slack(client, x, &y, &cfg)?);
                }
            }
        }
        Ok((worst >= -1e-12, format!("min slack {worst:.3e}")))
    })());

    c.run("IG gap to one step <= gamma L mean inner drift", (|| {
        let mut worst = f64::INFINITY;
        for (problem, x, gamma, _) in &cases {
            worst = worst.min(local_ig_slack(problem, x, *gamma)?);
        }
        Ok((worst >= -1e-12, format!("min slack {worst:.3e}")))
    })());

    c.run("average local gradient norm bound", {
        let mut worst = f64::INFINITY;
        let mut evaluated = 0;
        for (problem, x, _, _) in &cases {
            if let Some(s) = avg_gradient_norm_slack(problem, x) {
                worst = worst.min(s);
                evaluated += 1;
            }
        }
        Ok((evaluated > 0 && worst >= -1e-10, format!("min slack {worst:.3e} over {evaluated} fixtures")))
    });

    c.run("IG equals N-step GD on identical components", (|| {
        let mut worst = 0.0f64;
        for t in 0..100u64 {
            let mut stream = StreamSeed(seed).stream(t, 2, Purpose::Init);
            let d = 1 + (t as usize) % 4;
            let n = 1 + (t as usize) % 5;
            let center = gaussian_vector(&mut stream, d, 1.0)?;
            let curv = 0.5 + stream.uniform();
            let comp: Component<f64> = QuadraticComponent::isotropic(curv, center, 0.0)?.into();
            let client = ClientProblem::new(0, vec![comp; n])?;
            let x = gaussian_vector(&mut stream, d, 3.0)?;
            let gamma = 0.5 / curv * stream.uniform().max(0.01);
            let a = local_ig(&client, &x, gamma)?;
            let b = local_gd(&client, &x, gamma, n)?;
            worst = worst.max(a.distance(&b));
        }
        Ok((worst <= 1e-12, format!("max gap {worst:.3e}")))
    })());

    c.out
}

fn sampling_checks(seed: u64) -> Vec<CheckResult> {
    let mut c = Collector::new("sampling");
    let rounds = 100_000;

    c.run("participation frequency at p = 0.25", (|| {
        let mut hits = 0usize;
        for k in 0..rounds {
            hits += sample_participation::<f64>(seed, k, 0.25, 1)?.count();
        }
        let freq = hits as f64 / rounds as f64;
        Ok(((freq - 0.25).abs() <= 0.005, format!("frequency {freq:.5}")))
    })());

    c.run("inverse-probability weighting is unbiased", (|| {
        let delta = Vector::from_f64s(&[0.6, -0.3, 0.2])?;
        let mut acc = Vector::zeros(3);
        for k in 0..rounds {
            let part = sample_participation::<f64>(seed, k, 0.25, 1)?;
            acc.axpy(part.weights[0], &delta);
        }
        let mean = acc.scale(1.0 / rounds as f64);
        let rel = mean.distance(&delta) / delta.norm();
        Ok((rel <= 0.01, format!("relative error {rel:.4}")))
    })());

    c.run("transmitted second moment within the per-client constant", (|| {
        let (p, sigma, d) = (0.5, 1.0, 4);
        let delta = Vector::from_f64s(&[0.5, 0.5, -0.5, 0.1])?;
        let n = 20_000;
        let mut acc = 0.0;
        for k in 0..n {
            let q = sample_participation::<f64>(seed, k, p, 1)?.weights[0];
            let mut stream = StreamSeed(seed).stream(k as u64, 0, Purpose::DpNoise);
            let sent = transmit(&delta, q, true, sigma, &mut stream)?;
            acc += sent.distance(&delta).powi(2);
        }
        let empirical = acc / n as f64;
        let bound = participation_noise_constant(p, noise_second_moment(sigma, d));
        Ok((empirical <= bound, format!("E|q(D+z) - D|^2 = {empirical:.4} <= B = {bound:.4}")))
    })());

    c.out
}

fn fixed_point_check(seed: u64) -> Result<(bool, String)> {
    let problem: FederationProblem<f64> = make_suite(&SuiteSpec::new(SuiteFamily::QuadraticHetero, 5, 2, 4), seed)?;
    let x_star = problem.minimizer().cloned().expect("quadratic suites have minimizers");
    let mut cfg = RunConfig::new(0.5 / problem.smoothness(), 0.1, 0.01, 0.01, 20);
    cfg.init = MemoryInit::ExactResidual;
    let mut sim = Simulation::new(&problem, x_star.clone(), cfg.clone())?;
    let before = sim.memories();
    for state in sim.clients() {
        let (delta, next) = client_round(state, &problem, &x_star, &cfg)?;
        if !delta.is_zero() || next.v != state.v {
            return Ok((false, format!("client {} moved at the fixed point", state.id)));
        }
    }
    for _ in 0..=cfg.rounds {
        sim.step()?;
    }
    Ok((sim.memories() == before, "memories bit-identical over 21 rounds".into()))
}

fn memory_boundedness_check(seed: u64) -> Result<(bool, String)> {
    let problem: FederationProblem<f64> = make_suite(&SuiteSpec::new(SuiteFamily::QuadraticHetero, 20, 3, 20), seed)?;
    let gamma = 0.5 / problem.smoothness();
    let x0 = {
        let mut s = StreamSeed(seed).stream(0, 0, Purpose::Init);
        random_point(&problem, &mut s, 1.0)?
    };
    let r0 = 0.5;
    let (beta, alpha) = (0.2, 0.5);
    let constants = ProblemConstants::from_problem(&problem, &x0);
    let params = BoundParams {
        eta: 1.0,
        beta,
        alpha,
        r: r0,
        gamma,
        p: 1.0,
        sigma_dp: 0.0,
        rounds: 300,
        local: LocalMode::one_step(),
    };
    let eta = eta_max(&constants, &params).value;
    let mut cfg = RunConfig::new(gamma, beta, eta, alpha, 300);
    cfg.init = MemoryInit::ResidualPlusOffset { offset: r0 };
    let mut sim = Simulation::new(&problem, x0, cfg)?;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..=300 {
        worst = worst.max(sim.step()?.r_k);
    }
    Ok((worst <= r0 + 1e-9, format!("max R_k {worst:.12} vs R0 {r0}")))
}

fn aggregation_identity_check(seed: u64) -> Result<(bool, String)> {
    let problem: FederationProblem<f64> = make_suite(&SuiteSpec::new(SuiteFamily::QuadraticHetero, 8, 2, 5), seed)?;
    let mut cfg = RunConfig::new(0.5 / problem.smoothness(), 0.05, 0.01, 0.01, 200);
    cfg.init = MemoryInit::ResidualPlusOffset { offset: 0.3 };
    let x0 = problem.minimizer().cloned().unwrap_or_else(|| Vector::zeros(5));
    let mut sim = Simulation::new(&problem, x0.map(|v| v + 1.0), cfg)?;
    let mut worst = 0.0f64;
    for _ in 0..=200 {
        sim.step()?;
        worst = worst.max(sim.memory_drift());
    }
    Ok((worst <= 1e-12, format!("max |mean v_i - v_hat| {worst:.3e}")))
}

fn rate_scaling_check(seed: u64) -> Result<(bool, String)> {
    let spec = SuiteSpec::new(SuiteFamily::QuadraticHomo, 10, 5, 10);
    let mut ratios = Vec::new();
    for s in 0..10u64 {
        let problem: FederationProblem<f64> = make_suite(&spec, seed.wrapping_add(s))?;
        let x0 = {
            let mut st = StreamSeed(seed.wrapping_add(s)).stream(0, 0, Purpose::Init);
            let dir = gaussian_vector(&mut st, 10, 1.0)?;
            let mut x = problem.minimizer().cloned().expect("quadratic");
            x.axpy(1.0 / dir.norm(), &dir);
            x
        };
        let mut mins = Vec::new();
        for rounds in [100usize, 1600] {
            let inputs = ScheduleInputs {
                rounds,
                smoothness: problem.smoothness(),
                alpha: 0.01,
                d1: 1.0,
                d2: 2.0,
                delta_inf: 0.0,
                f_gap: 0.0,
                clients: 10,
                dim: 10,
                sampled: 10.0,
                local_steps: 1,
                budget: None,
            };
            let sched = schedule_from_corollary::<f64>(ScheduleName::CorollaryNonprivate, &inputs)?;
            let mut cfg = RunConfig::new(sched.gamma, sched.beta, sched.eta, sched.alpha, rounds);
            cfg.init = MemoryInit::ResidualPlusOffset { offset: sched.r };
            let t = crate::fed_core::run_training(&problem, &x0, &cfg).map_err(|f| f.source)?;
            mins.push(t.min_grad_norm);
        }
        ratios.push(mins[1] / mins[0]);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(((0.4..=0.85).contains(&mean), format!("mean ratio K=1600 vs K=100: {mean:.3} (predicted 0.63)")))
}

fn convergence_checks(seed: u64) -> Vec<CheckResult> {
    let mut c = Collector::new("convergence");
    c.run("EF21 fixed point leaves memories unchanged", fixed_point_check(seed));
    c.run("memory mismatch stays below R0", memory_boundedness_check(seed));
    c.run("server memory equals client mean without noise", aggregation_identity_check(seed));
    c.run("rate scaling of the nonprivate schedule", rate_scaling_check(seed));
    c.out
}

fn noise_drift_check(seed: u64) -> Result<(bool, String)> {
    let (m, d, rounds, reps) = (10usize, 5usize, 100usize, 60u64);
    let (p, sigma, beta) = (0.5, 1.0, 0.05);
    let problem: FederationProblem<f64> = make_suite(&SuiteSpec::new(SuiteFamily::QuadraticHetero, m, 2, d), seed)?;
    let x0 = problem.minimizer().cloned().unwrap_or_else(|| Vector::zeros(d)).map(|v| v + 0.5);
    let mut total = 0.0;
    for r in 0..reps {
        let mut cfg = RunConfig::new(0.5 / problem.smoothness(), beta, 0.01, 0.01, rounds);
        cfg.p = p;
        cfg.private = true;
        cfg.sigma_dp = sigma;
        cfg.seed = seed.wrapping_add(1000 + r);
        total += crate::fed_core::run_training(&problem, &x0, &cfg).map_err(|f| f.source)?.final_memory_drift;
    }
    let mean = total / reps as f64;
    let b = participation_noise_constant(p, noise_second_moment(sigma, d));
    let bound = crate::theory::noise_bound(beta, rounds, b, m, 0.0);
    Ok((mean <= bound && mean >= 0.1 * bound, format!("mean drift {mean:.4} vs bound {bound:.4}")))
}

fn bound_checks(seed: u64) -> Vec<CheckResult> {
    let mut c = Collector::new("bounds");

    c.run("participation constant forms agree", {
        let mut worst = 0.0f64;
        for i in 1..=10 {
            let p = i as f64 / 10.0;
            for s in [0.0, 0.7, 3.0] {
                worst = worst.max((participation_noise_constant(p, s) - participation_noise_constant_alt(p, s)).abs());
            }
        }
        Ok((worst <= 1e-12, format!("max difference {worst:.3e}")))
    });

    c.run("noise scale is linear in p", (|| {
        let b = PrivacyBudget::new(2.0, 1e-5)?;
        let full: f64 = calibrate_sigma(&b, 1.0, 300)?;
        let mut worst = 0.0f64;
        for p in [0.1, 0.25, 0.5, 0.75] {
            worst = worst.max((calibrate_sigma(&b, p, 300)? - p * full).abs());
        }
        Ok((worst <= 1e-15 * full.max(1.0), format!("max deviation {worst:.3e}")))
    })());

    c.run("utility bound decreases with fewer sampled clients", (|| {
        let b = PrivacyBudget::new(8.0, 1e-5)?;
        let vals: Vec<f64> = [20.0, 10.0, 5.0, 1.0]
            .iter()
            .map(|&bh| dp_utility_bound(0.01, 2.0, 1.0, 10, bh, 20, &b))
            .collect();
        Ok((vals.windows(2).all(|w| w[1] < w[0]), format!("{vals:?}")))
    })());

    c.run("noise drift within its expected bound", noise_drift_check(seed));

    c.run("empirical min gradient below the theorem bound", (|| {
        let problem: FederationProblem<f64> = make_suite(&SuiteSpec::new(SuiteFamily::QuadraticHetero, 10, 2, 5), seed)?;
        let x0 = problem.minimizer().cloned().expect("quadratic").map(|v| v + 0.5);
        let gamma = 0.5 / problem.smoothness();
        let constants = ProblemConstants::from_problem(&problem, &x0);
        let mut params = BoundParams {
            eta: 1.0,
            beta: 0.1,
            alpha: 0.5,
            r: 0.5,
            gamma,
            p: 1.0,
            sigma_dp: 0.0,
            rounds: 400,
            local: LocalMode::one_step(),
        };
        params.eta = eta_max(&constants, &params).value;
        let report = crate::theory::bound_for(&constants, &params);
        let mut cfg = RunConfig::new(gamma, params.beta, params.eta, params.alpha, params.rounds);
        cfg.init = MemoryInit::ResidualPlusOffset { offset: params.r };
        let t = crate::fed_core::run_training(&problem, &x0, &cfg).map_err(|f| f.source)?;
        Ok((
            report.all_satisfied() && t.min_grad_norm <= report.total,
            format!("min grad {:.4} vs bound {:.4}", t.min_grad_norm, report.total),
        ))
    })());

    c.out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for s in ["lemmas", "sampling", "convergence", "bounds", "all"] {
            assert_eq!(s.parse::<VerifySuite>().unwrap().as_str(), s);
        }
        assert!("everything".parse::<VerifySuite>().is_err());
    }

    #[test]
    fn lemma_suite_passes() {
        let report = verify(VerifySuite::Lemmas, 3);
        assert!(report.passed, "{:#?}", report.checks);
    }
}
