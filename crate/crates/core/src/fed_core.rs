//! The Fed-α-NormEC round engine.
//!
//! Each round every client refreshes its error-feedback memory, a Bernoulli
//! subset transmits the (optionally noised) normalized innovation, and the
//! server takes a normalized step along its running memory estimate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_ops::{apply_local, residual_to_update, LocalMode, LocalOpConfig};
use crate::problems::FederationProblem;
use crate::scalar::Scalar;
use crate::theory::{eta_max, BoundParams, ProblemConstants};
use crate::vecmath::{gaussian_vector, smoothed_normalize, Purpose, RngStream, StreamSeed, Vector};

/// How the client memories `v_i⁰` are initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MemoryInit {
    Zero,
    #[default]
    ExactResidual,
    /// Exact residual plus `e = (D, 0, …, 0)`, so that `R₀ = D`.
    ResidualPlusOffset { offset: f64 },
}

/// Memories `v_i⁰` for every client at `x0`.
pub fn init_memories<S: Scalar>(
    strategy: MemoryInit,
    problem: &FederationProblem<S>,
    x0: &Vector<S>,
    local: &LocalOpConfig<S>,
) -> Result<Vec<Vector<S>>> {
    let d = problem.dim();
    if x0.dim() != d {
        return Err(Error::InvalidInput(format!("x0 has dimension {}, problem has {d}", x0.dim())));
    }
    problem
        .clients()
        .iter()
        .map(|client| match strategy {
            MemoryInit::Zero => Ok(Vector::zeros(d)),
            MemoryInit::ExactResidual | MemoryInit::ResidualPlusOffset { .. } => {
                let tx = apply_local(client, x0, local)?;
                let mut v = residual_to_update(x0, &tx, local.gamma);
                if let MemoryInit::ResidualPlusOffset { offset } = strategy {
                    v[0] += S::lit(offset);
                }
                Ok(v)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState<S> {
    pub id: usize,
    /// Error-feedback memory `v_i`.
    pub v: Vector<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState<S> {
    pub x: Vector<S>,
    pub v_hat: Vector<S>,
    pub round: usize,
}

impl<S: Scalar> ServerState<S> {
    /// Starts at `x0` with `v̂⁰ = (1/M) Σ v_i⁰`.
    pub fn new(x0: Vector<S>, clients: &[ClientState<S>]) -> Result<Self> {
        let v_hat = Vector::mean(clients.iter().map(|c| &c.v))
            .ok_or_else(|| Error::InvalidInput("at least one client is required".into()))?;
        Ok(ServerState { x: x0, v_hat, round: 0 })
    }
}

/// Parameters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig<S> {
    pub gamma: S,
    pub beta: S,
    pub eta: S,
    pub alpha: S,
    pub p: S,
    pub sigma_dp: S,
    /// `K`; rounds `0..=K` are executed.
    pub rounds: usize,
    pub local: LocalMode,
    pub private: bool,
    pub server_normalize: bool,
    pub seed: u64,
    pub init: MemoryInit,
    /// Below this `‖v̂‖` the normalized step is skipped.
    pub degenerate_tol: S,
    /// Check the step-size conditions of the convergence theorem before running.
    pub theory_mode: bool,
}

impl<S: Scalar> RunConfig<S> {
    /// Non-private, full participation, one local GD step, normalized server.
    pub fn new(gamma: S, beta: S, eta: S, alpha: S, rounds: usize) -> Self {
        RunConfig {
            gamma,
            beta,
            eta,
            alpha,
            p: S::one(),
            sigma_dp: S::zero(),
            rounds,
            local: LocalMode::one_step(),
            private: false,
            server_normalize: true,
            seed: 0,
            init: MemoryInit::default(),
            degenerate_tol: S::lit(1e-12),
            theory_mode: false,
        }
    }

    pub fn local_config(&self) -> LocalOpConfig<S> {
        LocalOpConfig {
            mode: self.local,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: S| {
            if v.is_finite() && v > S::zero() {
                Ok(())
            } else {
                Err(Error::config(name, format!("must be positive and finite, got {v}")))
            }
        };
        pos("gamma", self.gamma)?;
        pos("beta", self.beta)?;
        pos("eta", self.eta)?;
        if !(self.alpha.is_finite() && self.alpha >= S::zero()) {
            return Err(Error::config("alpha", format!("must be nonnegative, got {}", self.alpha)));
        }
        if !(self.p > S::zero() && self.p <= S::one()) {
            return Err(Error::config("p", format!("must lie in (0, 1], got {}", self.p)));
        }
        if !(self.sigma_dp.is_finite() && self.sigma_dp >= S::zero()) {
            return Err(Error::config("sigma_dp", format!("must be nonnegative, got {}", self.sigma_dp)));
        }
        if !(self.degenerate_tol >= S::zero()) {
            return Err(Error::config("degenerate_tol", "must be nonnegative"));
        }
        if let MemoryInit::ResidualPlusOffset { offset } = self.init {
            if !(offset.is_finite() && offset >= 0.0) {
                return Err(Error::config("init.offset", "must be nonnegative"));
            }
        }
        self.local.validate()
    }

    /// Bound parameters for this config given the initial mismatch `r`.
    pub fn bound_params(&self, r: S) -> BoundParams<S> {
        BoundParams {
            eta: self.eta,
            beta: self.beta,
            alpha: self.alpha,
            r,
            gamma: self.gamma,
            p: self.p,
            sigma_dp: if self.private { self.sigma_dp } else { S::zero() },
            rounds: self.rounds,
            local: self.local,
        }
    }
}

/// Metrics of round `k`, measured at `x^k` before the round's update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub k: usize,
    pub f_value: f64,
    pub grad_norm: f64,
    pub min_grad_norm: f64,
    /// `max_i ‖v_i^k − (x^k − T_i(x^k))/γ‖`; NaN for memoryless methods.
    pub r_k: f64,
    pub participants: usize,
    /// `‖v̂^{k+1}‖` (the server direction used this round).
    pub v_hat_norm: f64,
    pub step_norm: f64,
    pub degenerate: bool,
}

/// Participation mask of one round.
#[derive(Clone, Debug, PartialEq)]
pub struct Participation<S> {
    pub mask: Vec<bool>,
    /// `1/p` for participants, 0 otherwise.
    pub weights: Vec<S>,
}

impl<S> Participation<S> {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Independent Bernoulli(p) draw per client from its own participation stream.
pub fn sample_participation<S: Scalar>(seed: u64, round: usize, p: S, clients: usize) -> Result<Participation<S>> {
    if !(p > S::zero() && p <= S::one()) {
        return Err(Error::config("p", format!("must lie in (0, 1], got {p}")));
    }
    let q = S::one() / p;
    let pf = p.as_f64();
    let root = StreamSeed(seed);
    let mask: Vec<bool> = (0..clients)
        .map(|i| pf >= 1.0 || root.stream(round as u64, i as u64, Purpose::Participation).bernoulli(pf))
        .collect();
    let weights = mask.iter().map(|&m| if m { q } else { S::zero() }).collect();
    Ok(Participation { mask, weights })
}

/// One client's memory update. Returns `Δ_i` and the updated state.
pub fn client_round<S: Scalar>(
    state: &ClientState<S>,
    problem: &FederationProblem<S>,
    x: &Vector<S>,
    cfg: &RunConfig<S>,
) -> Result<(Vector<S>, ClientState<S>)> {
    let client = problem.client(state.id)?;
    let local = cfg.local_config();
    let tx = apply_local(client, x, &local)?;
    let resid = residual_to_update(x, &tx, cfg.gamma);
    let delta = memory_innovation(&state.v, &resid, cfg.alpha)?;
    let mut v = state.v.clone();
    v.axpy(cfg.beta, &delta);
    Ok((delta, ClientState { id: state.id, v }))
}

fn memory_innovation<S: Scalar>(v: &Vector<S>, resid: &Vector<S>, alpha: S) -> Result<Vector<S>> {
    smoothed_normalize(&(resid - v), alpha)
}

/// `Δ̂_i = q_i (Δ_i + z_i)`. Silent clients return zero and draw nothing.
pub fn transmit<S: Scalar>(
    delta: &Vector<S>,
    q: S,
    private: bool,
    sigma_dp: S,
    stream: &mut RngStream,
) -> Result<Vector<S>> {
    if q.is_zero() {
        return Ok(Vector::zeros(delta.dim()));
    }
    if private {
        let z = gaussian_vector(stream, delta.dim(), sigma_dp)?;
        Ok((delta + &z).scale(q))
    } else {
        Ok(delta.scale(q))
    }
}

/// `v̂ += (β/M) Σ Δ̂_i` over all `M` slots.
pub fn server_aggregate<S: Scalar>(server: &mut ServerState<S>, transmitted: &[Vector<S>], beta: S) {
    let m = S::from_usize_lossy(transmitted.len());
    let mut sum = Vector::zeros(server.v_hat.dim());
    for t in transmitted {
        sum.axpy(S::one(), t);
    }
    server.v_hat.axpy(beta / m, &sum);
}

/// Moves `x` along `−v̂`; returns `(step_norm, degenerate)`.
pub fn server_step<S: Scalar>(server: &mut ServerState<S>, eta: S, normalize: bool, tol: S) -> (S, bool) {
    let n = server.v_hat.norm();
    let (scale, degenerate) = if normalize {
        if n < tol || n.is_zero() {
            (S::zero(), true)
        } else {
            (eta / n, false)
        }
    } else {
        (eta, false)
    };
    if !scale.is_zero() {
        let step = server.v_hat.scale(scale);
        server.x.axpy(-S::one(), &step);
        server.round += 1;
        (step.norm(), degenerate)
    } else {
        server.round += 1;
        (S::zero(), degenerate)
    }
}

/// Ran out of rounds early; carries the records produced before the failure.
#[derive(Clone, Debug, PartialEq)]
pub struct RunFailure {
    pub records: Vec<RoundRecord>,
    pub source: Error,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} recorded rounds)", self.source, self.records.len())
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S> {
    pub records: Vec<RoundRecord>,
    pub final_x: Vector<S>,
    pub min_grad_norm: f64,
    /// `‖(1/M) Σ v_i − v̂‖` after the last round.
    pub final_memory_drift: f64,
    /// Largest `‖Δ_i‖` of any client in any round.
    pub max_payload_norm: f64,
}

/// Round-by-round driver holding the full simulator state.
#[derive(Clone, Debug)]
pub struct Simulation<'a, S> {
    problem: &'a FederationProblem<S>,
    cfg: RunConfig<S>,
    clients: Vec<ClientState<S>>,
    server: ServerState<S>,
    min_grad: f64,
    max_payload: f64,
}

impl<'a, S: Scalar> Simulation<'a, S> {
    /// Validates `cfg`, initializes memories and, in theory mode, checks the
    /// step-size conditions.
    pub fn new(problem: &'a FederationProblem<S>, x0: Vector<S>, cfg: RunConfig<S>) -> Result<Self> {
        cfg.validate()?;
        let local = cfg.local_config();
        let memories = init_memories(cfg.init, problem, &x0, &local)?;
        let clients: Vec<ClientState<S>> = memories
            .into_iter()
            .enumerate()
            .map(|(id, v)| ClientState { id, v })
            .collect();
        let server = ServerState::new(x0, &clients)?;
        let sim = Simulation {
            problem,
            cfg,
            clients,
            server,
            min_grad: f64::INFINITY,
            max_payload: 0.0,
        };
        if sim.cfg.theory_mode {
            sim.check_theory()?;
        }
        Ok(sim)
    }

    /// Like [`Simulation::new`] with explicit memories; `v̂⁰` is their mean.
    pub fn with_memories(
        problem: &'a FederationProblem<S>,
        x0: Vector<S>,
        memories: Vec<Vector<S>>,
        cfg: RunConfig<S>,
    ) -> Result<Self> {
        cfg.validate()?;
        if memories.len() != problem.num_clients() || memories.iter().any(|v| v.dim() != problem.dim()) {
            return Err(Error::InvalidInput("one memory of the problem dimension per client is required".into()));
        }
        let clients: Vec<ClientState<S>> = memories
            .into_iter()
            .enumerate()
            .map(|(id, v)| ClientState { id, v })
            .collect();
        let server = ServerState::new(x0, &clients)?;
        Ok(Simulation {
            problem,
            cfg,
            clients,
            server,
            min_grad: f64::INFINITY,
            max_payload: 0.0,
        })
    }

    fn check_theory(&self) -> Result<()> {
        let r0 = self.current_r()?;
        let c = &self.cfg;
        if !(c.beta / (c.alpha + r0) < S::one()) {
            return Err(Error::TheoryCondition {
                condition: "beta/(alpha+R0) < 1".into(),
                detail: format!("beta = {}, alpha = {}, R0 = {r0}", c.beta, c.alpha),
            });
        }
        let constants = ProblemConstants::from_problem(self.problem, &self.server.x);
        let cap = eta_max(&constants, &c.bound_params(r0));
        if let Some(w) = &cap.warning {
            log::warn!("{w}");
        }
        let slack = S::lit(1e-12) * cap.value;
        if c.eta > cap.value + slack {
            return Err(Error::TheoryCondition {
                condition: "eta <= eta_max".into(),
                detail: format!("eta = {}, eta_max = {} ({:?} branch)", c.eta, cap.value, cap.binding),
            });
        }
        Ok(())
    }

    pub fn config(&self) -> &RunConfig<S> {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientState<S>] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState<S> {
        &self.server
    }

    pub fn x(&self) -> &Vector<S> {
        &self.server.x
    }

    pub fn memories(&self) -> Vec<Vector<S>> {
        self.clients.iter().map(|c| c.v.clone()).collect()
    }

    /// `(1/M) Σ v_i`
    pub fn mean_memory(&self) -> Vector<S> {
        Vector::mean(self.clients.iter().map(|c| &c.v)).expect("at least one client")
    }

    /// `‖(1/M) Σ v_i − v̂‖`
    pub fn memory_drift(&self) -> S {
        (&self.mean_memory() - &self.server.v_hat).norm()
    }

    /// `max_i ‖v_i − (x − T_i(x))/γ‖` at the current iterate.
    pub fn current_r(&self) -> Result<S> {
        crate::theory::compute_r(&self.memories(), self.problem, &self.server.x, &self.cfg.local_config())
    }

    pub fn max_payload_norm(&self) -> f64 {
        self.max_payload
    }

    /// Executes round `k = server.round` and returns its record.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let k = self.server.round;
        let x = self.server.x.clone();
        if !x.is_finite() {
            return Err(Error::DivergedIterate { round: k });
        }
        let grad_norm = self.problem.gradient(&x).norm().as_f64();
        let f_value = self.problem.value(&x).as_f64();
        if !(grad_norm.is_finite() && f_value.is_finite()) {
            return Err(Error::DivergedIterate { round: k });
        }
        self.min_grad = self.min_grad.min(grad_norm);

        let local = self.cfg.local_config();
        let part = sample_participation(self.cfg.seed, k, self.cfg.p, self.clients.len())?;
        let mut r_k = S::zero();
        let mut transmitted = Vec::with_capacity(self.clients.len());
        for (state, &q) in self.clients.iter_mut().zip(&part.weights) {
            let client = self.problem.client(state.id)?;
            let tx = apply_local(client, &x, &local)?;
            let resid = residual_to_update(&x, &tx, self.cfg.gamma);
            let innovation = &resid - &state.v;
            r_k = r_k.max(innovation.norm());
            let delta = smoothed_normalize(&innovation, self.cfg.alpha)?;
            self.max_payload = self.max_payload.max(delta.norm().as_f64());
            state.v.axpy(self.cfg.beta, &delta);
            let mut stream = StreamSeed(self.cfg.seed).stream(k as u64, state.id as u64, Purpose::DpNoise);
            transmitted.push(transmit(&delta, q, self.cfg.private, self.cfg.sigma_dp, &mut stream)?);
        }
        server_aggregate(&mut self.server, &transmitted, self.cfg.beta);
        let v_hat_norm = self.server.v_hat.norm().as_f64();
        let (step_norm, degenerate) =
            server_step(&mut self.server, self.cfg.eta, self.cfg.server_normalize, self.cfg.degenerate_tol);
        if degenerate {
            log::debug!("round {k}: ‖v̂‖ below tolerance, step skipped");
        }
        if !self.server.x.is_finite() {
            return Err(Error::DivergedIterate { round: k });
        }
        Ok(RoundRecord {
            k,
            f_value,
            grad_norm,
            min_grad_norm: self.min_grad,
            r_k: r_k.as_f64(),
            participants: part.count(),
            v_hat_norm,
            step_norm: step_norm.as_f64(),
            degenerate,
        })
    }

    /// Runs the remaining rounds up to `K` inclusive.
    pub fn run(mut self) -> std::result::Result<Trajectory<S>, RunFailure> {
        let mut records = Vec::with_capacity(self.cfg.rounds + 1);
        while self.server.round <= self.cfg.rounds {
            match self.step() {
                Ok(r) => records.push(r),
                Err(source) => return Err(RunFailure { records, source }),
            }
        }
        Ok(Trajectory {
            final_memory_drift: self.memory_drift().as_f64(),
            final_x: self.server.x,
            min_grad_norm: self.min_grad,
            max_payload_norm: self.max_payload,
            records,
        })
    }
}

/// Runs `K+1` rounds from `x0`.
pub fn run_training<S: Scalar>(
    problem: &FederationProblem<S>,
    x0: &Vector<S>,
    cfg: &RunConfig<S>,
) -> std::result::Result<Trajectory<S>, RunFailure> {
    let sim = Simulation::new(problem, x0.clone(), cfg.clone()).map_err(|source| RunFailure {
        records: Vec::new(),
        source,
    })?;
    sim.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{ClientProblem, Component, QuadraticComponent};

    fn pair(l2: f64) -> FederationProblem<f64> {
        let c = |l: f64, center: f64| -> Component<f64> {
            QuadraticComponent::isotropic(l, Vector::from_f64s(&[center]).unwrap(), 0.0)
                .unwrap()
                .into()
        };
        FederationProblem::new(vec![
            ClientProblem::new(0, vec![c(1.0, 1.0)]).unwrap(),
            ClientProblem::new(1, vec![c(l2, -1.0)]).unwrap(),
        ])
        .unwrap()
    }

    fn x1(v: f64) -> Vector<f64> {
        Vector::from_f64s(&[v]).unwrap()
    }

    #[test]
    fn hand_trace_round() {
        let problem = pair(1.0);
        let mut cfg = RunConfig::new(0.5, 0.5, 0.1, 1.0, 0);
        cfg.init = MemoryInit::Zero;
        let mut sim = Simulation::new(&problem, x1(2.0), cfg).unwrap();
        let rec = sim.step().unwrap();
        assert_eq!(sim.clients()[0].v[0], 0.25);
        assert_eq!(sim.clients()[1].v[0], 0.375);
        assert_eq!(sim.server().v_hat[0], 0.3125);
        assert!((sim.x()[0] - 1.9).abs() < 1e-15);
        assert_eq!(rec.participants, 2);
        assert_eq!(rec.r_k, 3.0);
    }

    #[test]
    fn degenerate_step_is_flagged() {
        let mut s = ServerState {
            x: x1(1.0),
            v_hat: x1(0.0),
            round: 0,
        };
        let (n, flag) = server_step(&mut s, 0.3, true, 1e-12);
        assert!(flag);
        assert_eq!(n, 0.0);
        assert_eq!(s.x[0], 1.0);
    }

    #[test]
    fn silent_client_draws_nothing() {
        let mut a = StreamSeed(1).stream(0, 0, Purpose::DpNoise);
        let b = a.clone();
        let out = transmit(&x1(0.5), 0.0, true, 1.0, &mut a).unwrap();
        assert!(out.is_zero());
        assert_eq!(a.uniform(), b.clone().uniform());
    }

    #[test]
    fn k_zero_runs_once() {
        let problem = pair(9.0);
        let cfg = RunConfig::new(0.05, 0.1, 0.01, 0.01, 0);
        let t = run_training(&problem, &x1(0.0), &cfg).unwrap();
        assert_eq!(t.records.len(), 1);
    }

    #[test]
    fn invalid_p_rejected() {
        let problem = pair(1.0);
        let mut cfg = RunConfig::new(0.5, 0.5, 0.1, 1.0, 3);
        cfg.p = 1.5;
        let err = run_training(&problem, &x1(0.0), &cfg).unwrap_err();
        assert!(matches!(err.source, Error::Config { ref path, .. } if path == "p"));
    }

    #[test]
    fn theory_mode_rejects_large_beta() {
        let problem = pair(1.0);
        let mut cfg = RunConfig::new(0.5, 5.0, 0.01, 0.5, 3);
        cfg.theory_mode = true;
        cfg.init = MemoryInit::ResidualPlusOffset { offset: 0.5 };
        let err = Simulation::new(&problem, x1(0.0), cfg).unwrap_err();
        assert!(matches!(err, Error::TheoryCondition { .. }));
    }
}
