//! DP-FedAvg with smoothed normalization of the raw local model update.

use crate::error::{Error, Result};
use crate::fed_core::{sample_participation, transmit, RoundRecord, RunFailure, Trajectory};
use crate::local_ops::{apply_local, LocalMode, LocalOpConfig};
use crate::problems::FederationProblem;
use crate::scalar::Scalar;
use crate::vecmath::{smoothed_normalize, Purpose, StreamSeed, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct FedAvgConfig<S> {
    pub eta: S,
    pub gamma: S,
    pub local: LocalMode,
    pub p: S,
    pub sigma_dp: S,
    /// Normalization parameter of `Ψ`.
    pub alpha: S,
    pub private: bool,
    pub rounds: usize,
    pub seed: u64,
}

impl<S: Scalar> FedAvgConfig<S> {
    /// Noiseless, full participation, one local step and `η = γ`.
    pub fn new(gamma: S, alpha: S, rounds: usize) -> Self {
        FedAvgConfig {
            eta: gamma,
            gamma,
            local: LocalMode::one_step(),
            p: S::one(),
            sigma_dp: S::zero(),
            alpha,
            private: false,
            rounds,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v > S::zero()) {
                return Err(Error::config(name, format!("must be positive and finite, got {v}")));
            }
        }
        if !(self.alpha.is_finite() && self.alpha >= S::zero()) {
            return Err(Error::config("alpha", "must be nonnegative"));
        }
        if !(self.p > S::zero() && self.p <= S::one()) {
            return Err(Error::config("p", format!("must lie in (0, 1], got {}", self.p)));
        }
        if !(self.sigma_dp.is_finite() && self.sigma_dp >= S::zero()) {
            return Err(Error::config("sigma_dp", "must be nonnegative"));
        }
        self.local.validate()
    }
}

/// What one FedAvg round did.
#[derive(Clone, Debug, PartialEq)]
pub struct FedAvgStep<S> {
    pub x: Vector<S>,
    pub participants: usize,
    /// No client was sampled and `x` was left unchanged.
    pub empty: bool,
    pub direction_norm: S,
    pub max_payload_norm: S,
}

/// `x − (η/B) [Σ_{i∈S} Ψ(x − T_i(x)) + z_i]` with `B = |S|`.
pub fn dp_fedavg_round<S: Scalar>(
    x: &Vector<S>,
    problem: &FederationProblem<S>,
    cfg: &FedAvgConfig<S>,
    round: usize,
) -> Result<FedAvgStep<S>> {
    let local = LocalOpConfig {
        mode: cfg.local,
        gamma: cfg.gamma,
    };
    let part = sample_participation::<S>(cfg.seed, round, cfg.p, problem.num_clients())?;
    let b = part.count();
    if b == 0 {
        return Ok(FedAvgStep {
            x: x.clone(),
            participants: 0,
            empty: true,
            direction_norm: S::zero(),
            max_payload_norm: S::zero(),
        });
    }
    let mut sum = Vector::zeros(x.dim());
    let mut max_payload = S::zero();
    for (client, &sampled) in problem.clients().iter().zip(&part.mask) {
        if !sampled {
            continue;
        }
        let tx = apply_local(client, x, &local)?;
        let psi = smoothed_normalize(&(x - &tx), cfg.alpha)?;
        max_payload = max_payload.max(psi.norm());
        let mut stream = StreamSeed(cfg.seed).stream(round as u64, client.index() as u64, Purpose::DpNoise);
        // weight 1 here: FedAvg averages over the realized subset instead of reweighting
        sum.axpy(S::one(), &transmit(&psi, S::one(), cfg.private, cfg.sigma_dp, &mut stream)?);
    }
    let direction = sum.scale(S::one() / S::from_usize_lossy(b));
    let mut next = x.clone();
    next.axpy(-cfg.eta, &direction);
    Ok(FedAvgStep {
        x: next,
        participants: b,
        empty: false,
        direction_norm: direction.norm(),
        max_payload_norm: max_payload,
    })
}

/// `K+1` rounds of DP-FedAvg. Records carry `r_k = NaN` (no memory).
pub fn run_fedavg<S: Scalar>(
    problem: &FederationProblem<S>,
    x0: &Vector<S>,
    cfg: &FedAvgConfig<S>,
) -> std::result::Result<Trajectory<S>, RunFailure> {
    let mut records = Vec::with_capacity(cfg.rounds + 1);
    let fail = |records: Vec<RoundRecord>, source: Error| RunFailure { records, source };
    if let Err(e) = cfg.validate() {
        return Err(fail(records, e));
    }
    let mut x = x0.clone();
    let mut min_grad = f64::INFINITY;
    let mut max_payload = 0.0f64;
    for k in 0..=cfg.rounds {
        let grad_norm = problem.gradient(&x).norm().as_f64();
        let f_value = problem.value(&x).as_f64();
        if !(grad_norm.is_finite() && f_value.is_finite()) {
            return Err(fail(records, Error::DivergedIterate { round: k }));
        }
        min_grad = min_grad.min(grad_norm);
        let step = match dp_fedavg_round(&x, problem, cfg, k) {
            Ok(s) => s,
            Err(e) => return Err(fail(records, e)),
        };
        if !step.x.is_finite() {
            return Err(fail(records, Error::DivergedIterate { round: k }));
        }
        max_payload = max_payload.max(step.max_payload_norm.as_f64());
        records.push(RoundRecord {
            k,
            f_value,
            grad_norm,
            min_grad_norm: min_grad,
            r_k: f64::NAN,
            participants: step.participants,
            v_hat_norm: step.direction_norm.as_f64(),
            step_norm: x.distance(&step.x).as_f64(),
            degenerate: step.empty,
        });
        x = step.x;
    }
    Ok(Trajectory {
        records,
        final_x: x,
        min_grad_norm: min_grad,
        final_memory_drift: 0.0,
        max_payload_norm: max_payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{ClientProblem, Component, QuadraticComponent};

    fn quad(l: f64, center: f64) -> Component<f64> {
        QuadraticComponent::isotropic(l, Vector::from_f64s(&[center]).unwrap(), 0.0)
            .unwrap()
            .into()
    }

    #[test]
    fn fixed_points_stay_put() {
        let problem = FederationProblem::new(vec![
            ClientProblem::new(0, vec![quad(1.0, 0.5)]).unwrap(),
            ClientProblem::new(1, vec![quad(3.0, 0.5)]).unwrap(),
        ])
        .unwrap();
        let x = Vector::from_f64s(&[0.5]).unwrap();
        let s = dp_fedavg_round(&x, &problem, &FedAvgConfig::new(0.1, 0.01, 0), 0).unwrap();
        assert_eq!(s.x, x);
    }

    #[test]
    fn single_client_unit_step() {
        let problem = FederationProblem::new(vec![ClientProblem::new(0, vec![quad(2.0, -3.0)]).unwrap()]).unwrap();
        let x = Vector::from_f64s(&[1.0]).unwrap();
        let mut cfg = FedAvgConfig::new(0.1, 0.0, 0);
        cfg.eta = 0.25;
        let s = dp_fedavg_round(&x, &problem, &cfg, 0).unwrap();
        assert!((s.x[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_round_is_flagged() {
        let problem = FederationProblem::new(vec![ClientProblem::new(0, vec![quad(1.0, 0.0)]).unwrap()]).unwrap();
        let x = Vector::from_f64s(&[1.0]).unwrap();
        let mut cfg = FedAvgConfig::new(0.1, 0.01, 0);
        cfg.p = 1e-9;
        let s = dp_fedavg_round(&x, &problem, &cfg, 0).unwrap();
        assert!(s.empty);
        assert_eq!(s.x, x);
    }

    #[test]
    fn k_zero_one_record() {
        let problem = FederationProblem::new(vec![ClientProblem::new(0, vec![quad(1.0, 0.0)]).unwrap()]).unwrap();
        let t = run_fedavg(&problem, &Vector::from_f64s(&[1.0]).unwrap(), &FedAvgConfig::new(0.1, 0.01, 0)).unwrap();
        assert_eq!(t.records.len(), 1);
    }
}
