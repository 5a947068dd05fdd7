//! DP noise calibration and the corollary parameter schedules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_ops::LocalMode;
use crate::scalar::Scalar;
use crate::theory::SideCondition;

fn default_accountant_constant() -> f64 {
    1.0
}

/// Client-level `(ε, δ)` target plus the accountant constant `c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default = "default_accountant_constant")]
    pub c: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let b = PrivacyBudget {
            epsilon,
            delta,
            c: default_accountant_constant(),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_constant(mut self, c: f64) -> Result<Self> {
        self.c = c;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config("privacy.epsilon", "must be positive and finite"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("privacy.delta", "must lie in (0, 1)"));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::config("privacy.c", "must be positive and finite"));
        }
        Ok(())
    }

    /// `log(1/δ)`
    pub fn log_inv_delta(&self) -> f64 {
        -self.delta.ln()
    }
}

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::config("p", format!("participation probability must lie in (0, 1], got {p}")))
    }
}

/// Noise scale with subsampling amplification: `c · p · √((K+1) log(1/δ)) / ε`.
pub fn calibrate_sigma<S: Scalar>(budget: &PrivacyBudget, p: S, rounds: usize) -> Result<S> {
    budget.validate()?;
    check_p(p.as_f64())?;
    let k1 = S::from_usize_lossy(rounds + 1);
    // p is applied last so that sigma(p) == p * sigma(1) holds bitwise
    let full = S::lit(budget.c) * (k1 * S::lit(budget.log_inv_delta())).sqrt() / S::lit(budget.epsilon);
    Ok(p * full)
}

/// Noise level of the reported experiments: `p · β · √(K log(1/δ)) / ε`.
///
/// Uses `K` rather than `K+1` and scales with `β`; never interchange with
/// [`calibrate_sigma`].
pub fn experiment_sigma<S: Scalar>(p: S, beta: S, rounds: usize, budget: &PrivacyBudget) -> S {
    let k = S::from_usize_lossy(rounds);
    p * beta * (k * S::lit(budget.log_inv_delta())).sqrt() / S::lit(budget.epsilon)
}

/// `B₂ = 2c² (B̂/M) log(1/δ) / ε²`.
pub fn subsampled_noise_constant(budget: &PrivacyBudget, sampled: f64, clients: usize) -> f64 {
    2.0 * budget.c * budget.c * (sampled / clients as f64) * budget.log_inv_delta()
        / (budget.epsilon * budget.epsilon)
}

/// Order of the one-step private utility bound:
/// `max(α, 2) √L √(f⁰ − f^inf) · (d B̂ / M² · log(1/δ) / ε²)^{1/4}`.
pub fn dp_utility_bound(
    alpha: f64,
    smoothness: f64,
    f_gap: f64,
    dim: usize,
    sampled: f64,
    clients: usize,
    budget: &PrivacyBudget,
) -> f64 {
    let scale = alpha.max(2.0) * smoothness.sqrt() * f_gap.max(0.0).sqrt();
    let m = clients as f64;
    let inner = dim as f64 * sampled / (m * m) * budget.log_inv_delta() / (budget.epsilon * budget.epsilon);
    scale * inner.powf(0.25)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleName {
    CorollaryNonprivate,
    CorollaryOneStepDp,
    CorollaryMultiGd,
    CorollaryIg,
    Manual,
}

impl ScheduleName {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleName::CorollaryNonprivate => "corollary-nonprivate",
            ScheduleName::CorollaryOneStepDp => "corollary-one-step-dp",
            ScheduleName::CorollaryMultiGd => "corollary-multi-gd",
            ScheduleName::CorollaryIg => "corollary-ig",
            ScheduleName::Manual => "manual",
        }
    }
}

impl fmt::Display for ScheduleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            ScheduleName::CorollaryNonprivate,
            ScheduleName::CorollaryOneStepDp,
            ScheduleName::CorollaryMultiGd,
            ScheduleName::CorollaryIg,
            ScheduleName::Manual,
        ]
        .into_iter()
        .find(|n| n.as_str() == s)
        .ok_or_else(|| Error::config("schedule.name", format!("unknown schedule `{s}`")))
    }
}

/// Everything a corollary may need. Unused fields are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleInputs {
    pub rounds: usize,
    pub smoothness: f64,
    /// Normalization parameter; the one-step DP schedule overrides it with `R`.
    pub alpha: f64,
    pub d1: f64,
    pub d2: f64,
    pub delta_inf: f64,
    /// `f(x⁰) − f^inf`
    pub f_gap: f64,
    pub clients: usize,
    pub dim: usize,
    /// Expected number of sampled clients `B̂ = pM`.
    pub sampled: f64,
    /// Local GD steps for the multi-step schedule.
    pub local_steps: usize,
    pub budget: Option<PrivacyBudget>,
}

/// Fully populated parameters produced by a corollary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Schedule<S> {
    pub name: ScheduleName,
    pub gamma: S,
    pub beta: S,
    pub eta: S,
    pub alpha: S,
    /// Target initial memory mismatch; realized by the residual-plus-offset init.
    pub r: S,
    pub p: S,
    pub sigma_dp: S,
    pub local: LocalMode,
    pub checks: Vec<SideCondition>,
    pub warnings: Vec<String>,
}

fn infeasible(condition: &str, detail: impl Into<String>) -> Error {
    Error::ScheduleInfeasible {
        condition: condition.to_string(),
        detail: detail.into(),
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(infeasible(&format!("{name} > 0"), format!("{name} = {v}")))
    }
}

fn check(name: &str, lhs: f64, rhs: f64, strict: bool) -> SideCondition {
    let margin = rhs - lhs;
    let slack = 1e-12 * lhs.abs().max(rhs.abs());
    SideCondition {
        name: name.to_string(),
        satisfied: if strict { margin > 0.0 } else { margin >= -slack },
        margin,
    }
}

/// Builds the parameter set of the named corollary and re-checks its conditions.
pub fn schedule_from_corollary<S: Scalar>(name: ScheduleName, inputs: &ScheduleInputs) -> Result<Schedule<S>> {
    let k1 = (inputs.rounds + 1) as f64;
    let l = inputs.smoothness;
    positive("L", l)?;
    let mut warnings = Vec::new();
    let mut checks = Vec::new();
    let (gamma, beta, eta, alpha, r, p, sigma, local);
    match name {
        ScheduleName::CorollaryNonprivate => {
            positive("D1", inputs.d1)?;
            positive("D2", inputs.d2)?;
            gamma = 1.0 / (2.0 * l);
            r = inputs.d1 / k1.powf(1.0 / 6.0);
            beta = inputs.d2 / k1.powf(2.0 / 3.0);
            alpha = inputs.alpha;
            let eta_hat = inputs.d1 * inputs.d2 / (4.0 * l * (alpha + inputs.d1));
            eta = eta_hat / k1.powf(5.0 / 6.0);
            p = 1.0;
            sigma = 0.0;
            local = LocalMode::one_step();
            checks.push(check("eta <= gamma*beta*R/(2(alpha+R))", eta, gamma * beta * r / (2.0 * (alpha + r)), false));
        }
        ScheduleName::CorollaryOneStepDp => {
            let budget = inputs
                .budget
                .ok_or_else(|| infeasible("privacy budget present", "one-step DP schedule needs (ε, δ)"))?;
            budget.validate()?;
            let m = inputs.clients as f64;
            if !(inputs.sampled >= 1.0 && inputs.sampled <= m) {
                return Err(infeasible("1 <= B_hat <= M", format!("B_hat = {}, M = {m}", inputs.sampled)));
            }
            positive("f(x0) - f_inf", inputs.f_gap)?;
            gamma = 1.0 / (2.0 * l);
            p = inputs.sampled / m;
            let b2 = subsampled_noise_constant(&budget, inputs.sampled, inputs.clients);
            let beta_hat = (3.0 * inputs.f_gap / gamma).sqrt() * (m / b2).powf(0.25);
            beta = beta_hat / k1;
            r = (inputs.dim as f64).powf(0.25) * (inputs.f_gap / gamma).sqrt() * (b2 / m).powf(0.25);
            alpha = r;
            eta = gamma / 2.0 * beta_hat * r / (alpha + r) / k1;
            sigma = calibrate_sigma(&budget, p, inputs.rounds)?;
            local = LocalMode::one_step();
            if inputs.delta_inf > 0.0 {
                let cap = inputs.delta_inf * (alpha + r) / ((2.0 * l).sqrt() * beta_hat * r);
                let c = check("gamma < Delta_inf(alpha+R)/(sqrt(2L) beta_hat R)", gamma, cap, true);
                if !c.satisfied {
                    return Err(infeasible(&c.name, format!("gamma = {gamma}, bound = {cap}")));
                }
                checks.push(c);
            } else {
                warnings.push(
                    "Δ^inf = 0 leaves the γ condition vacuous; using the explicit η formula".into(),
                );
            }
        }
        ScheduleName::CorollaryMultiGd | ScheduleName::CorollaryIg => {
            positive("D1", inputs.d1)?;
            positive("D2", inputs.d2)?;
            if inputs.delta_inf <= 0.0 {
                return Err(infeasible(
                    "Delta_inf > 0",
                    "Δ^inf = 0 makes eta_hat = min(Δ^inf/(2√(2L)), ·) vanish",
                ));
            }
            gamma = 1.0 / (2.0 * l * k1.powf(1.0 / 8.0));
            r = inputs.d1 / k1.powf(1.0 / 8.0);
            beta = inputs.d2 / k1.powf(5.0 / 8.0);
            alpha = inputs.alpha;
            // IG needs the ρ = 2 memory condition η ≤ γβR/(3(α+R)), hence 6L.
            let memory_factor = if name == ScheduleName::CorollaryIg { 6.0 } else { 4.0 };
            let eta_hat = (inputs.delta_inf / (2.0 * (2.0 * l).sqrt()))
                .min(inputs.d1 * inputs.d2 / (memory_factor * l * (alpha + inputs.d1)));
            eta = eta_hat / k1.powf(7.0 / 8.0);
            p = 1.0;
            sigma = 0.0;
            local = if name == ScheduleName::CorollaryIg {
                LocalMode::Ig
            } else {
                if inputs.local_steps < 2 {
                    return Err(infeasible("T > 1", format!("T = {}", inputs.local_steps)));
                }
                LocalMode::Gd {
                    steps: inputs.local_steps,
                }
            };
            checks.push(check(
                "eta*gamma <= Delta_inf/(4L sqrt(2L)(K+1))",
                eta * gamma,
                inputs.delta_inf / (4.0 * l * (2.0 * l).sqrt() * k1),
                false,
            ));
            let divisor = if name == ScheduleName::CorollaryIg { 3.0 } else { 2.0 };
            checks.push(check(
                "eta <= gamma*beta*R/(c(alpha+R))",
                eta,
                gamma * beta * r / (divisor * (alpha + r)),
                false,
            ));
        }
        ScheduleName::Manual => {
            return Err(infeasible(
                "corollary schedule",
                "manual parameters are taken from the run config, not derived",
            ));
        }
    }
    checks.push(check("beta/(alpha+R) < 1", beta / (alpha + r), 1.0, true));
    checks.push(check("gamma <= 1/(2L)", gamma, 1.0 / (2.0 * l), false));
    if let Some(bad) = checks.iter().find(|c| !c.satisfied) {
        return Err(infeasible(&bad.name, format!("margin {}", bad.margin)));
    }
    for (n, v) in [("gamma", gamma), ("beta", beta), ("eta", eta), ("R", r)] {
        positive(n, v)?;
    }
    Ok(Schedule {
        name,
        gamma: S::lit(gamma),
        beta: S::lit(beta),
        eta: S::lit(eta),
        alpha: S::lit(alpha),
        r: S::lit(r),
        p: S::lit(p),
        sigma_dp: S::lit(sigma),
        local,
        checks,
        warnings,
    })
}
