//! Numeric evaluation of the convergence bounds, step-size conditions and
//! drift/noise bookkeeping used to check runs against theory.

use serde::Serialize;

use crate::error::Result;
use crate::local_ops::{apply_local, local_gd_trace, local_ig_trace, LocalMode, LocalOpConfig};
use crate::problems::{ClientProblem, FederationProblem};
use crate::scalar::Scalar;
use crate::vecmath::Vector;

/// Problem-side constants entering the bounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProblemConstants<S> {
    /// `f(x⁰)`
    pub f0: S,
    pub f_inf: S,
    /// Smoothness constant `L`.
    pub smoothness: S,
    pub delta_inf: S,
    /// Mean over clients of `Δ_i^inf`; only used by the IG bound.
    pub mean_delta_inf_i: S,
    pub clients: usize,
    pub dim: usize,
    /// Set when `f_inf` or the gaps came from surrogate lower bounds.
    pub approximate: bool,
}

impl<S: Scalar> ProblemConstants<S> {
    /// Reads every constant off a problem at the starting point `x0`.
    ///
    /// Problems without a known `f^inf` fall back to the lower bound 0, which
    /// is valid for nonnegative losses, and are flagged approximate.
    pub fn from_problem(problem: &FederationProblem<S>, x0: &Vector<S>) -> Self {
        let het = problem.delta_inf();
        let per_client = problem.delta_inf_per_client();
        let m = S::from_usize_lossy(problem.num_clients());
        let mean_i = per_client.iter().map(|h| h.value).sum::<S>() / m;
        ProblemConstants {
            f0: problem.value(x0),
            f_inf: problem.f_inf().unwrap_or(S::zero()),
            smoothness: problem.smoothness(),
            delta_inf: het.value,
            mean_delta_inf_i: mean_i.max(S::zero()),
            clients: problem.num_clients(),
            dim: problem.dim(),
            approximate: het.approximate || problem.f_inf().is_none(),
        }
    }
}

/// Algorithm-side parameters entering the bounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundParams<S> {
    pub eta: S,
    pub beta: S,
    pub alpha: S,
    /// Initial memory mismatch `R`.
    pub r: S,
    pub gamma: S,
    pub p: S,
    pub sigma_dp: S,
    pub rounds: usize,
    pub local: LocalMode,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundTerms<S> {
    /// `3 (f⁰ − f^inf) / (η (K+1))`
    pub init_term: S,
    /// `2R`
    pub r_term: S,
    /// `2 √(β² B (K+1) / M)`
    pub noise_term: S,
    /// Client-drift terms proportional to `γ`.
    pub drift_term: S,
    /// `η L / 2`
    pub eta_term: S,
}

impl<S: Scalar> BoundTerms<S> {
    pub fn sum(&self) -> S {
        self.init_term + self.r_term + self.noise_term + self.drift_term + self.eta_term
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SideCondition {
    pub name: String,
    pub satisfied: bool,
    /// Positive when satisfied: how far the quantity is from the threshold.
    pub margin: f64,
}

impl SideCondition {
    fn less_than(name: &str, lhs: f64, rhs: f64, strict: bool) -> Self {
        let margin = rhs - lhs;
        // one-ulp-scale slack so values computed as exactly the threshold pass
        let slack = 1e-12 * rhs.abs().max(lhs.abs());
        let satisfied = if strict { margin > 0.0 } else { margin >= -slack };
        SideCondition {
            name: name.to_string(),
            satisfied,
            margin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport<S> {
    pub terms: BoundTerms<S>,
    pub total: S,
    pub side_conditions: Vec<SideCondition>,
    /// Constants were approximate; the bound is indicative only.
    pub advisory: bool,
    pub warnings: Vec<String>,
}

impl<S: Scalar> BoundReport<S> {
    pub fn all_satisfied(&self) -> bool {
        self.side_conditions.iter().all(|c| c.satisfied)
    }
}

/// Per-client second moment constant, written `2p(1 − 1/p)² + 2(1 − p) + 2s/p`.
///
/// `noise_second_moment` is `E‖z_i‖²` of one client's DP noise vector.
pub fn participation_noise_constant<S: Scalar>(p: S, noise_second_moment: S) -> S {
    let two = S::lit(2.0);
    let one = S::one();
    two * p * (one - one / p).powi(2) + two * (one - p) + two * noise_second_moment / p
}

/// The same constant written `2(p − 1)²/p + 2(1 − p) + 2s/p`.
pub fn participation_noise_constant_alt<S: Scalar>(p: S, noise_second_moment: S) -> S {
    let two = S::lit(2.0);
    let one = S::one();
    two * (p - one).powi(2) / p + two * (one - p) + two * noise_second_moment / p
}

/// `E‖z‖²` for `z ~ N(0, σ² I_d)`.
pub fn noise_second_moment<S: Scalar>(sigma_dp: S, dim: usize) -> S {
    S::from_usize_lossy(dim) * sigma_dp * sigma_dp
}

/// Which theorem's step-size condition applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaBranch {
    /// `Δ^inf / (2√(2L)(K+1))`
    Heterogeneity,
    /// `βR / (cL(α+R))` with `c = 4` (GD) or `6` (IG)
    Memory,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EtaMax<S> {
    pub value: S,
    pub binding: EtaBranch,
    pub warning: Option<String>,
}

fn drift_present(local: LocalMode) -> bool {
    !local.is_single_gd_step()
}

/// Largest server stepsize allowed by the theorem matching `params.local`.
///
/// The heterogeneity branch only guards the client-drift term, so it is
/// skipped for a single GD step. When `Δ^inf = 0` with drift present the
/// branch degenerates to zero; the memory branch is returned with a warning.
pub fn eta_max<S: Scalar>(constants: &ProblemConstants<S>, params: &BoundParams<S>) -> EtaMax<S> {
    let l = constants.smoothness;
    let denom_factor = match params.local {
        LocalMode::Ig => S::lit(6.0),
        LocalMode::Gd { .. } => S::lit(4.0),
    };
    let memory = params.beta * params.r / (denom_factor * l * (params.alpha + params.r));
    if !drift_present(params.local) {
        return EtaMax {
            value: memory,
            binding: EtaBranch::Memory,
            warning: None,
        };
    }
    if constants.delta_inf <= S::zero() {
        return EtaMax {
            value: memory,
            binding: EtaBranch::Memory,
            warning: Some(
                "Δ^inf = 0 makes the heterogeneity branch degenerate; using the memory branch only"
                    .into(),
            ),
        };
    }
    let k1 = S::from_usize_lossy(params.rounds + 1);
    let het = constants.delta_inf / (S::lit(2.0) * (S::lit(2.0) * l).sqrt() * k1);
    if het < memory {
        EtaMax {
            value: het,
            binding: EtaBranch::Heterogeneity,
            warning: None,
        }
    } else {
        EtaMax {
            value: memory,
            binding: EtaBranch::Memory,
            warning: None,
        }
    }
}

fn side_conditions<S: Scalar>(constants: &ProblemConstants<S>, params: &BoundParams<S>) -> (Vec<SideCondition>, Option<String>) {
    let em = eta_max(constants, params);
    let gamma_cap = S::one() / (S::lit(2.0) * constants.smoothness);
    let conds = vec![
        SideCondition::less_than(
            "beta/(alpha+R) < 1",
            (params.beta / (params.alpha + params.r)).as_f64(),
            1.0,
            true,
        ),
        SideCondition::less_than("gamma <= 1/(2L)", params.gamma.as_f64(), gamma_cap.as_f64(), false),
        SideCondition::less_than("eta <= eta_max", params.eta.as_f64(), em.value.as_f64(), false),
    ];
    (conds, em.warning)
}

fn common_terms<S: Scalar>(constants: &ProblemConstants<S>, params: &BoundParams<S>) -> BoundTerms<S> {
    let two = S::lit(2.0);
    let k1 = S::from_usize_lossy(params.rounds + 1);
    let m = S::from_usize_lossy(constants.clients);
    let b = participation_noise_constant(params.p, noise_second_moment(params.sigma_dp, constants.dim));
    BoundTerms {
        init_term: S::lit(3.0) * (constants.f0 - constants.f_inf) / (params.eta * k1),
        r_term: two * params.r,
        noise_term: two * (params.beta * params.beta * b * k1 / m).sqrt(),
        drift_term: S::zero(),
        eta_term: params.eta * constants.smoothness / two,
    }
}

fn sqrt_2l<S: Scalar>(l: S) -> S {
    (S::lit(2.0) * l).sqrt()
}

/// Right-hand side of the local-GD convergence theorem with its side conditions.
pub fn theorem1_bound<S: Scalar>(constants: &ProblemConstants<S>, params: &BoundParams<S>) -> BoundReport<S> {
    let mut terms = common_terms(constants, params);
    let l = constants.smoothness;
    if drift_present(params.local) {
        terms.drift_term = params.gamma * S::lit(8.0) * l * sqrt_2l(l) * constants.delta_inf.sqrt();
    }
    let (side_conditions, warning) = side_conditions(constants, params);
    BoundReport {
        total: terms.sum(),
        terms,
        side_conditions,
        advisory: constants.approximate,
        warnings: warning.into_iter().collect(),
    }
}

/// Right-hand side of the local-IG convergence theorem; adds the
/// component-level drift `γ·4L√(2L)·√((1/M) Σ Δ_i^inf)`.
pub fn theorem_ig_bound<S: Scalar>(constants: &ProblemConstants<S>, params: &BoundParams<S>) -> BoundReport<S> {
    let ig_params = BoundParams {
        local: LocalMode::Ig,
        ..params.clone()
    };
    let mut terms = common_terms(constants, &ig_params);
    let l = constants.smoothness;
    let c = l * sqrt_2l(l);
    terms.drift_term = params.gamma * S::lit(8.0) * c * constants.delta_inf.sqrt()
        + params.gamma * S::lit(4.0) * c * constants.mean_delta_inf_i.sqrt();
    let (side_conditions, warning) = side_conditions(constants, &ig_params);
    BoundReport {
        total: terms.sum(),
        terms,
        side_conditions,
        advisory: constants.approximate,
        warnings: warning.into_iter().collect(),
    }
}

/// Theorem bound matching the local operator in `params`.
pub fn bound_for<S: Scalar>(constants: &ProblemConstants<S>, params: &BoundParams<S>) -> BoundReport<S> {
    match params.local {
        LocalMode::Ig => theorem_ig_bound(constants, params),
        LocalMode::Gd { .. } => theorem1_bound(constants, params),
    }
}

/// `max_i ‖v_i − (x − T_i(x))/γ‖`.
pub fn compute_r<S: Scalar>(
    memories: &[Vector<S>],
    problem: &FederationProblem<S>,
    x: &Vector<S>,
    local: &LocalOpConfig<S>,
) -> Result<S> {
    let mut worst = S::zero();
    for (client, v) in problem.clients().iter().zip(memories) {
        let tx = apply_local(client, x, local)?;
        let resid = crate::local_ops::residual_to_update(x, &tx, local.gamma);
        worst = worst.max((v - &resid).norm());
    }
    Ok(worst)
}

/// `‖e⁰‖ + √(β² (K+1) σ² / M)`: bound on the expected drift after `K+1` noisy rounds.
pub fn noise_bound<S: Scalar>(beta: S, rounds: usize, sigma_sq: S, clients: usize, e0_norm: S) -> S {
    let k1 = S::from_usize_lossy(rounds + 1);
    let m = S::from_usize_lossy(clients);
    e0_norm + (beta * beta * k1 * sigma_sq / m).sqrt()
}

/// Slack (`rhs − lhs`, nonnegative when the inequality holds) of the local GD
/// inequalities at `x`, for `γ ≤ 1/(2L)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LocalGdSlacks<S> {
    /// `2γ‖∇f_i(x)‖ − (1/T) Σ_j ‖x − x^j‖`
    pub inner_drift: S,
    /// `2Lγ²‖∇f_i(x)‖ − ‖(x − γ∇f_i(x)) − T_i(x)‖`
    pub one_step_gap: S,
}

pub fn local_gd_slacks<S: Scalar>(
    client: &ClientProblem<S>,
    x: &Vector<S>,
    gamma: S,
    steps: usize,
    smoothness: S,
) -> Result<LocalGdSlacks<S>> {
    let trace = local_gd_trace(client, x, gamma, steps)?;
    let g = client.gradient(x);
    let gn = g.norm();
    let t = S::from_usize_lossy(steps);
    let drift = trace.inner.iter().map(|xj| x.distance(xj)).sum::<S>() / t;
    let mut one_step = x.clone();
    one_step.axpy(-gamma, &g);
    let gap = one_step.distance(&trace.output);
    Ok(LocalGdSlacks {
        inner_drift: S::lit(2.0) * gamma * gn - drift,
        one_step_gap: S::lit(2.0) * smoothness * gamma * gamma * gn - gap,
    })
}

/// `2‖x − y‖ − ‖T_i(x) − T_i(y)‖`: the local operator is 2-Lipschitz when `γ ≤ 1/(2L)`.
pub fn local_lipschitz_slack<S: Scalar>(
    client: &ClientProblem<S>,
    x: &Vector<S>,
    y: &Vector<S>,
    local: &LocalOpConfig<S>,
) -> Result<S> {
    let tx = apply_local(client, x, local)?;
    let ty = apply_local(client, y, local)?;
    Ok(S::lit(2.0) * x.distance(y) - tx.distance(&ty))
}

/// `γL · mean_i mean_j ‖x_i^j − x‖ − mean_i ‖T_i^IG(x) − (x − γ∇f_i(x))‖`.
pub fn local_ig_slack<S: Scalar>(problem: &FederationProblem<S>, x: &Vector<S>, gamma: S) -> Result<S> {
    let m = S::from_usize_lossy(problem.num_clients());
    let l = problem.smoothness();
    let mut lhs = S::zero();
    let mut inner = S::zero();
    for client in problem.clients() {
        let trace = local_ig_trace(client, x, gamma)?;
        let mut one_step = x.clone();
        one_step.axpy(-gamma, &client.gradient(x));
        lhs += trace.output.distance(&one_step);
        let n = S::from_usize_lossy(trace.inner.len());
        inner += trace.inner.iter().map(|xj| x.distance(xj)).sum::<S>() / n;
    }
    Ok(gamma * l * inner / m - lhs / m)
}

/// `√(2L/Δ^inf)(f(x) − f^inf) + √(2LΔ^inf) − (1/M) Σ ‖∇f_i(x)‖`.
///
/// `None` when the problem has no exact infima or `Δ^inf = 0`, where the
/// right-hand side is undefined.
pub fn avg_gradient_norm_slack<S: Scalar>(problem: &FederationProblem<S>, x: &Vector<S>) -> Option<S> {
    let het = problem.delta_inf();
    let f_inf = problem.f_inf()?;
    if het.approximate || !(het.value > S::zero()) {
        return None;
    }
    let two_l = S::lit(2.0) * problem.smoothness();
    let m = S::from_usize_lossy(problem.num_clients());
    let lhs = problem.clients().iter().map(|c| c.gradient(x).norm()).sum::<S>() / m;
    let rhs = (two_l / het.value).sqrt() * (problem.value(x) - f_inf) + (two_l * het.value).sqrt();
    Some(rhs - lhs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constants() -> ProblemConstants<f64> {
        ProblemConstants {
            f0: 3.0,
            f_inf: 1.0,
            smoothness: 2.0,
            delta_inf: 0.5,
            mean_delta_inf_i: 0.8,
            clients: 10,
            dim: 4,
            approximate: false,
        }
    }

    fn params() -> BoundParams<f64> {
        BoundParams {
            eta: 0.001,
            beta: 0.1,
            alpha: 0.5,
            r: 0.5,
            gamma: 0.25,
            p: 0.5,
            sigma_dp: 0.3,
            rounds: 99,
            local: LocalMode::Gd { steps: 3 },
        }
    }

    #[test]
    fn full_participation_without_noise_has_no_noise_term() {
        let p = BoundParams { p: 1.0, sigma_dp: 0.0, ..params() };
        assert_eq!(participation_noise_constant(1.0, 0.0), 0.0);
        assert_eq!(theorem1_bound(&constants(), &p).terms.noise_term, 0.0);
    }

    #[test]
    fn single_step_has_no_drift() {
        let p = BoundParams { local: LocalMode::one_step(), ..params() };
        assert_eq!(theorem1_bound(&constants(), &p).terms.drift_term, 0.0);
        assert!(theorem1_bound(&constants(), &params()).terms.drift_term > 0.0);
    }

    #[test]
    fn noise_part_is_quadratic_in_sigma() {
        let noise_part = |s: f64| participation_noise_constant(0.3, noise_second_moment(s, 4)) - participation_noise_constant(0.3, 0.0);
        assert!((noise_part(0.8) - 4.0 * noise_part(0.4)).abs() < 1e-12);
    }

    #[test]
    fn alternate_form_agrees() {
        for k in 1..=10 {
            let p = k as f64 / 10.0;
            let a = participation_noise_constant(p, 1.7);
            let b = participation_noise_constant_alt(p, 1.7);
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn total_is_sum_of_terms() {
        let r = theorem_ig_bound(&constants(), &params());
        assert_eq!(r.total, r.terms.sum());
    }

    #[test]
    fn ig_term_vanishes_without_component_gap_and_is_linear_in_gamma() {
        let mut c = constants();
        c.mean_delta_inf_i = 0.0;
        let gd = theorem1_bound(&c, &params());
        let ig = theorem_ig_bound(&c, &params());
        assert!((gd.terms.drift_term - ig.terms.drift_term).abs() < 1e-15);
        let c = constants();
        let d1 = theorem_ig_bound(&c, &params()).terms.drift_term;
        let d2 = theorem_ig_bound(&c, &BoundParams { gamma: 0.5, ..params() }).terms.drift_term;
        assert!((d2 - 2.0 * d1).abs() < 1e-12);
    }

    #[test]
    fn eta_max_substitution_alpha_equals_r() {
        let p = BoundParams { alpha: 0.5, r: 0.5, local: LocalMode::one_step(), ..params() };
        let em = eta_max(&constants(), &p);
        assert_eq!(em.binding, EtaBranch::Memory);
        assert!((em.value - p.beta / (8.0 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn eta_max_heterogeneity_branch_vanishes_with_k() {
        let p = BoundParams { rounds: 1_000_000, ..params() };
        let em = eta_max(&constants(), &p);
        assert_eq!(em.binding, EtaBranch::Heterogeneity);
        assert!(em.value < 1e-6);
    }

    #[test]
    fn eta_max_warns_on_zero_heterogeneity() {
        let mut c = constants();
        c.delta_inf = 0.0;
        let em = eta_max(&c, &params());
        assert_eq!(em.binding, EtaBranch::Memory);
        assert!(em.warning.is_some());
    }

    #[test]
    fn eta_max_hand_trace() {
        // L = 1, β = 0.5, α = 1, R = 3 (zero init, largest gradient at x⁰ = 2)
        let c = ProblemConstants { smoothness: 1.0, ..constants() };
        let p = BoundParams { beta: 0.5, alpha: 1.0, r: 3.0, local: LocalMode::one_step(), ..params() };
        assert!((eta_max(&c, &p).value - 0.5 * 3.0 / (4.0 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn noise_bound_examples() {
        assert_eq!(noise_bound(0.0, 10, 5.0, 3, 0.7), 0.7);
        let a: f64 = noise_bound(0.3, 10, 5.0, 3, 0.0);
        let b = noise_bound(0.3, 10, 5.0, 12, 0.0);
        assert!((a - 2.0 * b).abs() < 1e-15);
    }

    #[test]
    fn monotone_in_sigma_and_r() {
        let c = constants();
        let base = theorem1_bound(&c, &params()).total;
        assert!(theorem1_bound(&c, &BoundParams { sigma_dp: 0.6, ..params() }).total >= base);
        assert!(theorem1_bound(&c, &BoundParams { r: 0.9, ..params() }).total >= base);
    }
}
