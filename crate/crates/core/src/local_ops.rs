//! Local fixed-point operators `T_i`: T-step gradient descent and one cyclic
//! incremental-gradient pass over the client's components.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::ClientProblem;
use crate::scalar::Scalar;
use crate::vecmath::Vector;

/// Which local operator a client runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LocalMode {
    /// `steps` gradient steps of size `γ/steps` on `f_i`.
    Gd { steps: usize },
    /// One cyclic pass over the `N` components in stored order, step `γ/N`.
    Ig,
}

impl LocalMode {
    pub fn one_step() -> Self {
        LocalMode::Gd { steps: 1 }
    }

    /// Number of inner steps the operator takes on `client`.
    pub fn step_count<S: Scalar>(&self, client: &ClientProblem<S>) -> usize {
        match *self {
            LocalMode::Gd { steps } => steps,
            LocalMode::Ig => client.num_components(),
        }
    }

    /// True for the single-gradient-step operator `x − γ∇f_i(x)`.
    pub fn is_single_gd_step(&self) -> bool {
        matches!(self, LocalMode::Gd { steps: 1 })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LocalMode::Gd { steps: 0 } => Err(Error::config("local.steps", "must be at least 1")),
            _ => Ok(()),
        }
    }
}

impl Default for LocalMode {
    fn default() -> Self {
        Self::one_step()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalOpConfig<S> {
    pub mode: LocalMode,
    pub gamma: S,
}

impl<S: Scalar> LocalOpConfig<S> {
    pub fn new(mode: LocalMode, gamma: S) -> Result<Self> {
        mode.validate()?;
        if !(gamma.is_finite() && gamma > S::zero()) {
            return Err(Error::config("gamma", format!("must be positive, got {gamma}")));
        }
        Ok(LocalOpConfig { mode, gamma })
    }
}

/// Inner iterates `x^{·,0} .. x^{·,T−1}` and the operator output.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalTrace<S> {
    pub inner: Vec<Vector<S>>,
    pub output: Vector<S>,
}

fn check_gamma<S: Scalar>(gamma: S) -> Result<()> {
    if gamma.is_finite() && gamma > S::zero() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("local stepsize must be positive, got {gamma}")))
    }
}

fn run_local<S: Scalar>(
    client: &ClientProblem<S>,
    x: &Vector<S>,
    gamma: S,
    mode: LocalMode,
    record: bool,
) -> Result<LocalTrace<S>> {
    check_gamma(gamma)?;
    mode.validate()?;
    let steps = mode.step_count(client);
    let step = gamma / S::from_usize_lossy(steps);
    let mut inner = Vec::with_capacity(if record { steps } else { 0 });
    let mut cur = x.clone();
    for j in 0..steps {
        if record {
            inner.push(cur.clone());
        }
        let g = match mode {
            LocalMode::Gd { .. } => client.gradient(&cur),
            LocalMode::Ig => client.components()[j].gradient(&cur),
        };
        cur.axpy(-step, &g);
        if !cur.is_finite() {
            return Err(Error::DivergedLocalUpdate {
                client: client.index(),
                step: j,
            });
        }
    }
    Ok(LocalTrace { inner, output: cur })
}

/// `T_i(x)` for `steps` local GD steps with stepsize `γ/steps`.
pub fn local_gd<S: Scalar>(client: &ClientProblem<S>, x: &Vector<S>, gamma: S, steps: usize) -> Result<Vector<S>> {
    Ok(run_local(client, x, gamma, LocalMode::Gd { steps }, false)?.output)
}

pub fn local_gd_trace<S: Scalar>(
    client: &ClientProblem<S>,
    x: &Vector<S>,
    gamma: S,
    steps: usize,
) -> Result<LocalTrace<S>> {
    run_local(client, x, gamma, LocalMode::Gd { steps }, true)
}

/// `T_i(x)` for one cyclic IG pass: `x^{j+1} = x^j − (γ/N) ∇f_ij(x^j)`.
pub fn local_ig<S: Scalar>(client: &ClientProblem<S>, x: &Vector<S>, gamma: S) -> Result<Vector<S>> {
    Ok(run_local(client, x, gamma, LocalMode::Ig, false)?.output)
}

pub fn local_ig_trace<S: Scalar>(client: &ClientProblem<S>, x: &Vector<S>, gamma: S) -> Result<LocalTrace<S>> {
    run_local(client, x, gamma, LocalMode::Ig, true)
}

/// Dispatches on `cfg.mode`.
pub fn apply_local<S: Scalar>(client: &ClientProblem<S>, x: &Vector<S>, cfg: &LocalOpConfig<S>) -> Result<Vector<S>> {
    Ok(run_local(client, x, cfg.gamma, cfg.mode, false)?.output)
}

pub fn apply_local_trace<S: Scalar>(
    client: &ClientProblem<S>,
    x: &Vector<S>,
    cfg: &LocalOpConfig<S>,
) -> Result<LocalTrace<S>> {
    run_local(client, x, cfg.gamma, cfg.mode, true)
}

/// `(x − T_i(x)) / γ`, the rescaled local model update.
pub fn residual_to_update<S: Scalar>(x: &Vector<S>, tx: &Vector<S>, gamma: S) -> Vector<S> {
    let inv = S::one() / gamma;
    (x - tx).scale(inv)
}
