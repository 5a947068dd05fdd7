//! TOML experiment specifications.
//!
//! ```toml
//! name = "hetero-demo"
//! algorithm = "fed-alpha-normec"   # or "dp-fedavg"
//! replicates = 3
//! seed = 7
//! start_distance = 1.0             # ‖x⁰ − x*‖ along a random direction
//!
//! [problem]
//! family = "quadratic-hetero"      # quadratic-homo, logistic-blobs
//! clients = 20
//! components = 5
//! dim = 10
//!
//! [params]
//! rounds = 300
//! beta = 0.01
//! eta = 0.01
//! p = 0.5
//! local = { mode = "gd", steps = 1 }
//! init = { strategy = "exact-residual" }
//!
//! [privacy]                        # only read when params.private = true
//! epsilon = 8.0
//! delta = 1e-5
//! noise = "experiment"             # or "calibrated"
//!
//! [schedule]                       # optional: derive γ, β, η, α, R from a corollary
//! name = "corollary-nonprivate"
//! d1 = 1.0
//! d2 = 2.0
//!
//! [sweep]                          # read by `sweep` only
//! p = [0.25, 0.5, 1.0]
//! beta = [0.001, 0.01, 0.1]
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fed_core::MemoryInit;
use crate::local_ops::LocalMode;
use crate::privacy::{PrivacyBudget, ScheduleName};
use crate::problems::{SuiteFamily, SuiteSpec};

/// Version tag of the accepted document grammar.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    FedAlphaNormec,
    DpFedavg,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::FedAlphaNormec => "fed-alpha-normec",
            Algorithm::DpFedavg => "dp-fedavg",
        }
    }
}

/// How `σ_DP` is derived from the privacy budget when not given explicitly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseRule {
    /// `c · p · √((K+1) log(1/δ)) / ε`
    #[default]
    Calibrated,
    /// `p · β · √(K log(1/δ)) / ε`, the level used in the reported experiments.
    Experiment,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_name() -> String {
    "experiment".into()
}
fn default_one() -> usize {
    1
}
fn default_start_distance() -> f64 {
    1.0
}
fn default_rounds() -> usize {
    300
}
fn default_alpha() -> f64 {
    0.01
}
fn default_p() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_tol() -> f64 {
    1e-12
}
fn default_d() -> f64 {
    1.0
}
fn default_local_steps() -> usize {
    2
}
fn default_c() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Defaults to `1/(2L)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// FedAvg defaults to `η = γ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub private: bool,
    /// Explicit noise level; otherwise derived from `[privacy]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_dp: Option<f64>,
    #[serde(default = "default_true")]
    pub server_normalize: bool,
    #[serde(default)]
    pub local: LocalMode,
    /// Defaults to exact residuals, or to a residual offset of the schedule's `R`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<MemoryInit>,
    #[serde(default)]
    pub theory_mode: bool,
    #[serde(default = "default_tol")]
    pub degenerate_tol: f64,
}

impl Default for ParamsSpec {
    fn default() -> Self {
        ParamsSpec {
            rounds: default_rounds(),
            gamma: None,
            beta: None,
            eta: None,
            alpha: default_alpha(),
            p: default_p(),
            private: false,
            sigma_dp: None,
            server_normalize: true,
            local: LocalMode::default(),
            init: None,
            theory_mode: false,
            degenerate_tol: default_tol(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default)]
    pub noise: NoiseRule,
}

impl PrivacySpec {
    pub fn budget(&self) -> Result<PrivacyBudget> {
        PrivacyBudget::new(self.epsilon, self.delta)?.with_constant(self.c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub name: ScheduleName,
    #[serde(default = "default_d")]
    pub d1: f64,
    #[serde(default = "default_d")]
    pub d2: f64,
    /// Local GD steps for `corollary-multi-gd`.
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    /// Expected sampled clients `B̂`; defaults to `p · M`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampled: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub p: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            p: vec![0.25, 0.5, 1.0],
            beta: vec![0.001, 0.01, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default = "default_one")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_start_distance")]
    pub start_distance: f64,
    /// Output subdirectory under the output root; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    pub problem: SuiteSpec,
    #[serde(default)]
    pub params: ParamsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy: Option<PrivacySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

/// Parses and validates a TOML document. Errors name the offending key.
pub fn parse_config(text: &str) -> Result<ExperimentSpec> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string()))?;
    let spec: ExperimentSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "<document>".to_string() } else { path }, e.into_inner().message().trim().to_string())
    })?;
    spec.validate()?;
    Ok(spec)
}

fn check_probability(path: &str, p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(path, format!("participation probability must lie in (0, 1], got {p}")))
    }
}

fn check_positive(path: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(x.is_finite() && x > 0.0) => Err(Error::config(path, format!("must be positive and finite, got {x}"))),
        _ => Ok(()),
    }
}

impl ExperimentSpec {
    /// Desk-scale sweep preset: 20 clients, 300 rounds,
    /// `p ∈ {0.25, 0.5, 1}`, `β ∈ {0.001, 0.01, 0.1}`, `α = 0.01`.
    pub fn desk_sweep() -> Self {
        ExperimentSpec {
            version: CONFIG_VERSION,
            name: "desk-sweep".into(),
            algorithm: Algorithm::FedAlphaNormec,
            replicates: 3,
            seed: 0,
            start_distance: 1.0,
            output: None,
            problem: SuiteSpec::new(SuiteFamily::QuadraticHetero, 20, 5, 10),
            params: ParamsSpec {
                rounds: 300,
                beta: Some(0.01),
                eta: Some(0.01),
                private: true,
                ..ParamsSpec::default()
            },
            privacy: Some(PrivacySpec {
                epsilon: 8.0,
                delta: 1e-5,
                c: 1.0,
                noise: NoiseRule::Experiment,
            }),
            schedule: None,
            sweep: Some(SweepSpec::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config("version", format!("unsupported version {}, expected {CONFIG_VERSION}", self.version)));
        }
        if self.replicates == 0 {
            return Err(Error::config("replicates", "must be at least 1"));
        }
        if !(self.start_distance.is_finite() && self.start_distance >= 0.0) {
            return Err(Error::config("start_distance", "must be finite and nonnegative"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty name without path separators"));
        }
        self.problem.validate()?;
        let p = &self.params;
        check_probability("params.p", p.p)?;
        check_positive("params.gamma", p.gamma)?;
        check_positive("params.beta", p.beta)?;
        check_positive("params.eta", p.eta)?;
        if !(p.alpha.is_finite() && p.alpha >= 0.0) {
            return Err(Error::config("params.alpha", "must be finite and nonnegative"));
        }
        if let Some(s) = p.sigma_dp {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::config("params.sigma_dp", "must be finite and nonnegative"));
            }
        }
        if !(p.degenerate_tol.is_finite() && p.degenerate_tol >= 0.0) {
            return Err(Error::config("params.degenerate_tol", "must be finite and nonnegative"));
        }
        if let LocalMode::Gd { steps: 0 } = p.local {
            return Err(Error::config("params.local.steps", "must be at least 1"));
        }
        if let Some(MemoryInit::ResidualPlusOffset { offset }) = p.init {
            if !(offset.is_finite() && offset >= 0.0) {
                return Err(Error::config("params.init.offset", "must be finite and nonnegative"));
            }
        }
        if let Some(priv_spec) = &self.privacy {
            priv_spec.budget().map_err(|e| match e {
                Error::Config { path, message } => Error::config(path, message),
                other => other,
            })?;
        }
        if p.private && p.sigma_dp.is_none() && self.privacy.is_none() && !self.uses_dp_schedule() {
            return Err(Error::config("params.sigma_dp", "private runs need sigma_dp or a [privacy] section"));
        }
        match &self.schedule {
            Some(s) if s.name != ScheduleName::Manual => {
                if self.algorithm != Algorithm::FedAlphaNormec {
                    return Err(Error::config("schedule.name", "corollary schedules apply to fed-alpha-normec only"));
                }
                for (key, set) in [
                    ("params.gamma", p.gamma.is_some()),
                    ("params.beta", p.beta.is_some()),
                    ("params.eta", p.eta.is_some()),
                ] {
                    if set {
                        return Err(Error::config(key, "conflicts with [schedule]; remove one of them"));
                    }
                }
                if s.name == ScheduleName::CorollaryOneStepDp && self.privacy.is_none() {
                    return Err(Error::config("privacy", "corollary-one-step-dp needs a [privacy] budget"));
                }
                check_positive("schedule.d1", Some(s.d1))?;
                check_positive("schedule.d2", Some(s.d2))?;
                check_positive("schedule.sampled", s.sampled)?;
                if self.sweep.is_some() {
                    return Err(Error::config("sweep", "cannot sweep parameters fixed by a corollary schedule"));
                }
            }
            _ => {
                if self.algorithm == Algorithm::FedAlphaNormec {
                    // a sweep supplies beta per cell
                    if p.beta.is_none() && self.sweep.is_none() {
                        return Err(Error::config("params.beta", "required without a corollary schedule"));
                    }
                    if p.eta.is_none() {
                        return Err(Error::config("params.eta", "required without a corollary schedule"));
                    }
                }
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.p.is_empty() || sw.beta.is_empty() {
                return Err(Error::config("sweep", "p and beta lists must be non-empty"));
            }
            for (i, &v) in sw.p.iter().enumerate() {
                check_probability(&format!("sweep.p[{i}]"), v)?;
            }
            for (i, &v) in sw.beta.iter().enumerate() {
                check_positive(&format!("sweep.beta[{i}]"), Some(v))?;
            }
        }
        Ok(())
    }

    pub fn uses_dp_schedule(&self) -> bool {
        matches!(&self.schedule, Some(s) if s.name == ScheduleName::CorollaryOneStepDp)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn output_dir_name(&self) -> &str {
        self.output.as_deref().unwrap_or(&self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[problem]
family = "quadratic-hetero"
clients = 4
components = 2
dim = 3

[params]
beta = 0.1
eta = 0.01
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let spec = parse_config(MINIMAL).unwrap();
        assert_eq!(spec.params.alpha, 0.01);
        assert_eq!(spec.params.p, 1.0);
        assert_eq!(spec.params.rounds, 300);
        assert_eq!(spec.replicates, 1);
        assert_eq!(spec.algorithm, Algorithm::FedAlphaNormec);
    }

    #[test]
    fn bad_p_names_key() {
        let text = MINIMAL.replace("eta = 0.01", "eta = 0.01\np = 1.5");
        match parse_config(&text).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "params.p"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_names_path() {
        let text = MINIMAL.replace("eta = 0.01", "eta = 0.01\nbogus = 1");
        match parse_config(&text).unwrap_err() {
            Error::Config { path, message } => {
                assert!(path.starts_with("params"), "{path}");
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn type_mismatch_names_path() {
        let text = MINIMAL.replace("clients = 4", "clients = \"four\"");
        match parse_config(&text).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "problem.clients"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let spec = parse_config(MINIMAL).unwrap();
        let again = parse_config(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(spec, again);
        let preset = ExperimentSpec::desk_sweep();
        assert_eq!(parse_config(&preset.to_toml().unwrap()).unwrap(), preset);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = parse_config(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn schedule_conflicts_with_explicit_steps() {
        let text = format!("{MINIMAL}\n[schedule]\nname = \"corollary-nonprivate\"\n");
        match parse_config(&text).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "params.beta"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
