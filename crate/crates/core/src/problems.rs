//! Synthetic federated objectives `f(x) = (1/M) Σ_i f_i(x)`, `f_i = (1/N) Σ_j f_ij`.
//!
//! Two component families are provided: PSD quadratics, whose infima (and so
//! the heterogeneity gaps) are computed exactly, and logistic losses, whose
//! infima are only known to be nonnegative.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::vecmath::{Purpose, StreamSeed, Vector};

/// `½ (x − center)ᵀ A (x − center) + offset` with `A` symmetric PSD.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticComponent<S> {
    curvature: Matrix<S>,
    center: Vector<S>,
    offset: S,
    smoothness: S,
}

impl<S: Scalar> QuadraticComponent<S> {
    pub fn new(curvature: Matrix<S>, center: Vector<S>, offset: S) -> Result<Self> {
        if curvature.dim() != center.dim() {
            return Err(Error::InvalidProblem(format!(
                "curvature is {0}x{0} but center has dimension {1}",
                curvature.dim(),
                center.dim()
            )));
        }
        if !curvature.is_finite() || !offset.is_finite() {
            return Err(Error::InvalidProblem("non-finite quadratic data".into()));
        }
        let scale = (0..curvature.dim())
            .map(|i| curvature.get(i, i).abs())
            .fold(S::one(), S::max);
        let tol = S::lit(1e-10) * scale;
        if !curvature.is_symmetric(tol) {
            return Err(Error::InvalidProblem("curvature must be symmetric".into()));
        }
        let eig = curvature.symmetric_eigenvalues();
        let (lo, hi) = (eig[0], eig[eig.len() - 1]);
        if lo < -tol {
            return Err(Error::InvalidProblem(format!(
                "curvature is not positive semidefinite (min eigenvalue {lo})"
            )));
        }
        Ok(QuadraticComponent {
            curvature,
            center,
            offset,
            smoothness: hi.max(S::zero()),
        })
    }

    /// Isotropic quadratic `(c/2)·‖x − center‖² + offset`.
    pub fn isotropic(c: S, center: Vector<S>, offset: S) -> Result<Self> {
        let d = center.dim();
        Self::new(Matrix::identity(d).scale(c), center, offset)
    }

    pub fn curvature(&self) -> &Matrix<S> {
        &self.curvature
    }

    pub fn center(&self) -> &Vector<S> {
        &self.center
    }

    pub fn offset(&self) -> S {
        self.offset
    }

    pub fn value(&self, x: &Vector<S>) -> S {
        let r = x - &self.center;
        S::lit(0.5) * r.dot(&self.curvature.matvec(&r)) + self.offset
    }

    pub fn gradient(&self, x: &Vector<S>) -> Vector<S> {
        self.curvature.matvec(&(x - &self.center))
    }
}

/// `log(1 + exp(−label·⟨features, x⟩))` with `label ∈ {−1, +1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticComponent<S> {
    features: Vector<S>,
    label: S,
}

impl<S: Scalar> LogisticComponent<S> {
    pub fn new(features: Vector<S>, label: S) -> Result<Self> {
        if label != S::one() && label != -S::one() {
            return Err(Error::InvalidProblem(format!(
                "logistic label must be ±1, got {label}"
            )));
        }
        if !features.is_finite() {
            return Err(Error::InvalidProblem("non-finite logistic features".into()));
        }
        Ok(LogisticComponent { features, label })
    }

    pub fn features(&self) -> &Vector<S> {
        &self.features
    }

    pub fn label(&self) -> S {
        self.label
    }

    fn margin(&self, x: &Vector<S>) -> S {
        self.label * self.features.dot(x)
    }

    pub fn value(&self, x: &Vector<S>) -> S {
        // softplus(−m), evaluated without overflow
        let m = self.margin(x);
        let z = -m;
        if z > S::zero() {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        }
    }

    pub fn gradient(&self, x: &Vector<S>) -> Vector<S> {
        let m = self.margin(x);
        // σ(−m) = 1 / (1 + e^m)
        let s = if m >= S::zero() {
            let e = (-m).exp();
            e / (S::one() + e)
        } else {
            S::one() / (S::one() + m.exp())
        };
        self.features.scale(-self.label * s)
    }

    pub fn smoothness(&self) -> S {
        self.features.norm_squared() / S::lit(4.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Component<S> {
    Quadratic(QuadraticComponent<S>),
    Logistic(LogisticComponent<S>),
}

impl<S: Scalar> Component<S> {
    pub fn dim(&self) -> usize {
        match self {
            Component::Quadratic(q) => q.center.dim(),
            Component::Logistic(l) => l.features.dim(),
        }
    }

    pub fn value(&self, x: &Vector<S>) -> S {
        match self {
            Component::Quadratic(q) => q.value(x),
            Component::Logistic(l) => l.value(x),
        }
    }

    pub fn gradient(&self, x: &Vector<S>) -> Vector<S> {
        match self {
            Component::Quadratic(q) => q.gradient(x),
            Component::Logistic(l) => l.gradient(x),
        }
    }

    pub fn smoothness(&self) -> S {
        match self {
            Component::Quadratic(q) => q.smoothness,
            Component::Logistic(l) => l.smoothness(),
        }
    }

    /// Exact infimum where known (quadratics only).
    pub fn infimum(&self) -> Option<S> {
        match self {
            Component::Quadratic(q) => Some(q.offset),
            Component::Logistic(_) => None,
        }
    }

    /// A valid lower bound on the component's infimum.
    pub fn lower_bound(&self) -> S {
        match self {
            Component::Quadratic(q) => q.offset,
            Component::Logistic(_) => S::zero(),
        }
    }
}

impl<S: Scalar> From<QuadraticComponent<S>> for Component<S> {
    fn from(q: QuadraticComponent<S>) -> Self {
        Component::Quadratic(q)
    }
}

impl<S: Scalar> From<LogisticComponent<S>> for Component<S> {
    fn from(l: LogisticComponent<S>) -> Self {
        Component::Logistic(l)
    }
}

/// Mean of quadratics written as `½ xᵀ A x − bᵀ x + c`.
#[derive(Clone, Debug, PartialEq)]
struct QuadraticForm<S> {
    a: Matrix<S>,
    b: Vector<S>,
    c: S,
}

impl<S: Scalar> QuadraticForm<S> {
    fn mean_of<'a>(quads: impl ExactSizeIterator<Item = &'a QuadraticComponent<S>>) -> Option<Self> {
        let n = quads.len();
        let mut form: Option<QuadraticForm<S>> = None;
        let w = S::one() / S::from_usize_lossy(n);
        for q in quads {
            let ac = q.curvature.matvec(&q.center);
            let c = S::lit(0.5) * q.center.dot(&ac) + q.offset;
            match form.as_mut() {
                None => {
                    form = Some(QuadraticForm {
                        a: q.curvature.scale(w),
                        b: ac.scale(w),
                        c: c * w,
                    })
                }
                Some(f) => {
                    f.a.add_scaled(w, &q.curvature);
                    f.b.axpy(w, &ac);
                    f.c += w * c;
                }
            }
        }
        form
    }

    fn mean_of_forms<'a>(forms: impl ExactSizeIterator<Item = &'a QuadraticForm<S>>) -> Option<Self> {
        let n = forms.len();
        let w = S::one() / S::from_usize_lossy(n);
        let mut out: Option<QuadraticForm<S>> = None;
        for f in forms {
            match out.as_mut() {
                None => {
                    out = Some(QuadraticForm {
                        a: f.a.scale(w),
                        b: f.b.scale(w),
                        c: f.c * w,
                    })
                }
                Some(o) => {
                    o.a.add_scaled(w, &f.a);
                    o.b.axpy(w, &f.b);
                    o.c += w * f.c;
                }
            }
        }
        out
    }

    fn gradient(&self, x: &Vector<S>) -> Vector<S> {
        let mut g = self.a.matvec(x);
        g.axpy(-S::one(), &self.b);
        g
    }

    fn minimizer(&self) -> Result<Vector<S>> {
        self.a.solve_spd(&self.b)
    }
}

/// One client's objective `f_i = (1/N) Σ_j f_ij`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientProblem<S> {
    index: usize,
    components: Vec<Component<S>>,
    form: Option<QuadraticForm<S>>,
    infimum: Option<S>,
    minimizer: Option<Vector<S>>,
}

impl<S: Scalar> ClientProblem<S> {
    pub fn new(index: usize, components: Vec<Component<S>>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidProblem(format!("client {index} has no components")))?;
        let d = first.dim();
        if d == 0 {
            return Err(Error::InvalidProblem("dimension must be positive".into()));
        }
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::InvalidProblem(format!(
                "client {index} mixes component dimensions"
            )));
        }
        let form = components
            .iter()
            .map(|c| match c {
                Component::Quadratic(q) => Some(q),
                Component::Logistic(_) => None,
            })
            .collect::<Option<Vec<&QuadraticComponent<S>>>>()
            .map(|quads| QuadraticForm::mean_of(quads.into_iter()).expect("non-empty"));
        let mut client = ClientProblem {
            index,
            components,
            form: None,
            infimum: None,
            minimizer: None,
        };
        if let Some(form) = form {
            // a singular aggregate can still be bounded below; the gap is then left unknown
            if let Ok(xmin) = form.minimizer() {
                client.infimum = Some(client.value(&xmin));
                client.minimizer = Some(xmin);
            }
            client.form = Some(form);
        }
        Ok(client)
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn components(&self) -> &[Component<S>] {
        &self.components
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn component(&self, j: usize) -> Result<&Component<S>> {
        self.components.get(j).ok_or(Error::IndexOutOfRange {
            what: "component",
            index: j,
            len: self.components.len(),
        })
    }

    pub fn value(&self, x: &Vector<S>) -> S {
        let n = S::from_usize_lossy(self.components.len());
        self.components.iter().map(|c| c.value(x)).sum::<S>() / n
    }

    /// `∇f_i(x)`: mean of the component gradients.
    pub fn gradient(&self, x: &Vector<S>) -> Vector<S> {
        // a lone component is evaluated directly so that f_i and f_i1 agree bitwise
        if let [only] = self.components.as_slice() {
            return only.gradient(x);
        }
        if let Some(form) = &self.form {
            return form.gradient(x);
        }
        self.mean_component_gradient(x)
    }

    /// Mean of component gradients evaluated one by one, bypassing the cached
    /// quadratic form.
    pub fn mean_component_gradient(&self, x: &Vector<S>) -> Vector<S> {
        let mut g = Vector::zeros(x.dim());
        for c in &self.components {
            g.axpy(S::one(), &c.gradient(x));
        }
        g.scale(S::one() / S::from_usize_lossy(self.components.len()))
    }

    pub fn smoothness(&self) -> S {
        self.components
            .iter()
            .map(Component::smoothness)
            .fold(S::zero(), S::max)
    }

    /// Exact `f_i^inf` when the client is quadratic.
    pub fn infimum(&self) -> Option<S> {
        self.infimum
    }

    pub fn minimizer(&self) -> Option<&Vector<S>> {
        self.minimizer.as_ref()
    }

    /// `(1/N) Σ_j f_ij^inf`, exact for quadratics and the zero bound otherwise.
    pub fn mean_component_lower_bound(&self) -> S {
        let n = S::from_usize_lossy(self.components.len());
        self.components.iter().map(Component::lower_bound).sum::<S>() / n
    }

    fn is_exact(&self) -> bool {
        self.components.iter().all(|c| c.infimum().is_some()) && self.infimum.is_some()
    }
}

/// A heterogeneity gap together with whether it is exact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Heterogeneity<S> {
    pub value: S,
    /// Set when surrogate lower bounds replaced unknown infima.
    pub approximate: bool,
}

/// The full objective `f = (1/M) Σ_i f_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FederationProblem<S> {
    clients: Vec<ClientProblem<S>>,
    smoothness: S,
    f_inf: Option<S>,
    minimizer: Option<Vector<S>>,
}

impl<S: Scalar> FederationProblem<S> {
    pub fn new(clients: Vec<ClientProblem<S>>) -> Result<Self> {
        let d = clients
            .first()
            .ok_or_else(|| Error::InvalidProblem("a federation needs at least one client".into()))?
            .dim();
        if clients.iter().any(|c| c.dim() != d) {
            return Err(Error::InvalidProblem("clients disagree on dimension".into()));
        }
        let smoothness = clients
            .iter()
            .map(ClientProblem::smoothness)
            .fold(S::zero(), S::max);
        let mut problem = FederationProblem {
            clients,
            smoothness,
            f_inf: None,
            minimizer: None,
        };
        let forms: Option<Vec<&QuadraticForm<S>>> =
            problem.clients.iter().map(|c| c.form.as_ref()).collect();
        if let Some(forms) = forms {
            let global = QuadraticForm::mean_of_forms(forms.into_iter()).expect("non-empty");
            if let Ok(xmin) = global.minimizer() {
                problem.f_inf = Some(problem.value(&xmin));
                problem.minimizer = Some(xmin);
            }
        }
        Ok(problem)
    }

    /// Replaces the smoothness constant; it may only grow.
    pub fn with_smoothness(mut self, l: S) -> Result<Self> {
        if l < self.smoothness {
            return Err(Error::InvalidProblem(format!(
                "smoothness {l} below the component maximum {}",
                self.smoothness
            )));
        }
        self.smoothness = l;
        Ok(self)
    }

    pub fn clients(&self) -> &[ClientProblem<S>] {
        &self.clients
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.clients[0].dim()
    }

    pub fn client(&self, i: usize) -> Result<&ClientProblem<S>> {
        self.clients.get(i).ok_or(Error::IndexOutOfRange {
            what: "client",
            index: i,
            len: self.clients.len(),
        })
    }

    /// Global smoothness constant `L` (max over component constants).
    pub fn smoothness(&self) -> S {
        self.smoothness
    }

    /// Exact `f^inf` for quadratic suites.
    pub fn f_inf(&self) -> Option<S> {
        self.f_inf
    }

    pub fn minimizer(&self) -> Option<&Vector<S>> {
        self.minimizer.as_ref()
    }

    pub fn value(&self, x: &Vector<S>) -> S {
        let m = S::from_usize_lossy(self.clients.len());
        self.clients.iter().map(|c| c.value(x)).sum::<S>() / m
    }

    pub fn gradient(&self, x: &Vector<S>) -> Vector<S> {
        let mut g = Vector::zeros(x.dim());
        for c in &self.clients {
            g.axpy(S::one(), &c.gradient(x));
        }
        g.scale(S::one() / S::from_usize_lossy(self.clients.len()))
    }

    fn check_point(&self, x: &Vector<S>) -> Result<()> {
        if x.dim() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "point has dimension {} but problem has {}",
                x.dim(),
                self.dim()
            )));
        }
        if !x.is_finite() {
            return Err(Error::InvalidInput("point has non-finite entries".into()));
        }
        Ok(())
    }

    /// True when every infimum is known exactly.
    pub fn is_exact(&self) -> bool {
        self.f_inf.is_some() && self.clients.iter().all(ClientProblem::is_exact)
    }

    /// `Δ^inf = f^inf − (1/M) Σ_i f_i^inf`.
    ///
    /// Logistic (or otherwise inexact) suites get the surrogate value 0 from
    /// the all-zero lower bounds, flagged `approximate`.
    pub fn delta_inf(&self) -> Heterogeneity<S> {
        match (self.f_inf, self.is_exact()) {
            (Some(f_inf), true) => {
                let m = S::from_usize_lossy(self.clients.len());
                let mean = self
                    .clients
                    .iter()
                    .map(|c| c.infimum.expect("exact"))
                    .sum::<S>()
                    / m;
                Heterogeneity {
                    value: (f_inf - mean).max(S::zero()),
                    approximate: false,
                }
            }
            _ => Heterogeneity {
                value: S::zero(),
                approximate: true,
            },
        }
    }

    /// `Δ_i^inf = f^inf − (1/N) Σ_j f_ij^inf` for client `i`.
    ///
    /// Individual values may be negative; their mean over clients never is.
    pub fn delta_inf_i(&self, i: usize) -> Result<Heterogeneity<S>> {
        let client = self.client(i)?;
        Ok(match (self.f_inf, self.is_exact()) {
            (Some(f_inf), true) => Heterogeneity {
                value: f_inf - client.mean_component_lower_bound(),
                approximate: false,
            },
            _ => Heterogeneity {
                value: S::zero(),
                approximate: true,
            },
        })
    }

    pub fn delta_inf_per_client(&self) -> Vec<Heterogeneity<S>> {
        (0..self.clients.len())
            .map(|i| self.delta_inf_i(i).expect("in range"))
            .collect()
    }
}

/// `∇f_ij(x)`.
pub fn grad_component<S: Scalar>(
    problem: &FederationProblem<S>,
    i: usize,
    j: usize,
    x: &Vector<S>,
) -> Result<Vector<S>> {
    problem.check_point(x)?;
    Ok(problem.client(i)?.component(j)?.gradient(x))
}

/// `∇f_i(x)`.
pub fn grad_local<S: Scalar>(problem: &FederationProblem<S>, i: usize, x: &Vector<S>) -> Result<Vector<S>> {
    problem.check_point(x)?;
    Ok(problem.client(i)?.gradient(x))
}

/// `∇f(x)`.
pub fn grad_global<S: Scalar>(problem: &FederationProblem<S>, x: &Vector<S>) -> Result<Vector<S>> {
    problem.check_point(x)?;
    Ok(problem.gradient(x))
}

/// `f(x)`.
pub fn eval_f<S: Scalar>(problem: &FederationProblem<S>, x: &Vector<S>) -> Result<S> {
    problem.check_point(x)?;
    Ok(problem.value(x))
}

pub fn delta_inf<S: Scalar>(problem: &FederationProblem<S>) -> Heterogeneity<S> {
    problem.delta_inf()
}

pub fn delta_inf_i<S: Scalar>(problem: &FederationProblem<S>, i: usize) -> Result<Heterogeneity<S>> {
    problem.delta_inf_i(i)
}

/// Synthetic suite families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteFamily {
    QuadraticHetero,
    QuadraticHomo,
    LogisticBlobs,
}

impl SuiteFamily {
    pub fn name(self) -> &'static str {
        match self {
            SuiteFamily::QuadraticHetero => "quadratic-hetero",
            SuiteFamily::QuadraticHomo => "quadratic-homo",
            SuiteFamily::LogisticBlobs => "logistic-blobs",
        }
    }
}

impl fmt::Display for SuiteFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SuiteFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic-hetero" => Ok(SuiteFamily::QuadraticHetero),
            "quadratic-homo" => Ok(SuiteFamily::QuadraticHomo),
            "logistic-blobs" => Ok(SuiteFamily::LogisticBlobs),
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }
}

fn default_ridge() -> f64 {
    0.1
}

fn default_heterogeneity() -> f64 {
    1.0
}

/// Parameters of a generated suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub family: SuiteFamily,
    /// Number of clients `M`.
    pub clients: usize,
    /// Components per client `N`.
    pub components: usize,
    pub dim: usize,
    /// Scale of the component centers (quadratics) or client feature means (logistic).
    #[serde(default = "default_heterogeneity")]
    pub heterogeneity: f64,
    /// Curvature floor `μ` added to every quadratic `GᵀG`.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

impl SuiteSpec {
    pub fn new(family: SuiteFamily, clients: usize, components: usize, dim: usize) -> Self {
        SuiteSpec {
            family,
            clients,
            components,
            dim,
            heterogeneity: default_heterogeneity(),
            ridge: default_ridge(),
        }
    }

    pub fn with_heterogeneity(mut self, s: f64) -> Self {
        self.heterogeneity = s;
        self
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("problem.clients", "must be at least 1"));
        }
        if self.components == 0 {
            return Err(Error::config("problem.components", "must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("problem.dim", "must be at least 1"));
        }
        if !(self.heterogeneity.is_finite() && self.heterogeneity >= 0.0) {
            return Err(Error::config("problem.heterogeneity", "must be finite and nonnegative"));
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::config("problem.ridge", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

fn random_quadratic<S: Scalar>(
    stream: &mut crate::vecmath::RngStream,
    d: usize,
    ridge: f64,
    center_scale: f64,
) -> Result<QuadraticComponent<S>> {
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut g = Matrix::<S>::zeros(d);
    for r in 0..d {
        for c in 0..d {
            g.set(r, c, S::lit(stream.standard_normal() * inv_sqrt_d));
        }
    }
    let a = Matrix::gram_plus_ridge(&g, S::lit(ridge));
    let center = Vector::from_vec(
        (0..d)
            .map(|_| S::lit(center_scale * stream.standard_normal()))
            .collect(),
    )?;
    QuadraticComponent::new(a, center, S::zero())
}

/// Generates a reproducible suite from `seed`.
pub fn make_suite<S: Scalar>(spec: &SuiteSpec, seed: u64) -> Result<FederationProblem<S>> {
    spec.validate()?;
    let seeds = StreamSeed(seed);
    let (m, n, d, s) = (spec.clients, spec.components, spec.dim, spec.heterogeneity);
    let clients = match spec.family {
        SuiteFamily::QuadraticHetero => (0..m)
            .map(|i| {
                let mut stream = seeds.stream(0, i as u64, Purpose::DataGen);
                let comps = (0..n)
                    .map(|_| random_quadratic::<S>(&mut stream, d, spec.ridge, s).map(Component::from))
                    .collect::<Result<Vec<_>>>()?;
                ClientProblem::new(i, comps)
            })
            .collect::<Result<Vec<_>>>()?,
        SuiteFamily::QuadraticHomo => {
            let mut stream = seeds.stream(0, 0, Purpose::DataGen);
            let comps = (0..n)
                .map(|_| random_quadratic::<S>(&mut stream, d, spec.ridge, s).map(Component::from))
                .collect::<Result<Vec<_>>>()?;
            (0..m)
                .map(|i| ClientProblem::new(i, comps.clone()))
                .collect::<Result<Vec<_>>>()?
        }
        SuiteFamily::LogisticBlobs => {
            let mut shared = seeds.stream(0, u64::MAX, Purpose::DataGen);
            let hyperplane: Vec<f64> = (0..d).map(|_| shared.standard_normal()).collect();
            (0..m)
                .map(|i| {
                    let mut stream = seeds.stream(0, i as u64, Purpose::DataGen);
                    let mean: Vec<f64> = (0..d).map(|_| s * stream.standard_normal()).collect();
                    let comps = (0..n)
                        .map(|_| {
                            let feats: Vec<f64> = mean
                                .iter()
                                .map(|mu| mu + stream.standard_normal())
                                .collect();
                            let score: f64 = feats.iter().zip(&hyperplane).map(|(a, b)| a * b).sum();
                            let label = if score >= 0.0 { S::one() } else { -S::one() };
                            let features = Vector::from_vec(feats.into_iter().map(S::lit).collect())?;
                            LogisticComponent::new(features, label).map(Component::from)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    ClientProblem::new(i, comps)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    FederationProblem::new(clients)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_quad(c: f64, center: f64, offset: f64) -> Component<f64> {
        QuadraticComponent::isotropic(c, Vector::from_f64s(&[center]).unwrap(), offset)
            .unwrap()
            .into()
    }

    fn two_client_1d(offset_shift: f64) -> FederationProblem<f64> {
        FederationProblem::new(vec![
            ClientProblem::new(0, vec![scalar_quad(1.0, 1.0, offset_shift)]).unwrap(),
            ClientProblem::new(1, vec![scalar_quad(1.0, -1.0, offset_shift)]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn identity_quadratic_gradient() {
        let q = QuadraticComponent::isotropic(1.0, Vector::zeros(2), 0.0).unwrap();
        let p = FederationProblem::new(vec![ClientProblem::new(0, vec![q.into()]).unwrap()]).unwrap();
        let g = grad_component(&p, 0, 0, &Vector::from_f64s(&[2.0, 0.0]).unwrap()).unwrap();
        assert_eq!(g.as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn logistic_zero_features_has_zero_gradient() {
        let l = LogisticComponent::new(Vector::<f64>::zeros(3), 1.0).unwrap();
        assert!(l.gradient(&Vector::from_f64s(&[1.0, -2.0, 3.0]).unwrap()).is_zero());
        assert!((l.value(&Vector::zeros(3)) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logistic_rejects_bad_label() {
        assert!(LogisticComponent::new(Vector::<f64>::zeros(1), 0.5).is_err());
    }

    #[test]
    fn symmetric_pair_gradient_vanishes_at_origin() {
        let client = ClientProblem::new(0, vec![scalar_quad(1.0, 1.0, 0.0), scalar_quad(1.0, -1.0, 0.0)])
            .unwrap();
        let p = FederationProblem::new(vec![client]).unwrap();
        let g = grad_local(&p, 0, &Vector::zeros(1)).unwrap();
        assert!(g.norm() < 1e-15);
    }

    #[test]
    fn delta_inf_of_shifted_pair() {
        let p = two_client_1d(0.0);
        let h = p.delta_inf();
        assert!(!h.approximate);
        assert!((h.value - 0.5).abs() < 1e-14);
        let shifted = two_client_1d(3.25);
        assert!((shifted.delta_inf().value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn delta_inf_identical_clients_is_zero() {
        let spec = SuiteSpec::new(SuiteFamily::QuadraticHomo, 4, 3, 5);
        let p: FederationProblem<f64> = make_suite(&spec, 11).unwrap();
        assert!(p.delta_inf().value.abs() < 1e-12);
    }

    #[test]
    fn logistic_delta_is_flagged() {
        let spec = SuiteSpec::new(SuiteFamily::LogisticBlobs, 3, 4, 2);
        let p: FederationProblem<f64> = make_suite(&spec, 1).unwrap();
        let h = p.delta_inf();
        assert!(h.approximate);
        assert_eq!(h.value, 0.0);
        assert!(p.f_inf().is_none());
    }

    #[test]
    fn non_psd_rejected() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let err = QuadraticComponent::new(a, Vector::zeros(2), 0.0).unwrap_err();
        assert!(matches!(err, Error::InvalidProblem(_)));
    }

    #[test]
    fn index_errors() {
        let p = two_client_1d(0.0);
        let x = Vector::zeros(1);
        assert!(matches!(grad_local(&p, 2, &x), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(grad_component(&p, 0, 1, &x), Err(Error::IndexOutOfRange { .. })));
        assert!(grad_global(&p, &Vector::zeros(2)).is_err());
    }

    #[test]
    fn unknown_family_rejected() {
        assert_eq!(
            "quadratic-weird".parse::<SuiteFamily>().unwrap_err(),
            Error::UnknownFamily("quadratic-weird".into())
        );
    }

    #[test]
    fn same_seed_same_suite() {
        let spec = SuiteSpec::new(SuiteFamily::QuadraticHetero, 3, 2, 4);
        let a: FederationProblem<f64> = make_suite(&spec, 5).unwrap();
        let b: FederationProblem<f64> = make_suite(&spec, 5).unwrap();
        let c: FederationProblem<f64> = make_suite(&spec, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn f32_suite_builds() {
        let spec = SuiteSpec::new(SuiteFamily::QuadraticHetero, 2, 2, 3);
        let p: FederationProblem<f32> = make_suite(&spec, 5).unwrap();
        assert!(p.delta_inf().value >= 0.0);
        assert!(p.smoothness() > 0.0);
    }
}
