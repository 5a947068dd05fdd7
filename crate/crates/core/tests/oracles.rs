//! Checks against independent references: central finite differences for
//! gradients, nalgebra for the quadratic minimizer, and a hand trace.

use approx::assert_relative_eq;
use fed_normec::fed_core::{MemoryInit, RunConfig, Simulation};
use fed_normec::problems::{
    make_suite, ClientProblem, Component, FederationProblem, QuadraticComponent, SuiteFamily, SuiteSpec,
};
use fed_normec::vecmath::Vector;
use nalgebra::{DMatrix, DVector};

fn finite_difference(f: impl Fn(&Vector<f64>) -> f64, x: &Vector<f64>) -> Vec<f64> {
    let h = 1e-6;
    (0..x.dim())
        .map(|j| {
            let mut up = x.clone();
            let mut down = x.clone();
            up[j] += h;
            down[j] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn gradients_match_finite_differences() {
    for family in [SuiteFamily::QuadraticHetero, SuiteFamily::QuadraticHomo, SuiteFamily::LogisticBlobs] {
        let problem: FederationProblem<f64> = make_suite(&SuiteSpec::new(family, 3, 4, 5), 11).unwrap();
        let x = Vector::from_f64s(&[0.3, -1.2, 0.7, 2.0, -0.4]).unwrap();
        let fd = finite_difference(|y| problem.value(y), &x);
        for (a, b) in problem.gradient(&x).iter().zip(&fd) {
            assert_relative_eq!(*a, *b, epsilon = 1e-6, max_relative = 1e-6);
        }
        for client in problem.clients() {
            let fd = finite_difference(|y| client.value(y), &x);
            for (a, b) in client.gradient(&x).iter().zip(&fd) {
                assert_relative_eq!(*a, *b, epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }
}

/// Solves `(Σ w A) x = Σ w A c` with nalgebra, weights `1/(M N_i)`.
fn nalgebra_minimizer(problem: &FederationProblem<f64>) -> DVector<f64> {
    let d = problem.dim();
    let mut h = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for client in problem.clients() {
        let w = 1.0 / (problem.num_clients() * client.num_components()) as f64;
        for comp in client.components() {
            let Component::Quadratic(q) = comp else { panic!("quadratic suite expected") };
            let a = DMatrix::from_fn(d, d, |i, j| q.curvature().get(i, j));
            let c = DVector::from_column_slice(q.center().as_slice());
            rhs += w * (&a * c);
            h += w * a;
        }
    }
    h.cholesky().expect("positive definite").solve(&rhs)
}

#[test]
fn minimizer_and_infimum_match_nalgebra() {
    for (family, seed) in [(SuiteFamily::QuadraticHetero, 1), (SuiteFamily::QuadraticHomo, 2), (SuiteFamily::QuadraticHetero, 3)] {
        let problem: FederationProblem<f64> = make_suite(&SuiteSpec::new(family, 4, 3, 6), seed).unwrap();
        let oracle = nalgebra_minimizer(&problem);
        let ours = problem.minimizer().expect("quadratics have a minimizer");
        for (a, b) in ours.iter().zip(oracle.iter()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-10, max_relative = 1e-9);
        }
        let x = Vector::from_vec(oracle.iter().copied().collect()).unwrap();
        assert_relative_eq!(problem.f_inf().unwrap(), problem.value(&x), epsilon = 1e-10, max_relative = 1e-9);
        assert!(problem.gradient(ours).norm() < 1e-9);
    }
}

#[test]
fn hand_trace_of_two_rounds() {
    // f_1 = ½x², f_2 = ½(x−2)², γ = 0.5, one GD step: residual (x − T_i x)/γ = ∇f_i(x).
    let quad = |c: f64| -> Component<f64> {
        QuadraticComponent::isotropic(1.0, Vector::from_f64s(&[c]).unwrap(), 0.0).unwrap().into()
    };
    let problem = FederationProblem::new(vec![
        ClientProblem::new(0, vec![quad(0.0)]).unwrap(),
        ClientProblem::new(1, vec![quad(2.0)]).unwrap(),
    ])
    .unwrap();
    let mut cfg = RunConfig::new(0.5, 0.5, 0.1, 1.0, 1);
    cfg.init = MemoryInit::Zero;
    let mut sim = Simulation::new(&problem, Vector::from_f64s(&[3.0]).unwrap(), cfg).unwrap();

    // round 0 at x = 3: residuals 3 and 1, Δ = 3/4 and 1/2, v = 3/8 and 1/4
    let rec = sim.step().unwrap();
    assert_eq!(rec.r_k, 3.0);
    let v = sim.memories();
    assert_eq!((v[0][0], v[1][0]), (0.375, 0.25));
    assert_eq!(sim.server().v_hat[0], 0.3125);
    assert_relative_eq!(sim.x()[0], 2.9, max_relative = 1e-15);

    // round 1 at x = 2.9: residuals 2.9 and 0.9
    let rec = sim.step().unwrap();
    assert_relative_eq!(rec.r_k, 2.9 - 0.375, max_relative = 1e-14);
    let d0 = (2.9 - 0.375) / (1.0 + (2.9f64 - 0.375));
    let d1 = (0.9 - 0.25) / (1.0 + (0.9f64 - 0.25));
    let v = sim.memories();
    assert_relative_eq!(v[0][0], 0.375 + 0.5 * d0, max_relative = 1e-14);
    assert_relative_eq!(v[1][0], 0.25 + 0.5 * d1, max_relative = 1e-14);
    assert_relative_eq!(sim.x()[0], 2.8, max_relative = 1e-14);
}
