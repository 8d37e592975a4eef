use al4dvar::{
    solve_auglag, solve_serial, AssimilationProblem, CovarianceOperator, Executor, LinearModel,
    ModelSpec, Observation, ObservationOperator, ObservationSet, OptimizerConfig, OuterConfig,
    OuterStatus, Vector,
};
use approx::assert_abs_diff_eq;
use nalgebra::{dvector, DMatrix};

/// One-step RK4 matrix for `dx/dt = A x`, expanded as a polynomial in `hA`.
fn rk4_matrix(a: &DMatrix<f64>, h: f64, steps: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let ha = a * h;
    let ha2 = &ha * &ha;
    let ha3 = &ha2 * &ha;
    let ha4 = &ha3 * &ha;
    let one = DMatrix::identity(n, n) + &ha + ha2 / 2.0 + ha3 / 6.0 + ha4 / 24.0;
    let mut m = DMatrix::identity(n, n);
    for _ in 0..steps {
        m = &one * m;
    }
    m
}

struct Case {
    prob: AssimilationProblem,
    analysis: Vector,
}

fn linear_case(observed: &[usize], intervals: usize) -> Case {
    let a = DMatrix::from_row_slice(2, 2, &[-0.2, 1.0, -1.0, -0.1]);
    let (h, steps) = (0.05, 4);
    let part = al4dvar::stepper::uniform_partition(0.0, h, steps, intervals).unwrap();
    let xb = dvector![1.0, -0.5];
    let b0 = CovarianceOperator::diagonal(dvector![0.3, 0.6]).unwrap();
    let r = [dvector![0.05, 0.2], dvector![0.1, 0.1], dvector![0.4, 0.02]];
    let y = [
        dvector![0.7, -0.9],
        dvector![0.2, -1.1],
        dvector![-0.3, -0.8],
    ];
    let obs = ObservationSet::new(
        observed
            .iter()
            .map(|&k| Observation {
                boundary: k,
                value: y[k - 1].clone(),
                covariance: CovarianceOperator::diagonal(r[k - 1].clone()).unwrap(),
            })
            .collect(),
    )
    .unwrap();

    // Dense normal equations: (B⁻¹ + Σ M_kᵀ R_k⁻¹ M_k) x = B⁻¹ xb + Σ M_kᵀ R_k⁻¹ y_k
    let step = rk4_matrix(&a, h, steps);
    let mut lhs = DMatrix::from_diagonal(&dvector![1.0 / 0.3, 1.0 / 0.6]);
    let mut rhs = &lhs * &xb;
    for &k in observed {
        let mut mk = DMatrix::identity(2, 2);
        for _ in 0..k {
            mk = &step * mk;
        }
        let rinv = DMatrix::from_diagonal(&r[k - 1].map(|v| 1.0 / v));
        lhs += mk.transpose() * &rinv * &mk;
        rhs += mk.transpose() * &rinv * &y[k - 1];
    }
    let analysis = lhs.lu().solve(&rhs).unwrap();

    let model = ModelSpec::Linear(LinearModel::new(a).unwrap());
    let prob = AssimilationProblem::new(model, part, ObservationOperator::identity(2), obs, xb, b0)
        .unwrap();
    Case { prob, analysis }
}

fn tight() -> OptimizerConfig {
    OptimizerConfig {
        grad_tol: 1e-10,
        ..Default::default()
    }
}

#[test]
fn serial_matches_normal_equations() {
    for (obs, n_int) in [(&[1usize, 2][..], 2), (&[2][..], 2), (&[1, 3][..], 3)] {
        let case = linear_case(obs, n_int);
        let r = solve_serial(&case.prob, &tight()).unwrap();
        assert_abs_diff_eq!(r.x(), case.analysis, epsilon = 1e-8);
    }
}

#[test]
fn auglag_matches_normal_equations() {
    for (obs, n_int) in [(&[1usize, 2][..], 2), (&[1, 3][..], 3)] {
        let case = linear_case(obs, n_int);
        let cfg = OuterConfig {
            inner: tight(),
            max_outer: 20,
            constraint_tol: Some(1e-10),
            ..Default::default()
        };
        for workers in [1, 2] {
            let r = solve_auglag(
                &case.prob,
                &cfg,
                &Executor::with_workers(workers).unwrap(),
                None,
            )
            .unwrap();
            assert_eq!(r.status, Some(OuterStatus::ConstraintsSatisfied));
            assert_abs_diff_eq!(r.analysis(), case.analysis, epsilon = 1e-6);
        }
    }
}

#[test]
fn background_only_problem_returns_background() {
    let case = linear_case(&[1], 2);
    let prob = case
        .prob
        .with_observations(ObservationSet::empty())
        .unwrap();
    let r = solve_serial(&prob, &tight()).unwrap();
    assert_abs_diff_eq!(r.x(), dvector![1.0, -0.5], epsilon = 1e-12);
}
