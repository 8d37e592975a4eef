use al4dvar::observations::{boundary_trajectory, generate_observations};
use al4dvar::outer::initialize;
use al4dvar::stepper::uniform_partition;
use al4dvar::{
    parallel_cost, parallel_gradient, rmse, serial_cost, AssimilationProblem, AugLagParams,
    CovarianceOperator, Executor, ExtendedControl, Lorenz96, ModelSpec, MultiplierSet,
    ObservationOperator, ObservationSet, PenaltyScaling, SeededRng, Vector,
};
use proptest::prelude::*;

fn problem(seed: u64, intervals: usize, steps: usize) -> AssimilationProblem {
    let m = Lorenz96::new(12, 8.0).unwrap();
    let mut rng = SeededRng::new(seed);
    let x_ref =
        Vector::from_fn(12, |i, _| 3.0 * (i as f64 * 0.9).cos()) + rng.standard_normal_vector(12);
    let part = uniform_partition(0.0, 0.05, steps, intervals).unwrap();
    let hop = ObservationOperator::selection(12, vec![0, 3, 4, 9]).unwrap();
    let obs = generate_observations(&m, &x_ref, &part, &hop, 0.05, &mut rng).unwrap();
    let b0 = CovarianceOperator::scaled_identity(12, 0.4).unwrap();
    let xb = b0.sample(&x_ref, &mut rng).unwrap();
    AssimilationProblem::new(ModelSpec::Lorenz96(m), part, hop, obs, xb, b0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn consistent_control_cost_is_serial_cost(seed in 0u64..1000, mu in 1e-3f64..1e4, lam_scale in 0.0f64..50.0) {
        let prob = problem(seed, 4, 3);
        let x0 = prob.background().clone() * 1.05;
        let ctrl = ExtendedControl::new(boundary_trajectory(prob.model(), &x0, prob.partition()).unwrap()).unwrap();
        let mut rng = SeededRng::new(seed + 1);
        let lam = MultiplierSet::new((0..4).map(|_| rng.standard_normal_vector(12) * lam_scale).collect()).unwrap();
        let ap = AugLagParams::new(mu, PenaltyScaling::Background.build(&prob).unwrap()).unwrap();
        let (l, cache) = parallel_cost(&prob, &ctrl, &lam, &ap, &Executor::sequential()).unwrap();
        prop_assert_eq!(l.to_bits(), serial_cost(&prob, &x0).unwrap().0.to_bits());
        prop_assert_eq!(cache.constraint_violation(), 0.0);
    }

    #[test]
    fn worker_count_does_not_change_values(seed in 0u64..1000, workers in 2usize..5) {
        let prob = problem(seed, 5, 2);
        let (ctrl, _) = initialize(&prob).unwrap();
        let mut rng = SeededRng::new(seed);
        let ctrl = ExtendedControl::new(ctrl.states().iter().map(|x| x + rng.standard_normal_vector(12) * 0.2).collect()).unwrap();
        let lam = MultiplierSet::new((0..5).map(|_| rng.standard_normal_vector(12)).collect()).unwrap();
        let ap = AugLagParams::new(2.0, PenaltyScaling::Identity.build(&prob).unwrap()).unwrap();
        let seq = Executor::sequential();
        let par = Executor::with_workers(workers).unwrap();
        let (c1, k1) = parallel_cost(&prob, &ctrl, &lam, &ap, &seq).unwrap();
        let (c2, k2) = parallel_cost(&prob, &ctrl, &lam, &ap, &par).unwrap();
        prop_assert_eq!(c1.to_bits(), c2.to_bits());
        let g1 = parallel_gradient(&prob, &ctrl, &lam, &ap, &k1, &seq).unwrap().to_flat();
        let g2 = parallel_gradient(&prob, &ctrl, &lam, &ap, &k2, &par).unwrap().to_flat();
        prop_assert_eq!(g1, g2);
    }

    #[test]
    fn serial_cost_ignores_partition(seed in 0u64..1000) {
        // 2 sub-intervals of 4 steps vs 4 sub-intervals of 2 steps, observed at the shared boundaries.
        let coarse = problem(seed, 2, 4);
        let fine_part = uniform_partition(0.0, 0.05, 2, 4).unwrap();
        let moved = ObservationSet::new(
            coarse
                .observations()
                .entries()
                .iter()
                .map(|o| al4dvar::Observation { boundary: 2 * o.boundary, ..o.clone() })
                .collect(),
        )
        .unwrap();
        let fine = AssimilationProblem::new(
            coarse.model().clone(),
            fine_part,
            coarse.observation_operator().clone(),
            moved,
            coarse.background().clone(),
            coarse.background_covariance().clone(),
        )
        .unwrap();
        let x0 = coarse.background() * 0.97;
        prop_assert_eq!(serial_cost(&coarse, &x0).unwrap().0.to_bits(), serial_cost(&fine, &x0).unwrap().0.to_bits());
    }

    #[test]
    fn rmse_is_a_permutation_invariant_metric(seed in 0u64..1000, shift in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let a: Vec<Vector> = (0..4).map(|_| rng.standard_normal_vector(6)).collect();
        let b: Vec<Vector> = (0..4).map(|_| rng.standard_normal_vector(6)).collect();
        let perm = |v: &Vector| Vector::from_fn(6, |i, _| v[(i + shift) % 6]);
        let pa: Vec<Vector> = a.iter().map(perm).collect();
        let pb: Vec<Vector> = b.iter().map(perm).collect();
        let e = rmse(&a, &b).unwrap();
        prop_assert!(e > 0.0);
        prop_assert!((e - rmse(&pa, &pb).unwrap()).abs() <= 1e-15);
        prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    }
}
