use std::sync::Arc;

use proptest::prelude::*;

use fbsde_lab::bsde::{solve_bsde, SolverConfig};
use fbsde_lab::drivers::{a_priori_bound, build_linearizer, make_truncation, truncate_driver, validate_driver, Driver, TerminalCondition};
use fbsde_lab::ldp::{action, ActionProblem, Event};
use fbsde_lab::pde::{solve_pde, PdeProblem};
use fbsde_lab::regression::RegressionBasis;
use fbsde_lab::{make_grid, measure_perturbation_gap, simulate_forward, solve_deterministic_flow, ForwardModel, PathEnsemble};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config(32))]

    #[test]
    fn single_path_regeneration_matches_the_ensemble(seed in any::<u64>(), dim in 1usize..4, steps in 1usize..20, j in 0usize..40) {
        let ens = PathEnsemble::sample(make_grid(0.0, 1.0, steps).unwrap(), 40, dim, seed).unwrap();
        prop_assert_eq!(ens.regenerate_path(j), ens.path_increments(j).to_vec());
        let w = ens.brownian_path(j);
        prop_assert!(w[..dim].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_drift_gap_scales_with_root_epsilon(seed in any::<u64>(), theta in 0.0f64..2.0, eps in 0.01f64..1.0) {
        let model = ForwardModel::mean_reverting(theta, 1.0);
        let ens = Arc::new(PathEnsemble::sample(make_grid(0.0, 1.0, 20).unwrap(), 200, 1, seed).unwrap());
        let full = measure_perturbation_gap(&model, &ens, &[0.7], 1.0, 2.0).unwrap();
        let part = measure_perturbation_gap(&model, &ens, &[0.7], eps, 2.0).unwrap();
        prop_assert!((part - eps.sqrt() * full).abs() <= 1e-12 * full);
    }

    #[test]
    fn zero_noise_euler_tracks_the_flow(theta in 0.0f64..2.0, x0 in -2.0f64..2.0, steps in 10usize..200) {
        let model = ForwardModel::mean_reverting(theta, 1.0);
        let grid = make_grid(0.0, 1.0, steps).unwrap();
        let ens = Arc::new(PathEnsemble::sample(grid, 4, 1, 1).unwrap());
        let fwd = simulate_forward(&model, &ens, &[x0], 0.0).unwrap();
        let flow = solve_deterministic_flow(&model, &grid, &[x0]).unwrap();
        let worst = (0..=steps).map(|i| (fwd.state(0, i)[0] - flow[i][0]).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 5.0 * grid.dt(), "{worst}");
    }

    #[test]
    fn truncation_is_an_odd_contraction_with_identity_core(n in 2u32..7, x in -20.0f64..20.0) {
        let h = make_truncation(n).unwrap();
        let core = (n - 1) as f64;
        prop_assert!((h.h(x) + h.h(-x)).abs() < 1e-12);
        prop_assert!(h.h(x).abs() <= n as f64 + 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&h.dh(x)));
        if x.abs() <= core {
            prop_assert_eq!(h.h(x), x);
        }
    }

    #[test]
    fn linearizer_round_trips_and_is_increasing(c in -1.0f64..1.0, y in -3.0f64..3.0) {
        let lin = build_linearizer(move |_| c, 3.0, 4000).unwrap();
        let phi = lin.phi(y).unwrap();
        prop_assert!((lin.phi_inv(phi).unwrap() - y).abs() < 1e-8);
        prop_assert!(lin.dphi(y).unwrap() > 0.0);
        let (lo, hi) = lin.phi_range();
        prop_assert!(lo <= phi && phi <= hi);
    }

    #[test]
    fn discrete_action_is_nonnegative(bumps in prop::collection::vec(-1.0f64..1.0, 17)) {
        let problem = ActionProblem::with_grid(
            ForwardModel::brownian(1, 1.0),
            vec![0.0],
            make_grid(0.0, 1.0, 16).unwrap(),
            Event::Endpoint { target: vec![0.0], radius: 1.0 },
        ).unwrap();
        let mut path: Vec<Vec<f64>> = bumps.iter().map(|b| vec![*b]).collect();
        path[0] = vec![0.0];
        prop_assert!(action(&problem, &path).unwrap().value >= 0.0);
    }

    #[test]
    fn heat_field_obeys_the_maximum_principle(eps in 0.05f64..1.0, shift in -0.5f64..0.5) {
        let grid = make_grid(0.0, 1.0, 40).unwrap();
        let tc = TerminalCondition::cosine(1).shifted(shift);
        let p = PdeProblem::from_model(&ForwardModel::brownian(1, 1.0), &Driver::zero(), &tc, eps, &grid, (-1.0, 1.0), 80, 1.0).unwrap();
        let field = solve_pde(&p).unwrap();
        let (lo, hi) = (shift - 1.0, shift + 1.0);
        prop_assert!(field.u.iter().all(|&u| u >= lo - 1e-12 && u <= hi + 1e-12));
    }
}

proptest! {
    #![proptest_config(config(8))]

    #[test]
    fn backward_solution_respects_terminal_value_and_bound(seed in any::<u64>(), x0 in -1.0f64..1.0, lambda in 0.0f64..1.0) {
        let ens = Arc::new(PathEnsemble::sample(make_grid(0.0, 1.0, 10).unwrap(), 500, 1, seed).unwrap());
        let fwd = Arc::new(simulate_forward(&ForwardModel::brownian(1, 1.0), &ens, &[x0], 1.0).unwrap());
        let drv = Driver::lipschitz_example(lambda);
        let tc = TerminalCondition::sine(1);
        let sol = solve_bsde(&fwd, &drv, &tc, &RegressionBasis::polynomial(3, 1), &SolverConfig::default()).unwrap();
        for j in 0..sol.n_paths() {
            prop_assert_eq!(sol.y_at(10, j), tc.eval(fwd.state(j, 10)));
        }
        prop_assert!(sol.max_abs_y() <= a_priori_bound(drv.k_const(), 1.0, tc.bound()) + 1e-12);
        prop_assert!(sol.clamp().y_fraction() <= 0.1);
    }

    #[test]
    fn truncated_drivers_keep_their_constants(n in 2u32..6, seed in any::<u64>()) {
        for drv in [Driver::cross_quadratic(1.0), Driver::burgers_cross(0.7, 1), Driver::drifted_quadratic(vec![0.3], 0.5), Driver::subadditive(0.5, 1.0)] {
            let cut = truncate_driver(&drv, &make_truncation(n).unwrap());
            prop_assert_eq!(cut.k_const(), drv.k_const());
            let report = validate_driver(&cut, 2000, seed);
            prop_assert!(report.passed, "{} at n = {}: {:?}", drv.kind(), n, report);
        }
    }
}
