use graph_track::kalman_tracking::{kf_init, kf_step, solve_dare, DareOptions};
use graph_track::numerics::{self, Matrix, Vector};
use graph_track::observability::{observability_test, LsObserver, GRAM_RTOL};
use graph_track::parallel::trial_rng;
use graph_track::process_models::{diffusion_model, simulate, NoiseSpec, SimulationOptions};
use graph_track::spectral_graph::{random_geometric_graph, FrequencySet, ShiftKind, SpectralBasis, VertexSet};
use proptest::prelude::*;

fn model(seed: u64, n: usize, d: usize, rate: f64) -> graph_track::process_models::BandlimitedModel {
    let mut rng = trial_rng(seed, 0);
    let (g, _) = random_geometric_graph(n, 0.6, &mut rng).unwrap();
    let basis = SpectralBasis::of_graph(&g, ShiftKind::Laplacian).unwrap();
    diffusion_model(&basis, rate, &FrequencySet::new((0..d).collect(), n).unwrap(), NoiseSpec::isotropic(d, 0.01, 0.1)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn full_sampling_recovers_noiseless_state(seed in 0u64..1000, n in 3usize..12, horizon in 0usize..3) {
        let d = (n / 2).max(1);
        let m = model(seed, n, d, 0.3);
        let sets = vec![VertexSet::all(n); horizon + 1];
        prop_assert_eq!(observability_test(&m, &sets, horizon).unwrap().rank, d);
        let x0 = Vector::from_fn(d, |i, _| i as f64 - 1.5);
        let traj = simulate(&m, &x0, &[], horizon, &sets, SimulationOptions::noiseless(), &mut trial_rng(seed, 1)).unwrap();
        let est = LsObserver::new(&m, &sets, horizon, GRAM_RTOL).unwrap().recover(&m, &traj.measurements, &[]).unwrap();
        prop_assert!((est - x0).norm() < 1e-8);
    }

    #[test]
    fn covariance_stays_symmetric_psd(seed in 0u64..1000, n in 2usize..10, steps in 1usize..20) {
        let d = n.min(3);
        let m = model(seed, n, d, 0.5);
        let mut st = kf_init(&Vector::zeros(d), &Matrix::identity(d, d), n).unwrap();
        for k in 0..steps {
            let set = VertexSet::new((0..n).filter(|i| (i + k) % 2 == 0).collect(), n).unwrap();
            st = kf_step(&st, &m, None, &Vector::zeros(n), &set).unwrap();
            prop_assert!((&st.p_post - st.p_post.transpose()).abs().max() < 1e-12);
            prop_assert!(numerics::min_eigenvalue(&st.p_post).unwrap() > -1e-12);
            prop_assert!(st.p_post.trace() <= st.p_prior.trace() + 1e-12);
        }
    }

    #[test]
    fn more_sensors_never_hurt_steady_state(seed in 0u64..1000, n in 3usize..10) {
        let m = model(seed, n, 2, 0.2);
        let small = VertexSet::new(vec![0], n).unwrap();
        let large = VertexSet::new(vec![0, n - 1], n).unwrap();
        let a = solve_dare(&m, &small, DareOptions::default()).unwrap();
        let b = solve_dare(&m, &large, DareOptions::default()).unwrap();
        prop_assert!(b.p_inf.trace() <= a.p_inf.trace() * (1.0 + 1e-9));
    }
}
