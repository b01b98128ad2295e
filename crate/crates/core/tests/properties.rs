use std::f64::consts::PI;
use std::sync::OnceLock;

use mlcl_core::baselines::ekf::{ekf_predict, ekf_update, EkfState};
use mlcl_core::baselines::naive_estimate;
use mlcl_core::geometry::wrap_angle;
use mlcl_core::harness::results::bootstrap_stderr;
use mlcl_core::mlcl::{rollout, rollout_zero_filled};
use mlcl_core::sensing::{encode_external, make_episode};
use mlcl_core::tensorcore::checkpoint::Checkpoint;
use mlcl_core::world::{generate_grid_network, simulate_traces};
use mlcl_core::{Episode, ExperimentConfig, MlclDims, MlclParams, NoiseConfig, Point2, TraceSet};
use proptest::prelude::*;

const TINY: MlclDims = MlclDims { state: 4, message: 3, hidden: 8 };

fn traces() -> &'static TraceSet {
    static T: OnceLock<TraceSet> = OnceLock::new();
    T.get_or_init(|| {
        let net = generate_grid_network(4, 4, 150.0, 14.0).unwrap();
        simulate_traces(&net, 20, 120.0, 1.0, 11).unwrap()
    })
}

fn episode(seed: u64, group: usize, window: usize, cfg: &NoiseConfig) -> Episode {
    make_episode(traces(), group, window, cfg, seed).unwrap()
}

fn params(seed: u64) -> MlclParams {
    MlclParams::init(TINY, 1000.0, 500.0, &mut mlcl_core::rng::from_seed(seed)).with_origin(Point2::new(225.0, 225.0))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn wrapped_angles_stay_in_half_open_interval(a in -100.0f64..100.0) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        let turns = (a - w) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn episodes_validate_and_encode_unit_bearings(seed in 0u64..10_000, group in 1usize..6, rho_comm in 0.0f64..800.0) {
        let cfg = NoiseConfig { rho_comm, ..NoiseConfig::default() };
        let ep = episode(seed, group, 4, &cfg);
        prop_assert!(ep.validate(&cfg).is_ok());
        for step in &ep.steps {
            for m in &step.external {
                prop_assert!(step.graphs.meas.get(m.observer, m.subject));
                let [r, c, s] = encode_external(m, &cfg);
                prop_assert!(r >= 0.0);
                prop_assert!((c * c + s * s - 1.0).abs() < 1e-12);
            }
            for (a, b) in step.graphs.comm.edges() {
                prop_assert!(step.graphs.comm.get(b, a));
                prop_assert!(step.truth[a].dist(step.truth[b]) <= rho_comm);
            }
        }
    }

    #[test]
    fn zero_filling_equals_edge_deletion(seed in 0u64..10_000, rho_comm in 0.0f64..600.0, p_fail in 0.0f64..0.5) {
        let cfg = NoiseConfig { rho_comm, p_fail, ..NoiseConfig::default() };
        let ep = episode(seed, 4, 3, &cfg);
        let p = params(seed);
        for disable in [false, true] {
            let sparse = rollout(&p, &ep, disable).unwrap();
            let dense = rollout_zero_filled(&p, &ep, disable).unwrap();
            prop_assert_eq!(&sparse.estimates, &dense.estimates);
            prop_assert_eq!(sparse.loss.to_bits(), dense.loss.to_bits());
        }
    }

    #[test]
    fn relabeling_permutes_estimates(seed in 0u64..10_000, perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle()) {
        let ep = episode(seed, 4, 3, &NoiseConfig::default());
        let p = params(seed + 1);
        let base = rollout(&p, &ep, false).unwrap();
        let moved = rollout(&p, &ep.permuted(&perm).unwrap(), false).unwrap();
        for (row, row_moved) in base.estimates.iter().zip(&moved.estimates) {
            for (i, e) in row.iter().enumerate() {
                prop_assert!(e.dist(row_moved[perm[i]]) < 1e-9);
            }
        }
        prop_assert!((base.loss - moved.loss).abs() < 1e-9);
    }

    #[test]
    fn checkpoints_round_trip_exactly(seed in any::<u64>()) {
        let p = params(seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt.json");
        p.to_checkpoint(serde_json::json!({}), None).save(&path).unwrap();
        let (back, adam) = MlclParams::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        prop_assert!(adam.is_none());
        prop_assert_eq!(back, p);
    }

    #[test]
    fn naive_estimates_are_the_fixes(seed in 0u64..10_000) {
        let ep = episode(seed, 3, 4, &NoiseConfig::default());
        let est = naive_estimate(&ep);
        for (row, step) in est.iter().zip(&ep.steps) {
            prop_assert_eq!(row, &step.internal);
        }
    }

    #[test]
    fn ekf_covariance_stays_symmetric_psd(seed in 0u64..10_000, dt in 0.1f64..3.0) {
        let cfg = NoiseConfig::default();
        let ep = episode(seed, 3, 4, &cfg);
        let mut s = EkfState::init(&ep.steps[0].internal, cfg.sigma_gnss.powi(2), 1.0);
        for step in &ep.steps {
            let internal: Vec<Option<Point2>> = step.internal.iter().copied().map(Some).collect();
            s = ekf_update(&ekf_predict(&s, dt), &internal, &step.external, &cfg).unwrap();
            prop_assert!(s.asymmetry() < 1e-9);
            let eig = s.cov.clone().symmetric_eigen().eigenvalues;
            prop_assert!(eig.iter().all(|&l| l > -1e-9));
        }
    }

    #[test]
    fn bootstrap_error_ignores_offsets(values in prop::collection::vec(0.0f64..50.0, 2..40), shift in -100.0f64..100.0, seed in any::<u64>()) {
        let a = bootstrap_stderr(&values, 200, seed);
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let b = bootstrap_stderr(&shifted, 200, seed);
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
    }

    #[test]
    fn configs_survive_the_flat_format(seed in any::<u64>(), sigma in 0.5f64..30.0, rho in 0.0f64..2000.0, group in 1usize..20) {
        let mut cfg = ExperimentConfig { seed, group_size: group, ..ExperimentConfig::default() };
        cfg.noise.sigma_gnss = sigma;
        cfg.noise.rho_comm = rho;
        let back = ExperimentConfig::parse_str(&cfg.to_flat_string()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}
