use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use valrecon::allocation::{allocate, AllocationPolicy, GammaMode};
use valrecon::baseforecast::{fit_mean, Learning, Objective, RegressionSpec};
use valrecon::dataio::{
    ingest_csv, synthesize, uniform_correlation, write_generation_csv, write_price_csv,
    IngestOptions, SyntheticSpec,
};
use valrecon::evaluate::average_profit_aggregated;
use valrecon::hierarchy::{ForecastRecord, Hierarchy, SeriesVector};
use valrecon::market::{imbalance_cost, MarketHour, Penalties};
use valrecon::neural::{Activation, MlpParams, OutputBound};
use valrecon::reconcile::{initial_model, DualRule, DualState, ReconKind, ReconModel, TrainConfig};

const TOL: f64 = 1e-9;

fn vector(leaves: &[f64]) -> SeriesVector {
    let mut v = vec![leaves.iter().sum()];
    v.extend_from_slice(leaves);
    SeriesVector::new(v)
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64, f64)> {
    (1usize..7).prop_flat_map(|m| {
        (
            prop::collection::vec(0.0f64..5.0, m),
            prop::collection::vec(0.0f64..5.0, m),
            0.0f64..50.0,
            0.0f64..50.0,
        )
    })
}

fn gamma_mode() -> impl Strategy<Value = GammaMode> {
    prop_oneof![Just(GammaMode::Ge), Just(GammaMode::Pc)]
}

fn records_for(m: usize, seed: u64, count: usize) -> Vec<ForecastRecord> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|t| {
            let y: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..3.0)).collect();
            let base: Vec<f64> = (0..=m).map(|_| rng.random_range(0.0..3.0)).collect();
            ForecastRecord {
                t: t as i64,
                base: SeriesVector::new(base),
                context: vec![rng.random_range(-1.0..1.0)],
                actual: vector(&y),
                hour: MarketHour::from_penalties(
                    t as i64,
                    25.0,
                    Penalties::new(12.0, 4.0).unwrap(),
                )
                .unwrap(),
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn coherence_operator_annihilates_structure(m in 1usize..9) {
        let h = Hierarchy::two_level(m).unwrap();
        let s = h.structural_matrix();
        let c = h.coherence_operator();
        for row in &c {
            for j in 0..m {
                let v: i64 = row.iter().zip(&s).map(|(a, srow)| a * srow[j]).sum();
                prop_assert_eq!(v, 0);
            }
        }
    }

    #[test]
    fn aggregated_vectors_are_coherent(leaves in prop::collection::vec(-10.0f64..10.0, 1..9)) {
        let h = Hierarchy::two_level(leaves.len()).unwrap();
        let v = h.aggregate(&leaves).unwrap();
        prop_assert!(h.is_coherent(&v, 1e-12));
        prop_assert!(h.coherence_residual(&v).unwrap().iter().all(|r| r.abs() < 1e-12));
        prop_assert_eq!(v.leaves(leaves.len()), &leaves[..]);
    }

    #[test]
    fn allocation_is_bounded_by_pseudo_cost_and_share(
        (h, y, pp, pm) in instance(),
        w in 0.0f64..=1.0,
        mode in gamma_mode(),
    ) {
        let pen = Penalties::new(pp, pm).unwrap();
        let b = allocate(&AllocationPolicy::new(w, mode).unwrap(), &vector(&h), &vector(&y), &pen).unwrap();
        let gsum: f64 = b.gammas.iter().sum();
        prop_assert!((gsum - 1.0).abs() < TOL);
        for i in 0..h.len() {
            prop_assert!(b.gammas[i] >= 0.0);
            let share = b.gammas[i] * b.aggregate_cost;
            let lo = b.pseudo_costs[i].min(share) - TOL;
            let hi = b.pseudo_costs[i].max(share) + TOL;
            prop_assert!(b.allocated[i] >= lo && b.allocated[i] <= hi);
        }
        prop_assert!(b.pm_payoff >= -TOL * (1.0 + b.aggregate_cost));
    }

    #[test]
    fn cost_shares_never_exceed_pseudo_costs(
        (h, y, pp, pm) in instance(),
        w in 0.0f64..=1.0,
    ) {
        let pen = Penalties::new(pp, pm).unwrap();
        let b = allocate(&AllocationPolicy::new(w, GammaMode::Pc).unwrap(), &vector(&h), &vector(&y), &pen).unwrap();
        for i in 0..h.len() {
            prop_assert!(b.allocated[i] <= b.pseudo_costs[i] + TOL * (1.0 + b.pseudo_costs[i]));
        }
    }

    #[test]
    fn generation_shares_respect_unit_cost_condition(
        (h, y, pp, pm) in instance(),
        w in 0.0f64..=1.0,
    ) {
        let pen = Penalties::new(pp, pm).unwrap();
        let hv = vector(&h);
        let yv = vector(&y);
        let b = allocate(&AllocationPolicy::new(w, GammaMode::Ge).unwrap(), &hv, &yv, &pen).unwrap();
        let ysum: f64 = y.iter().sum();
        let holds = ysum > 0.0 && y.iter().zip(&b.pseudo_costs).all(|(&yi, &ci)| yi > 0.0 && b.aggregate_cost / ysum <= ci / yi);
        if holds {
            for i in 0..h.len() {
                prop_assert!(b.allocated[i] <= b.pseudo_costs[i] + TOL * (1.0 + b.pseudo_costs[i]));
            }
        }
    }

    #[test]
    fn settlement_sums_to_portfolio_profit(
        (h, y, pp, pm) in instance(),
        w in 0.0f64..=1.0,
        mode in gamma_mode(),
        pi_f in 0.0f64..60.0,
    ) {
        let pen = Penalties::new(pp, pm).unwrap();
        let b = allocate(&AllocationPolicy::new(w, mode).unwrap(), &vector(&h), &vector(&y), &pen).unwrap();
        let ysum: f64 = y.iter().sum();
        let hsum: f64 = h.iter().sum();
        let producers: f64 = y.iter().zip(&b.allocated).map(|(&yi, &ci)| pi_f * yi - ci).sum();
        let portfolio = pi_f * ysum - imbalance_cost(hsum, ysum, &pen);
        prop_assert!((producers + b.pm_payoff - portfolio).abs() < 1e-8 * (1.0 + portfolio.abs()));
    }

    #[test]
    fn dual_multipliers_never_decrease(
        steps in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..20),
    ) {
        let mut dual = DualState::new(vec![0.1, 0.2, 0.3]).unwrap();
        for v in &steps {
            let before = dual.mu.clone();
            dual.step(v, DualRule::AsWritten);
            for i in 0..3 {
                prop_assert!(dual.mu[i] >= before[i]);
                let expected = before[i] + dual.nu[i] * v[i].max(0.0);
                prop_assert!((dual.mu[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projected_multipliers_stay_nonnegative(
        steps in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 2), 1..20),
    ) {
        let mut dual = DualState::new(vec![1.0, 0.5]).unwrap();
        for v in &steps {
            dual.step(v, DualRule::Projected);
            prop_assert!(dual.mu.iter().all(|&mu| mu >= 0.0));
        }
    }

    #[test]
    fn mlp_forward_is_deterministic_and_bounded(
        seed in any::<u64>(),
        input in prop::collection::vec(-100.0f64..100.0, 3),
        caps in prop::collection::vec(0.1f64..10.0, 2),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MlpParams::init(&[3, 8, 2], Activation::Tanh, OutputBound::ScaledSigmoid(caps.clone()), &mut rng).unwrap();
        let a = net.forward(&input).unwrap();
        let b = net.forward(&input).unwrap();
        prop_assert_eq!(&a, &b);
        for (o, u) in a.iter().zip(&caps) {
            prop_assert!(*o >= 0.0 && *o <= *u);
        }
    }

    #[test]
    fn reconciled_vectors_are_coherent_for_any_parameters(
        m in 1usize..5,
        seed in any::<u64>(),
        params in prop::collection::vec(-3.0f64..3.0, 400),
        linear in any::<bool>(),
    ) {
        let h = Hierarchy::two_level(m).unwrap();
        let records = records_for(m, seed, 16);
        let caps = vec![3.0; m];
        let kind = if linear { ReconKind::ValueLinear } else { ReconKind::ValueLearned };
        let config = TrainConfig { hidden_width: 6, ..TrainConfig::default() };
        let mut model = initial_model(kind, &h, &records, &caps, &config).unwrap();
        let net = model.network_mut().unwrap();
        let count = net.params.param_count();
        net.params.set_flat(&params[..count]).unwrap();
        for r in &records {
            let rec = model.reconcile(&r.base, &r.context).unwrap();
            prop_assert!(h.is_coherent(&rec, 1e-9));
            for &leaf in rec.leaves(m) {
                prop_assert!(leaf.is_finite() && (0.0..=3.0).contains(&leaf));
            }
        }
    }

    #[test]
    fn forecasts_stay_within_capacity(
        seed in 0u64..1000,
        cap in 0.5f64..5.0,
        features in prop::collection::vec(-1e3f64..1e3, 3),
    ) {
        let raw = synthesize(&SyntheticSpec {
            m: 1,
            capacities: vec![cap],
            ar: vec![0.8],
            correlation: uniform_correlation(1, 0.0),
            hours: 300,
            seed,
            ..SyntheticSpec::default()
        }).unwrap();
        let spec = RegressionSpec {
            target: 1,
            lags: vec![1, 2, 3],
            lead: 1,
            objective: Objective::SquaredError,
            learning: Learning::default(),
            capacity: cap,
        };
        let f = fit_mean(raw.series(1), &spec).unwrap();
        let p = f.predict(&features).unwrap();
        prop_assert!((0.0..=cap).contains(&p));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bottom_up_profit_is_affine_in_weight(
        m in 1usize..5,
        seed in any::<u64>(),
        mode in gamma_mode(),
        w1 in 0.0f64..=1.0,
        w2 in 0.0f64..=1.0,
        t in 0.0f64..=1.0,
    ) {
        let records = records_for(m, seed, 20);
        let model = ReconModel::bottom_up(Hierarchy::two_level(m).unwrap());
        let ap = |w: f64| average_profit_aggregated(&records, &model, &AllocationPolicy::new(w, mode).unwrap()).unwrap();
        let mid = t * w1 + (1.0 - t) * w2;
        let (a, b, c) = (ap(w1), ap(w2), ap(mid));
        for i in 0..m {
            let interp = t * a[i] + (1.0 - t) * b[i];
            prop_assert!((c[i] - interp).abs() < 1e-8 * (1.0 + interp.abs()));
        }
    }

    #[test]
    fn csv_round_trip_preserves_data(seed in any::<u64>(), m in 1usize..4, hours in 5usize..60) {
        let raw = synthesize(&SyntheticSpec {
            m,
            capacities: vec![2.0; m],
            ar: vec![0.5; m],
            correlation: uniform_correlation(m, 0.2),
            hours,
            seed,
            ..SyntheticSpec::default()
        }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let gen = dir.path().join("generation.csv");
        let price = dir.path().join("price.csv");
        write_generation_csv(&raw, &gen, Some("roundtrip")).unwrap();
        write_price_csv(&raw, &price, None).unwrap();
        let back = ingest_csv(&gen, &price, &IngestOptions::default()).unwrap();
        prop_assert_eq!(&back.timestamps, &raw.timestamps);
        prop_assert_eq!(&back.leaves, &raw.leaves);
        prop_assert_eq!(&back.prices, &raw.prices);
        for (a, b) in back.aggregate.iter().zip(&raw.aggregate) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
