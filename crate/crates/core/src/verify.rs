//! Randomized property suites over the settlement, hierarchy, allocation and
//! training layers.
//!
//! Every suite draws its instances from a seeded generator, so a failing run
//! can be replayed from the seed and instance index in its counterexample.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::allocation::{
    allocate, check_unit_cost_condition, extra_profit, AllocationPolicy, GammaMode, SettlementBreakdown,
    UnitCostCondition,
};
use crate::baseforecast::pinball_loss;
use crate::error::Result;
use crate::hierarchy::{ForecastRecord, Hierarchy, SeriesVector};
use crate::market::{
    imbalance_cost, nominal_level, positive_part, profit, profit_decomposed, MarketHour, Penalties,
};
use crate::neural::{finite_diff_check, Activation, MlpParams, OutputBound};
use crate::reconcile::{gradient_error, initial_model, DualState, ReconKind, ReconModel, TrainConfig};

/// Signature of the allocation rule under test.
pub type AllocateFn =
    fn(&AllocationPolicy, &SeriesVector, &SeriesVector, &Penalties) -> Result<SettlementBreakdown>;

/// Allocation with the pseudo-cost weight clamped to `[0, 0.5]`. Used to check
/// that the suites catch a broken rule.
pub fn faulty_allocate(
    policy: &AllocationPolicy,
    reconciled: &SeriesVector,
    actual: &SeriesVector,
    penalties: &Penalties,
) -> Result<SettlementBreakdown> {
    let mut b = allocate(policy, reconciled, actual, penalties)?;
    let w = policy.w();
    let wrong = w.clamp(0.0, 0.5);
    for i in 0..b.allocated.len() {
        b.allocated[i] = (1.0 - wrong) * b.pseudo_costs[i] + w * b.gammas[i] * b.aggregate_cost;
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub instances: usize,
    pub gradient_instances: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            instances: 10_000,
            gradient_instances: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    pub failures: usize,
    /// Largest observed error, for suites with a numeric tolerance.
    pub max_error: Option<f64>,
    /// First failing instance.
    pub counterexample: Option<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

struct Tally {
    name: &'static str,
    instances: usize,
    failures: usize,
    max_error: Option<f64>,
    counterexample: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            instances: 0,
            failures: 0,
            max_error: None,
            counterexample: None,
        }
    }

    fn check(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.instances += 1;
        if !ok {
            self.failures += 1;
            if self.counterexample.is_none() {
                self.counterexample = Some(describe());
            }
        }
    }

    fn error(&mut self, e: f64) {
        self.max_error = Some(self.max_error.map_or(e, |m: f64| m.max(e)));
    }

    fn fail_with(&mut self, message: String) {
        self.instances += 1;
        self.failures += 1;
        if self.counterexample.is_none() {
            self.counterexample = Some(message);
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            instances: self.instances,
            failures: self.failures,
            max_error: self.max_error,
            counterexample: self.counterexample,
        }
    }
}

fn suite_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn random_penalties(rng: &mut ChaCha8Rng) -> Penalties {
    let draw = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.1) {
            0.0
        } else {
            rng.random_range(0.0..30.0)
        }
    };
    Penalties::new(draw(rng), draw(rng)).expect("non-negative penalties")
}

/// Generation in `[0, 3]`, exactly zero about one time in ten.
fn random_generation(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random_bool(0.1) {
        0.0
    } else {
        rng.random_range(0.0..3.0)
    }
}

/// One allocation instance: a coherent reconciled vector, actuals and penalties.
struct Instance {
    reconciled: SeriesVector,
    actual: SeriesVector,
    penalties: Penalties,
}

impl Instance {
    fn random(rng: &mut ChaCha8Rng, max_m: usize) -> Self {
        let m = rng.random_range(1..=max_m);
        let h = Hierarchy::two_level(m).expect("m >= 1");
        let leaves: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..3.0)).collect();
        let y: Vec<f64> = (0..m).map(|_| random_generation(rng)).collect();
        Self {
            reconciled: h.aggregate(&leaves).expect("matching width"),
            actual: h.aggregate(&y).expect("matching width"),
            penalties: random_penalties(rng),
        }
    }

    fn m(&self) -> usize {
        self.reconciled.len() - 1
    }

    fn describe(&self, index: usize, extra: &str) -> String {
        format!(
            "instance {index}: reconciled {:?} actual {:?} psi+ {} psi- {} {extra}",
            self.reconciled.0,
            self.actual.0,
            self.penalties.psi_plus(),
            self.penalties.psi_minus()
        )
    }
}

fn tol(scale: f64) -> f64 {
    1e-9 * (1.0 + scale.abs())
}

/// Profit from the offer/regulation prices against the forward-revenue minus
/// imbalance-cost form.
pub fn settlement_identity(opts: &VerifyOptions) -> SuiteResult {
    let mut t = Tally::new("settlement_identity");
    let mut rng = suite_rng(opts.seed, 1);
    for k in 0..opts.instances {
        let pi_f = rng.random_range(0.0..60.0);
        let pen = random_penalties(&mut rng);
        let Ok(hour) = MarketHour::from_penalties(k as i64, pi_f, pen) else {
            t.fail_with(format!("instance {k}: rejected hour pi_f {pi_f} {pen:?}"));
            continue;
        };
        let offer = rng.random_range(0.0..3.0);
        let actual = random_generation(&mut rng);
        let a = profit(offer, actual, &hour);
        let b = profit_decomposed(offer, actual, &hour);
        let denom = a.abs().max(b.abs());
        let rel = if a == b { 0.0 } else { (a - b).abs() / denom };
        t.error(rel);
        t.check(rel <= 1e-9, || {
            format!("instance {k}: offer {offer} actual {actual} hour {hour:?}: {a} vs {b}")
        });
    }
    t.finish()
}

/// Non-negativity, one active hinge, and scale invariance of the nominal level.
pub fn imbalance_cost_structure(opts: &VerifyOptions) -> SuiteResult {
    let mut t = Tally::new("imbalance_cost_structure");
    let mut rng = suite_rng(opts.seed, 2);
    for k in 0..opts.instances {
        let pen = random_penalties(&mut rng);
        let offer = rng.random_range(0.0..3.0);
        let actual = random_generation(&mut rng);
        let c = imbalance_cost(offer, actual, &pen);
        let short = positive_part(actual - offer);
        let long = positive_part(offer - actual);
        let one_hinge = offer == actual || (short > 0.0) != (long > 0.0);
        let scale = rng.random_range(0.01..100.0);
        let level_ok = match nominal_level(&pen) {
            Ok(a) => {
                let scaled = Penalties::new(pen.psi_plus() * scale, pen.psi_minus() * scale)
                    .and_then(|p| nominal_level(&p));
                (0.0..=1.0).contains(&a) && scaled.is_ok_and(|b| (a - b).abs() <= 1e-12)
            }
            Err(_) => pen.is_degenerate(),
        };
        t.check(c >= 0.0 && one_hinge && level_ok, || {
            format!("instance {k}: offer {offer} actual {actual} {pen:?} cost {c}")
        });
    }
    t.finish()
}

/// `B S = 0`, coherence of aggregated vectors, and the exact two-level sum.
pub fn hierarchy_algebra(opts: &VerifyOptions) -> SuiteResult {
    let mut t = Tally::new("hierarchy_algebra");
    let mut rng = suite_rng(opts.seed, 3);
    for k in 0..opts.instances.min(1000) {
        let m = rng.random_range(1..=6);
        let h = if rng.random_bool(0.5) {
            Hierarchy::two_level(m).expect("m >= 1")
        } else {
            let rows = rng.random_range(1..=3);
            let s_sum: Vec<Vec<u8>> = (0..rows)
                .map(|_| (0..m).map(|_| rng.random_range(0..=1u8)).collect())
                .collect();
            match Hierarchy::from_aggregation(m, s_sum) {
                Ok(h) => h,
                Err(_) => Hierarchy::two_level(m).expect("m >= 1"),
            }
        };
        let s = h.structural_matrix();
        let b = h.coherence_operator();
        let zero = b.iter().all(|row| {
            (0..h.m()).all(|j| row.iter().zip(&s).map(|(x, srow)| x * srow[j]).sum::<i64>() == 0)
        });
        let bottom: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..5.0)).collect();
        let v = h.aggregate(&bottom).expect("matching width");
        let exact_sum = !h.is_two_level() || v.0[0] == bottom.iter().sum::<f64>();
        t.check(zero && h.is_coherent(&v, 1e-6) && exact_sum, || {
            format!("instance {k}: structural {s:?} bottom {bottom:?}")
        });
    }
    t.finish()
}

/// Aggregate imbalance cost never exceeds the sum of pseudo-offer costs.
pub fn subadditivity(opts: &VerifyOptions) -> SuiteResult {
    let mut t = Tally::new("subadditivity");
    let mut rng = suite_rng(opts.seed, 4);
    for k in 0..opts.instances {
        let inst = Instance::random(&mut rng, 8);
        let m = inst.m();
        let pen = &inst.penalties;
        let agg = imbalance_cost(inst.reconciled.total(), inst.actual.total(), pen);
        let sum: f64 = (1..=m)
            .map(|i| imbalance_cost(inst.reconciled.0[i], inst.actual.0[i], pen))
            .sum();
        t.check(agg <= sum + tol(sum), || inst.describe(k, &format!("{agg} > {sum}")));
    }
    t.finish()
}

/// With cost shares every producer pays at most its pseudo-offer cost.
pub fn cost_share_individual_rationality(opts: &VerifyOptions, alloc: AllocateFn) -> SuiteResult {
    let mut t = Tally::new("cost_share_individual_rationality");
    let mut rng = suite_rng(opts.seed, 5);
    for k in 0..opts.instances {
        let inst = Instance::random(&mut rng, 6);
        let policy = AllocationPolicy::new(rng.random_range(0.0..=1.0), GammaMode::Pc).expect("w in range");
        match alloc(&policy, &inst.reconciled, &inst.actual, &inst.penalties) {
            Ok(b) => {
                let ok = b
                    .allocated
                    .iter()
                    .zip(&b.pseudo_costs)
                    .all(|(a, c)| *a <= c + tol(*c));
                t.check(ok, || {
                    inst.describe(
                        k,
                        &format!("w {} allocated {:?} pseudo {:?}", policy.w(), b.allocated, b.pseudo_costs),
                    )
                });
            }
            Err(e) => t.fail_with(inst.describe(k, &format!("error {e}"))),
        }
    }
    t.finish()
}

/// With generation shares, the unit-cost condition implies individual rationality.
pub fn generation_share_individual_rationality(opts: &VerifyOptions, alloc: AllocateFn) -> SuiteResult {
    let mut t = Tally::new("generation_share_individual_rationality");
    let mut rng = suite_rng(opts.seed, 6);
    for k in 0..opts.instances {
        let inst = Instance::random(&mut rng, 6);
        if check_unit_cost_condition(&inst.reconciled, &inst.actual, &inst.penalties) != UnitCostCondition::Holds {
            continue;
        }
        let policy = AllocationPolicy::new(rng.random_range(0.0..=1.0), GammaMode::Ge).expect("w in range");
        match alloc(&policy, &inst.reconciled, &inst.actual, &inst.penalties) {
            Ok(b) => {
                let ok = b
                    .allocated
                    .iter()
                    .zip(&b.pseudo_costs)
                    .all(|(a, c)| *a <= c + tol(*c));
                t.check(ok, || {
                    inst.describe(k, &format!("w {} allocated {:?}", policy.w(), b.allocated))
                });
            }
            Err(e) => t.fail_with(inst.describe(k, &format!("error {e}"))),
        }
    }
    t.finish()
}

/// `c_sum <= sum allocated <= sum pseudo`, shares on the simplex, non-negative
/// PM payoff, and efficiency exactly at `w = 1`.
pub fn allocation_bounds(opts: &VerifyOptions, alloc: AllocateFn) -> SuiteResult {
    let mut t = Tally::new("allocation_bounds");
    let mut rng = suite_rng(opts.seed, 7);
    let weights = [0.0, 0.25, 0.5, 0.75, 1.0];
    for k in 0..opts.instances {
        let inst = Instance::random(&mut rng, 6);
        let w = weights[k % weights.len()];
        let mode = if rng.random_bool(0.5) { GammaMode::Ge } else { GammaMode::Pc };
        let policy = AllocationPolicy::new(w, mode).expect("w in range");
        let b = match alloc(&policy, &inst.reconciled, &inst.actual, &inst.penalties) {
            Ok(b) => b,
            Err(e) => {
                t.fail_with(inst.describe(k, &format!("error {e}")));
                continue;
            }
        };
        let total: f64 = b.allocated.iter().sum();
        let pseudo: f64 = b.pseudo_costs.iter().sum();
        let gamma_sum: f64 = b.gammas.iter().sum();
        let sandwich = b.aggregate_cost <= total + tol(total) && total <= pseudo + tol(pseudo);
        let shares = b.gammas.iter().all(|&g| g >= 0.0) && (gamma_sum - 1.0).abs() <= 1e-9;
        let payoff = b.pm_payoff >= -tol(pseudo);
        let efficient = (total - b.aggregate_cost).abs() <= tol(total);
        let surplus = pseudo - b.aggregate_cost > 1e-6 * (1.0 + pseudo);
        let efficiency = !surplus || (efficient == (w == 1.0));
        t.check(sandwich && shares && payoff && efficiency, || {
            inst.describe(
                k,
                &format!(
                    "w {w} {mode:?} allocated {:?} aggregate {} pseudo {pseudo} gammas {:?}",
                    b.allocated, b.aggregate_cost, b.gammas
                ),
            )
        });
    }
    t.finish()
}

/// Exact identities at `w = 0`, `w = 1`, and for all-zero generation.
pub fn allocation_boundaries(opts: &VerifyOptions, alloc: AllocateFn) -> SuiteResult {
    let mut t = Tally::new("allocation_boundaries");
    let mut rng = suite_rng(opts.seed, 8);
    for k in 0..opts.instances {
        let mut inst = Instance::random(&mut rng, 6);
        let m = inst.m();
        if k % 10 == 0 {
            let h = Hierarchy::two_level(m).expect("m >= 1");
            inst.actual = h.aggregate(&vec![0.0; m]).expect("matching width");
        }
        let mode = if rng.random_bool(0.5) { GammaMode::Ge } else { GammaMode::Pc };
        let run = |w: f64| {
            alloc(
                &AllocationPolicy::new(w, mode).expect("w in range"),
                &inst.reconciled,
                &inst.actual,
                &inst.penalties,
            )
        };
        let (b0, b1) = match (run(0.0), run(1.0)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                t.fail_with(inst.describe(k, &format!("error {e}")));
                continue;
            }
        };
        let w0 = b0.allocated == b0.pseudo_costs;
        let w1 = b1
            .allocated
            .iter()
            .zip(&b1.gammas)
            .all(|(a, g)| *a == g * b1.aggregate_cost);
        let degenerate = mode == GammaMode::Pc
            || inst.actual.total() != 0.0
            || b1.gammas.iter().all(|&g| g == 1.0 / m as f64);
        t.check(w0 && w1 && degenerate, || {
            inst.describe(
                k,
                &format!("{mode:?} w=0 {:?} w=1 {:?} gammas {:?}", b0.allocated, b1.allocated, b1.gammas),
            )
        });
    }
    t.finish()
}

/// Shortfall of allocated against independent costs is bounded by the extra
/// profit, and producers plus PM split exactly the portfolio value.
pub fn extra_profit_accounting(opts: &VerifyOptions, alloc: AllocateFn) -> SuiteResult {
    let mut t = Tally::new("extra_profit_accounting");
    let mut rng = suite_rng(opts.seed, 9);
    for k in 0..opts.instances {
        let inst = Instance::random(&mut rng, 6);
        let m = inst.m();
        let pen = &inst.penalties;
        let base: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..3.0)).collect();
        let policy = AllocationPolicy::new(rng.random_range(0.0..=1.0), GammaMode::Ge).expect("w in range");
        let pi_f = rng.random_range(0.0..60.0);
        let (b, r) = match (
            alloc(&policy, &inst.reconciled, &inst.actual, pen),
            extra_profit(&base, inst.reconciled.total(), &inst.actual, pen),
        ) {
            (Ok(b), Ok(r)) => (b, r),
            (Err(e), _) | (_, Err(e)) => {
                t.fail_with(inst.describe(k, &format!("error {e}")));
                continue;
            }
        };
        let y = inst.actual.leaves(m);
        let independent: f64 = base.iter().zip(y).map(|(&o, &yi)| imbalance_cost(o, yi, pen)).sum();
        let allocated: f64 = b.allocated.iter().sum();
        let bounded = independent - allocated <= r + tol(independent);
        let producer_value: f64 = y.iter().zip(&b.allocated).map(|(&yi, &c)| pi_f * yi - c).sum();
        let portfolio = pi_f * inst.actual.total() - b.aggregate_cost;
        let conserved = (producer_value + b.pm_payoff - portfolio).abs() <= tol(portfolio.abs() + allocated);
        t.check(bounded && conserved, || {
            inst.describe(k, &format!("base {base:?} R {r} allocated {:?}", b.allocated))
        });
    }
    t.finish()
}

/// On empirical distributions, the aggregate newsvendor cost at its optimal
/// quantile offer is at most the sum of the leaves' optimal costs.
pub fn centralized_newsvendor(opts: &VerifyOptions) -> SuiteResult {
    let mut t = Tally::new("centralized_newsvendor");
    let mut rng = suite_rng(opts.seed, 10);
    let optimal_mean_cost = |samples: &[f64], pen: &Penalties, level: f64| {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let k = ((level * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
        let offer = sorted[k];
        samples.iter().map(|&y| imbalance_cost(offer, y, pen)).sum::<f64>() / samples.len() as f64
    };
    for k in 0..opts.instances.min(2000) {
        let m = rng.random_range(1..=5);
        let pen = Penalties::new(rng.random_range(0.1..30.0), rng.random_range(0.1..30.0)).expect("positive");
        let level = nominal_level(&pen).expect("non-degenerate");
        let n = 40;
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| random_generation(&mut rng)).collect())
            .collect();
        let total: Vec<f64> = samples.iter().map(|s| s.iter().sum()).collect();
        let central = optimal_mean_cost(&total, &pen, level);
        let separate: f64 = (0..m)
            .map(|i| {
                let leaf: Vec<f64> = samples.iter().map(|s| s[i]).collect();
                optimal_mean_cost(&leaf, &pen, level)
            })
            .sum();
        t.check(central <= separate + tol(separate), || {
            format!("instance {k}: m {m} {pen:?} central {central} separate {separate}")
        });
    }
    t.finish()
}

/// Pinball loss is convex in the prediction.
pub fn pinball_convexity(opts: &VerifyOptions) -> SuiteResult {
    let mut t = Tally::new("pinball_convexity");
    let mut rng = suite_rng(opts.seed, 11);
    for k in 0..opts.instances {
        let level = rng.random_range(0.0..=1.0);
        let y = rng.random_range(-3.0..3.0);
        let a = rng.random_range(-3.0..3.0);
        let b = rng.random_range(-3.0..3.0);
        let mid = pinball_loss(0.5 * (a + b), y, level);
        let avg = 0.5 * (pinball_loss(a, y, level) + pinball_loss(b, y, level));
        t.check(mid <= avg + 1e-9, || format!("instance {k}: level {level} y {y} a {a} b {b}"));
    }
    t.finish()
}

fn random_records(rng: &mut ChaCha8Rng, m: usize, count: usize, ctx: usize) -> Vec<ForecastRecord> {
    let h = Hierarchy::two_level(m).expect("m >= 1");
    (0..count)
        .map(|t| {
            let y: Vec<f64> = (0..m).map(|_| random_generation(rng)).collect();
            let mut base = vec![y.iter().sum::<f64>() + rng.random_range(-0.5..0.5)];
            base.extend(y.iter().map(|v| (v + rng.random_range(-0.8..0.8f64)).clamp(0.01, 2.99)));
            let pen = Penalties::new(rng.random_range(1.0..20.0), rng.random_range(1.0..20.0)).expect("positive");
            ForecastRecord {
                t: t as i64,
                base: SeriesVector(base),
                context: (0..ctx).map(|_| rng.random_range(-1.0..1.0)).collect(),
                actual: h.aggregate(&y).expect("matching width"),
                hour: MarketHour::from_penalties(t as i64, 25.0, pen).expect("valid hour"),
            }
        })
        .collect()
}

/// Every reconciliation kind returns coherent vectors inside the capacity box.
pub fn reconcile_coherence(opts: &VerifyOptions) -> SuiteResult {
    let mut t = Tally::new("reconcile_coherence");
    let mut rng = suite_rng(opts.seed, 12);
    for k in 0..opts.instances.min(500) {
        let m = rng.random_range(1..=4);
        let h = Hierarchy::two_level(m).expect("m >= 1");
        let records = random_records(&mut rng, m, 8, 2);
        let caps = vec![3.0; m];
        let kind = ReconKind::ALL[k % ReconKind::ALL.len()];
        let cfg = TrainConfig {
            hidden_width: rng.random_range(1..=8),
            seed: k as u64,
            ..TrainConfig::default()
        };
        let model = match kind {
            ReconKind::BottomUp => Ok(ReconModel::bottom_up(h.clone())),
            _ => initial_model(kind, &h, &records, &caps, &cfg),
        };
        let mut model = match model {
            Ok(m) => m,
            Err(e) => {
                t.fail_with(format!("instance {k}: {kind} init failed: {e}"));
                continue;
            }
        };
        if let Some(net) = model.network_mut() {
            let theta: Vec<f64> = net.params.flat().iter().map(|_| rng.random_range(-3.0..3.0)).collect();
            net.params.set_flat(&theta).expect("same length");
        }
        for r in &records {
            match model.reconcile(&r.base, &r.context) {
                Ok(v) => {
                    let boxed = v.leaves(m).iter().all(|&x| (0.0..=3.0).contains(&x));
                    t.check(h.is_coherent(&v, 1e-6) && boxed, || {
                        format!("instance {k}: {kind} base {:?} -> {:?}", r.base.0, v.0)
                    });
                }
                Err(e) => t.fail_with(format!("instance {k}: {kind} failed: {e}")),
            }
        }
    }
    t.finish()
}

/// With generation shares the batch Lagrangian is convex in the reconciled
/// leaves wherever the barrier floor is inactive.
pub fn lagrangian_convexity(opts: &VerifyOptions, alloc: AllocateFn) -> SuiteResult {
    let mut t = Tally::new("lagrangian_convexity");
    let mut rng = suite_rng(opts.seed, 13);
    let eps = 1e-6;
    for k in 0..opts.instances.min(2000) {
        let m = rng.random_range(1..=4);
        let h = Hierarchy::two_level(m).expect("m >= 1");
        let batch = 5;
        let pen = random_penalties(&mut rng);
        let actual: Vec<SeriesVector> = (0..batch)
            .map(|_| {
                let y: Vec<f64> = (0..m).map(|_| random_generation(&mut rng)).collect();
                h.aggregate(&y).expect("matching width")
            })
            .collect();
        let indep: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..m).map(|_| rng.random_range(10.0..60.0)).collect())
            .collect();
        let policy = AllocationPolicy::new(rng.random_range(0.0..=1.0), GammaMode::Ge).expect("w in range");
        let mu: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..3.0)).collect();
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..batch)
                .map(|_| (0..m).map(|_| rng.random_range(0.0..3.0)).collect())
                .collect()
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let mid: Vec<Vec<f64>> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| 0.5 * (p + q)).collect())
            .collect();
        let excess = |hs: &[Vec<f64>]| -> Result<Vec<f64>> {
            let mut e = vec![0.0; m];
            for (j, leaves) in hs.iter().enumerate() {
                let bd = alloc(&policy, &h.aggregate(leaves)?, &actual[j], &pen)?;
                for i in 0..m {
                    e[i] += (indep[j][i] - bd.allocated[i]) / batch as f64;
                }
            }
            Ok(e)
        };
        let value = |e: &[f64]| -> f64 {
            e.iter()
                .zip(&mu)
                .map(|(&ei, &u)| -ei.max(eps).ln() + u * positive_part(-ei))
                .sum()
        };
        let (ea, eb, em) = match (excess(&a), excess(&b), excess(&mid)) {
            (Ok(x), Ok(y), Ok(z)) => (x, y, z),
            _ => {
                t.fail_with(format!("instance {k}: allocation error"));
                continue;
            }
        };
        if ea.iter().chain(&eb).any(|&e| e <= eps) {
            continue;
        }
        let lm = value(&em);
        let avg = 0.5 * (value(&ea) + value(&eb));
        t.check(lm <= avg + tol(avg), || {
            format!("instance {k}: {pen:?} w {} midpoint {lm} > average {avg}", policy.w())
        });
    }
    t.finish()
}

/// Analytic network and Lagrangian gradients against central differences.
pub fn gradient_check(opts: &VerifyOptions) -> SuiteResult {
    let mut t = Tally::new("gradient_check");
    let mut rng = suite_rng(opts.seed, 14);
    for k in 0..opts.gradient_instances {
        let m = rng.random_range(1..=3);
        let width = rng.random_range(2..=8);
        let h = Hierarchy::two_level(m).expect("m >= 1");
        let records = random_records(&mut rng, m, 6, 2);
        let kind = if k % 4 == 3 { ReconKind::ValueLinear } else { ReconKind::ValueLearned };
        let cfg = TrainConfig {
            hidden_width: width,
            seed: opts.seed.wrapping_add(k as u64),
            ..TrainConfig::default()
        };
        let mut model = match initial_model(kind, &h, &records, &vec![3.0; m], &cfg) {
            Ok(model) => model,
            Err(e) => {
                t.fail_with(format!("instance {k}: init failed: {e}"));
                continue;
            }
        };
        // Move off the bottom-up map, where a single producer's excess sits on
        // the hinge kink.
        if let Some(net) = model.network_mut() {
            let theta: Vec<f64> = net.params.flat().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
            net.params.set_flat(&theta).expect("same length");
        }
        let mode = if k % 2 == 0 { GammaMode::Ge } else { GammaMode::Pc };
        let policy = AllocationPolicy::new(rng.random_range(0.0..=1.0), mode).expect("w in range");
        let mut dual = DualState::zeros(m);
        dual.mu.iter_mut().for_each(|u| *u = rng.random_range(0.0..3.0));
        match gradient_error(&records, &model, &dual, &policy, 1e-6, 1e-6) {
            Ok(err) => {
                t.error(err);
                t.check(err <= 1e-3, || {
                    format!("instance {k}: {kind} m {m} width {width} {mode:?} relative error {err}")
                });
            }
            Err(e) => t.fail_with(format!("instance {k}: {e}")),
        }

        // Network backward pass alone, on a smooth quadratic loss.
        let dims = [rng.random_range(1..=4), width, m];
        let mut net_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1000 + k as u64));
        let caps: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..3.0)).collect();
        let params = match MlpParams::init(&dims, Activation::Tanh, OutputBound::ScaledSigmoid(caps), &mut net_rng) {
            Ok(p) => p,
            Err(e) => {
                t.fail_with(format!("instance {k}: network init failed: {e}"));
                continue;
            }
        };
        let input: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0)).collect();
        let loss = |out: &[f64]| {
            let g: Vec<f64> = out.iter().zip(&target).map(|(o, y)| o - y).collect();
            (0.5 * g.iter().map(|v| v * v).sum::<f64>(), g)
        };
        match finite_diff_check(&params, &input, &loss, 1e-6) {
            Ok(err) => {
                t.error(err);
                t.check(err <= 1e-4, || format!("instance {k}: network dims {dims:?} relative error {err}"));
            }
            Err(e) => t.fail_with(format!("instance {k}: {e}")),
        }
    }
    t.finish()
}

/// Runs every suite with the given allocation rule.
pub fn run_all(opts: &VerifyOptions, alloc: AllocateFn) -> Vec<SuiteResult> {
    vec![
        settlement_identity(opts),
        imbalance_cost_structure(opts),
        hierarchy_algebra(opts),
        subadditivity(opts),
        cost_share_individual_rationality(opts, alloc),
        generation_share_individual_rationality(opts, alloc),
        allocation_bounds(opts, alloc),
        allocation_boundaries(opts, alloc),
        extra_profit_accounting(opts, alloc),
        centralized_newsvendor(opts),
        pinball_convexity(opts),
        reconcile_coherence(opts),
        lagrangian_convexity(opts, alloc),
        gradient_check(opts),
    ]
}

pub fn summary_line(r: &SuiteResult) -> String {
    let mut s = format!(
        "{} {} instances={} failures={}",
        if r.passed() { "PASS" } else { "FAIL" },
        r.name,
        r.instances,
        r.failures
    );
    if let Some(e) = r.max_error {
        let _ = write!(s, " max_error={e:.3e}");
    }
    s
}

/// Writes the per-suite summary CSV and one counterexample file per failing suite.
pub fn write_report(results: &[SuiteResult], dir: &Path, provenance: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(File::create(dir.join("verify.csv"))?);
    writeln!(f, "{provenance}")?;
    writeln!(f, "suite,instances,failures,max_error,status")?;
    for r in results {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.name,
            r.instances,
            r.failures,
            r.max_error.map(|e| e.to_string()).unwrap_or_default(),
            if r.passed() { "pass" } else { "fail" }
        )?;
    }
    f.flush()?;
    for r in results {
        if let Some(c) = &r.counterexample {
            let mut f = File::create(dir.join(format!("counterexample_{}.txt", r.name)))?;
            writeln!(f, "{provenance}")?;
            writeln!(f, "{c}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyOptions {
        VerifyOptions {
            seed: 7,
            instances: 2000,
            gradient_instances: 8,
        }
    }

    #[test]
    fn all_suites_pass_with_the_real_rule() {
        for r in run_all(&quick(), allocate) {
            assert!(r.passed(), "{}: {:?}", r.name, r.counterexample);
            assert!(r.instances > 0, "{} ran no instances", r.name);
        }
    }

    #[test]
    fn broken_weight_clamp_is_caught() {
        let r = cost_share_individual_rationality(&quick(), faulty_allocate);
        assert!(!r.passed());
        let c = r.counterexample.unwrap();
        assert!(c.starts_with("instance "), "{c}");
    }

    #[test]
    fn suites_are_reproducible() {
        let a = run_all(&quick(), allocate);
        let b = run_all(&quick(), allocate);
        assert_eq!(a, b);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let results = vec![
            settlement_identity(&quick()),
            cost_share_individual_rationality(&quick(), faulty_allocate),
        ];
        write_report(&results, dir.path(), "# config_hash=x seed=7").unwrap();
        let csv = std::fs::read_to_string(dir.path().join("verify.csv")).unwrap();
        assert!(csv.contains("settlement_identity,2000,0,"));
        assert!(dir
            .path()
            .join("counterexample_cost_share_individual_rationality.txt")
            .exists());
        assert!(summary_line(&results[1]).starts_with("FAIL"));
    }
}
