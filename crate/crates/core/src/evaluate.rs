//! Out-of-sample metrics and the allocation-weight sweep.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{allocate, check_unit_cost_condition, AllocationPolicy, UnitCostCondition};
use crate::dataio::ExperimentDataset;
use crate::error::{Error, Result};
use crate::hierarchy::ForecastRecord;
use crate::market::profit_decomposed;
use crate::reconcile::{train_quality, train_value, ReconKind, ReconModel, TrainConfig, TrainStatus};

/// An offering strategy: independent offers or one of the reconciliation maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Independent,
    Reconciled(ReconKind),
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Independent,
        Strategy::Reconciled(ReconKind::BottomUp),
        Strategy::Reconciled(ReconKind::QualityLearned),
        Strategy::Reconciled(ReconKind::QualityLinear),
        Strategy::Reconciled(ReconKind::ValueLearned),
        Strategy::Reconciled(ReconKind::ValueLinear),
    ];

    /// Independent, bottom-up, quality-oriented and value-oriented.
    pub const CORE: [Strategy; 4] = [
        Strategy::Independent,
        Strategy::Reconciled(ReconKind::BottomUp),
        Strategy::Reconciled(ReconKind::QualityLearned),
        Strategy::Reconciled(ReconKind::ValueLearned),
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Independent => "independent",
            Strategy::Reconciled(k) => k.as_str(),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "independent" {
            Ok(Strategy::Independent)
        } else {
            Ok(Strategy::Reconciled(s.parse()?))
        }
    }
}

fn require_records(records: &[ForecastRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    Ok(())
}

/// Mean settlement profit `pi_f y_i - c(base_i, y_i)` per producer when each
/// offers its base forecast.
pub fn average_profit_independent(records: &[ForecastRecord], m: usize) -> Result<Vec<f64>> {
    require_records(records)?;
    let mut ap = vec![0.0; m];
    for r in records {
        for ((a, &o), &y) in ap.iter_mut().zip(r.base.leaves(m)).zip(r.actual.leaves(m)) {
            *a += profit_decomposed(o, y, &r.hour);
        }
    }
    let n = records.len() as f64;
    Ok(ap.into_iter().map(|a| a / n).collect())
}

/// Mean of `pi_f y_i - c_i^AG` per producer under the allocation rule.
pub fn average_profit_aggregated(
    records: &[ForecastRecord],
    model: &ReconModel,
    policy: &AllocationPolicy,
) -> Result<Vec<f64>> {
    require_records(records)?;
    let m = model.hierarchy().m();
    let mut ap = vec![0.0; m];
    for r in records {
        let rec = model.reconcile(&r.base, &r.context)?;
        let b = allocate(policy, &rec, &r.actual, &r.hour.penalties())?;
        for ((a, &y), &c) in ap.iter_mut().zip(r.actual.leaves(m)).zip(&b.allocated) {
            *a += r.hour.pi_f() * y - c;
        }
    }
    let n = records.len() as f64;
    Ok(ap.into_iter().map(|a| a / n).collect())
}

/// Root mean squared error over records and all series. `None` scores the
/// (incoherent) base forecasts.
pub fn hierarchical_rmse(records: &[ForecastRecord], model: Option<&ReconModel>) -> Result<f64> {
    require_records(records)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in records {
        let forecast = match model {
            Some(m) => m.reconcile(&r.base, &r.context)?,
            None => r.base.clone(),
        };
        for (f, y) in forecast.as_slice().iter().zip(r.actual.as_slice()) {
            sum += (f - y).powi(2);
            count += 1;
        }
    }
    Ok((sum / count as f64).sqrt())
}

/// Share of hours, among those where it applies, satisfying the unit-cost
/// condition. `None` when it applies nowhere.
pub fn unit_cost_rate(records: &[ForecastRecord], model: &ReconModel) -> Result<Option<f64>> {
    let mut holds = 0usize;
    let mut applicable = 0usize;
    for r in records {
        let rec = model.reconcile(&r.base, &r.context)?;
        match check_unit_cost_condition(&rec, &r.actual, &r.hour.penalties()) {
            UnitCostCondition::Holds => {
                holds += 1;
                applicable += 1;
            }
            UnitCostCondition::Violated => applicable += 1,
            UnitCostCondition::Inapplicable => {}
        }
    }
    Ok((applicable > 0).then(|| holds as f64 / applicable as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellStatus {
    Ok,
    ConstraintFailure,
    Failed(String),
}

impl fmt::Display for CellStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellStatus::Ok => f.write_str("ok"),
            CellStatus::ConstraintFailure => f.write_str("constraint_failure"),
            CellStatus::Failed(msg) => write!(f, "failed: {}", msg.replace([',', '\n'], ";")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: Strategy,
    pub w: f64,
    /// Average profit per producer (currency/hour).
    pub ap: Vec<f64>,
    /// Change against independent offering, absolute.
    pub ap_change: Vec<f64>,
    /// Percentage change; `None` where the independent AP is near zero.
    pub ap_change_pct: Vec<Option<f64>>,
    pub rmse: f64,
    pub unit_cost_rate: Option<f64>,
    pub status: CellStatus,
}

impl StrategyResult {
    fn failed(strategy: Strategy, w: f64, message: String) -> Self {
        Self {
            strategy,
            w,
            ap: Vec::new(),
            ap_change: Vec::new(),
            ap_change_pct: Vec::new(),
            rmse: f64::NAN,
            unit_cost_rate: None,
            status: CellStatus::Failed(message),
        }
    }
}

pub fn ap_changes(ap: &[f64], independent: &[f64]) -> (Vec<f64>, Vec<Option<f64>>) {
    let abs: Vec<f64> = ap.iter().zip(independent).map(|(a, b)| a - b).collect();
    let pct = abs
        .iter()
        .zip(independent)
        .map(|(d, b)| (b.abs() >= 1e-9).then(|| 100.0 * d / b.abs()))
        .collect();
    (abs, pct)
}

/// Evaluates a trained model (or independent offers) on `records` at `policy`.
pub fn evaluate_strategy(
    records: &[ForecastRecord],
    strategy: Strategy,
    model: Option<&ReconModel>,
    policy: &AllocationPolicy,
    independent_ap: &[f64],
    status: CellStatus,
) -> Result<StrategyResult> {
    let (ap, rmse, rate) = match (strategy, model) {
        (Strategy::Independent, _) => {
            let m = independent_ap.len();
            let ap = average_profit_independent(records, m)?;
            (ap, hierarchical_rmse(records, None)?, None)
        }
        (Strategy::Reconciled(_), Some(model)) => (
            average_profit_aggregated(records, model, policy)?,
            hierarchical_rmse(records, Some(model))?,
            unit_cost_rate(records, model)?,
        ),
        (Strategy::Reconciled(k), None) => {
            return Err(Error::Config(format!("no model supplied for {k}")));
        }
    };
    let (ap_change, ap_change_pct) = ap_changes(&ap, independent_ap);
    Ok(StrategyResult {
        strategy,
        w: policy.w(),
        ap,
        ap_change,
        ap_change_pct,
        rmse,
        unit_cost_rate: rate,
        status,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub value: TrainConfig,
    pub quality: TrainConfig,
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<StrategyResult>,
    pub seed: u64,
    pub config_hash: String,
}

impl SweepReport {
    pub fn cell(&self, strategy: Strategy, w: f64) -> Option<&StrategyResult> {
        self.cells
            .iter()
            .find(|c| c.strategy == strategy && c.w == w)
    }

    pub fn completed(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| !matches!(c.status, CellStatus::Failed(_)))
            .count()
    }
}

enum Trained {
    Model(ReconModel, CellStatus),
    Failed(String),
}

fn train_cell(
    kind: ReconKind,
    dataset: &ExperimentDataset,
    config: &SweepConfig,
    w: f64,
) -> Trained {
    let train = dataset.train();
    let result = if kind == ReconKind::BottomUp {
        Ok((ReconModel::bottom_up(dataset.hierarchy.clone()), CellStatus::Ok))
    } else if kind.is_value() {
        let cfg = TrainConfig { w, ..config.value.clone() };
        train_value(kind, &dataset.hierarchy, train, &dataset.capacities, &cfg).map(|(m, _, rep)| {
            let status = match rep.status {
                TrainStatus::Ok => CellStatus::Ok,
                TrainStatus::ConstraintFailure { .. } => CellStatus::ConstraintFailure,
            };
            (m, status)
        })
    } else {
        train_quality(kind, &dataset.hierarchy, train, &dataset.capacities, &config.quality)
            .map(|(m, _)| (m, CellStatus::Ok))
    };
    match result {
        Ok((m, s)) => Trained::Model(m, s),
        Err(e) => Trained::Failed(e.to_string()),
    }
}

/// Trains and evaluates every strategy at every weight. Quality-oriented and
/// bottom-up maps do not depend on `w` and are trained once; value-oriented
/// maps are retrained for each weight. Cell failures are recorded, not raised.
pub fn run_sweep(
    dataset: &ExperimentDataset,
    strategies: &[Strategy],
    w_grid: &[f64],
    config: &SweepConfig,
    seed: u64,
    config_hash: &str,
) -> Result<SweepReport> {
    if strategies.is_empty() || w_grid.is_empty() {
        return Err(Error::Config("sweep needs strategies and weights".into()));
    }
    for &w in w_grid {
        AllocationPolicy::new(w, config.value.gamma_mode)?;
    }
    let test = dataset.test();
    let m = dataset.hierarchy.m();
    let independent_ap = average_profit_independent(test, m)?;

    // (strategy index, Some(w) for per-weight models)
    let mut jobs: Vec<(ReconKind, Option<f64>)> = Vec::new();
    for s in strategies {
        if let Strategy::Reconciled(k) = s {
            if k.is_value() {
                jobs.extend(w_grid.iter().map(|&w| (*k, Some(w))));
            } else {
                jobs.push((*k, None));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let trained: Vec<Trained> = pool.install(|| {
        jobs.par_iter()
            .map(|&(k, w)| train_cell(k, dataset, config, w.unwrap_or(config.value.w)))
            .collect()
    });

    let mut cells = Vec::new();
    for s in strategies {
        for &w in w_grid {
            let policy = AllocationPolicy::new(w, config.value.gamma_mode)?;
            let found = match s {
                Strategy::Independent => None,
                Strategy::Reconciled(k) => jobs
                    .iter()
                    .position(|&(jk, jw)| jk == *k && (jw.is_none() || jw == Some(w)))
                    .map(|i| &trained[i]),
            };
            let cell = match found {
                None => evaluate_strategy(test, *s, None, &policy, &independent_ap, CellStatus::Ok),
                Some(Trained::Model(model, status)) => {
                    evaluate_strategy(test, *s, Some(model), &policy, &independent_ap, status.clone())
                }
                Some(Trained::Failed(msg)) => Ok(StrategyResult::failed(*s, w, msg.clone())),
            };
            cells.push(cell.unwrap_or_else(|e| StrategyResult::failed(*s, w, e.to_string())));
        }
    }
    Ok(SweepReport {
        cells,
        seed,
        config_hash: config_hash.to_string(),
    })
}

pub fn provenance_line(config_hash: &str, seed: u64) -> String {
    format!("# config_hash={config_hash} seed={seed}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `sweep.csv`, `rmse.csv`, one `plot_<strategy>.dat` per strategy and
/// `plots.gp`.
pub fn write_sweep_reports(report: &SweepReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let header = provenance_line(&report.config_hash, report.seed);

    let mut sweep = std::io::BufWriter::new(File::create(dir.join("sweep.csv"))?);
    writeln!(sweep, "{header}")?;
    writeln!(
        sweep,
        "strategy,w,producer,ap,ap_change,ap_change_pct,unit_cost_rate,status"
    )?;
    for c in &report.cells {
        if c.ap.is_empty() {
            writeln!(sweep, "{},{},,,,,,{}", c.strategy, c.w, c.status)?;
        }
        for i in 0..c.ap.len() {
            writeln!(
                sweep,
                "{},{},{},{},{},{},{},{}",
                c.strategy,
                c.w,
                i + 1,
                c.ap[i],
                c.ap_change[i],
                fmt_opt(c.ap_change_pct[i]),
                fmt_opt(c.unit_cost_rate),
                c.status
            )?;
        }
    }
    sweep.flush()?;

    let mut rmse = std::io::BufWriter::new(File::create(dir.join("rmse.csv"))?);
    writeln!(rmse, "{header}")?;
    writeln!(rmse, "strategy,w,rmse")?;
    for c in &report.cells {
        writeln!(rmse, "{},{},{}", c.strategy, c.w, c.rmse)?;
    }
    rmse.flush()?;

    let mut strategies: Vec<Strategy> = Vec::new();
    for c in &report.cells {
        if !strategies.contains(&c.strategy) {
            strategies.push(c.strategy);
        }
    }
    let m = report.cells.iter().map(|c| c.ap.len()).max().unwrap_or(0);
    let mut script = std::io::BufWriter::new(File::create(dir.join("plots.gp"))?);
    writeln!(script, "{header}")?;
    writeln!(script, "set datafile separator whitespace")?;
    writeln!(script, "set xlabel 'w'")?;
    writeln!(script, "set ylabel 'AP change over independent'")?;
    writeln!(script, "set terminal pngcairo size 800,500")?;
    for s in &strategies {
        let name = format!("plot_{s}.dat");
        let mut dat = std::io::BufWriter::new(File::create(dir.join(&name))?);
        writeln!(dat, "{header}")?;
        let cols: Vec<String> = (1..=m).map(|i| format!("producer_{i}")).collect();
        writeln!(dat, "# w {}", cols.join(" "))?;
        for c in report.cells.iter().filter(|c| c.strategy == *s) {
            let vals: Vec<String> = (0..m)
                .map(|i| c.ap_change.get(i).map_or("NaN".into(), |v| v.to_string()))
                .collect();
            writeln!(dat, "{} {}", c.w, vals.join(" "))?;
        }
        dat.flush()?;
        writeln!(script, "set output 'plot_{s}.png'")?;
        writeln!(script, "set title '{s}'")?;
        let series: Vec<String> = (1..=m)
            .map(|i| format!("'{name}' using 1:{} with linespoints title 'producer {i}'", i + 1))
            .collect();
        writeln!(script, "plot {}", series.join(", "))?;
    }
    script.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::GammaMode;
    use crate::hierarchy::{Hierarchy, SeriesVector};
    use crate::market::{imbalance_cost, profit, MarketHour};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn records(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<ForecastRecord> {
        let h = Hierarchy::two_level(m).unwrap();
        (0..n)
            .map(|t| {
                let y: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..3.0)).collect();
                let leaves: Vec<f64> = y.iter().map(|v| (v + rng.random_range(-1.0..1.0f64)).max(0.0)).collect();
                let mut base = vec![leaves.iter().sum::<f64>() + rng.random_range(-0.5..0.5)];
                base.extend(&leaves);
                let pf = rng.random_range(10.0..40.0);
                ForecastRecord {
                    t: t as i64,
                    base: SeriesVector(base),
                    context: vec![],
                    actual: h.aggregate(&y).unwrap(),
                    hour: MarketHour::new(t as i64, pf, pf + rng.random_range(0.0..10.0), pf - rng.random_range(0.0..10.0)).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn perfect_forecasts_earn_spot_revenue() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rs = records(&mut rng, 3, 50);
        for r in &mut rs {
            r.base = r.actual.clone();
        }
        let ap = average_profit_independent(&rs, 3).unwrap();
        for i in 0..3 {
            let expected: f64 = rs.iter().map(|r| r.hour.pi_f() * r.actual.leaves(3)[i]).sum::<f64>() / 50.0;
            assert!((ap[i] - expected).abs() < 1e-9);
        }
        assert_eq!(hierarchical_rmse(&rs, None).unwrap(), 0.0);
        let single = &rs[..1];
        let ap1 = average_profit_independent(single, 3).unwrap();
        let r = &rs[0];
        for i in 0..3 {
            assert_eq!(ap1[i], profit(r.base.leaves(3)[i], r.actual.leaves(3)[i], &r.hour));
        }
    }

    #[test]
    fn constant_bias_rmse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rs = records(&mut rng, 2, 20);
        for r in &mut rs {
            r.base = SeriesVector(r.actual.0.iter().map(|v| v - 0.3).collect());
        }
        assert!((hierarchical_rmse(&rs, None).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_bottom_up_equals_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rs = records(&mut rng, 4, 200);
        let bu = ReconModel::bottom_up(Hierarchy::two_level(4).unwrap());
        let policy = AllocationPolicy::new(0.0, GammaMode::Ge).unwrap();
        let a = average_profit_aggregated(&rs, &bu, &policy).unwrap();
        let b = average_profit_independent(&rs, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn value_is_conserved_between_producers_and_manager() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rs = records(&mut rng, 3, 500);
        let bu = ReconModel::bottom_up(Hierarchy::two_level(3).unwrap());
        for r in &rs {
            let w = rng.random_range(0.0..=1.0);
            let mode = if rng.random_bool(0.5) { GammaMode::Ge } else { GammaMode::Pc };
            let policy = AllocationPolicy::new(w, mode).unwrap();
            let rec = bu.reconcile(&r.base, &r.context).unwrap();
            let p = r.hour.penalties();
            let b = allocate(&policy, &rec, &r.actual, &p).unwrap();
            let producers: f64 = r
                .actual
                .leaves(3)
                .iter()
                .zip(&b.allocated)
                .map(|(y, c)| r.hour.pi_f() * y - c)
                .sum();
            let lhs = producers + b.pm_payoff;
            let rhs = r.hour.pi_f() * r.actual.leaves(3).iter().sum::<f64>()
                - imbalance_cost(rec.total(), r.actual.total(), &p);
            assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn bottom_up_profit_is_affine_in_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rs = records(&mut rng, 4, 300);
        let bu = ReconModel::bottom_up(Hierarchy::two_level(4).unwrap());
        let ap = |w: f64| {
            average_profit_aggregated(&rs, &bu, &AllocationPolicy::new(w, GammaMode::Ge).unwrap()).unwrap()
        };
        let (a, b, c) = (ap(0.1), ap(0.5), ap(1.0));
        for i in 0..4 {
            let predicted = a[i] + (b[i] - a[i]) * (1.0 - 0.1) / (0.5 - 0.1);
            assert!((predicted - c[i]).abs() <= 1e-9 * (1.0 + c[i].abs()));
        }
    }

    #[test]
    fn percentage_change_guards_small_denominators() {
        let (abs, pct) = ap_changes(&[11.0, 1.0], &[10.0, 0.0]);
        assert_eq!(abs, vec![1.0, 1.0]);
        assert!((pct[0].unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(pct[1], None);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("nope".parse::<Strategy>().is_err());
    }
}
