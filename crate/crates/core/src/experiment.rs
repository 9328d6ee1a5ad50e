//! End-to-end experiment protocols on top of a [`RunConfig`].

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baseforecast::{fit_mean, fit_quantile, FittedForecaster, Objective, RegressionSpec};
use crate::config::{DataSource, ForecastCase, RunConfig};
use crate::dataio::{
    build_records, ingest_csv, issue_range, synthesize, train_len, ContextSpec, ExperimentDataset,
    IngestOptions, RawDataset,
};
use crate::error::{check_dim, Error, Result};
use crate::evaluate::{provenance_line, run_sweep, write_sweep_reports, CellStatus, Strategy, SweepReport};
use crate::market::nominal_level;
use crate::market::Penalties;

/// Synthesizes or ingests the configured hourly data.
pub fn load_raw(cfg: &RunConfig) -> Result<RawDataset> {
    let mut raw = match cfg.data.source {
        DataSource::Synthetic => synthesize(&cfg.synthetic.spec(cfg.seed))?,
        DataSource::Csv => {
            let (Some(g), Some(p)) = (&cfg.data.generation_csv, &cfg.data.price_csv) else {
                return Err(Error::Config("csv source needs both file paths".into()));
            };
            ingest_csv(
                g,
                p,
                &IngestOptions {
                    max_gap_hours: cfg.data.max_gap_hours,
                },
            )?
        }
    };
    if let Some(caps) = &cfg.data.capacities {
        check_dim(raw.m(), caps.len(), "configured capacities")?;
        raw.capacities = caps.clone();
    }
    Ok(raw)
}

/// Quantile level `mean psi+ / (mean psi+ + mean psi-)` over the given hours.
pub fn average_nominal_level(raw: &RawDataset, hours: std::ops::Range<usize>) -> Result<f64> {
    let (mut plus, mut minus) = (0.0, 0.0);
    for h in &raw.prices[hours] {
        let p = h.penalties();
        plus += p.psi_plus();
        minus += p.psi_minus();
    }
    nominal_level(&Penalties::new(plus, minus)?)
}

/// Base forecasters fitted on the training prefix, and the record set.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub forecasters: Vec<FittedForecaster>,
    pub dataset: ExperimentDataset,
    /// Quantile level of the base forecasts, if any.
    pub level: Option<f64>,
}

pub fn prepare_data(
    cfg: &RunConfig,
    raw: &RawDataset,
    case: ForecastCase,
    context: &ContextSpec,
) -> Result<PreparedData> {
    let lags = &cfg.forecast.lags;
    let lead = cfg.forecast.lead;
    let max_lag = lags.iter().copied().max().unwrap_or(1);
    let range = issue_range(raw.len(), max_lag, context, lead);
    let n_train = train_len(range.len())?;
    // Hours up to the last training target.
    let prefix = range.start + n_train + lead;
    let level = match case {
        ForecastCase::Mean => None,
        ForecastCase::Quantile => Some(match cfg.forecast.level {
            Some(l) => l,
            None => average_nominal_level(raw, range.start + lead..prefix)?,
        }),
    };
    let n = raw.m() + 1;
    let forecasters = (0..n)
        .map(|j| {
            let spec = RegressionSpec {
                target: j,
                lags: lags.clone(),
                lead,
                objective: match level {
                    None => Objective::SquaredError,
                    Some(level) => Objective::Pinball { level },
                },
                learning: cfg.learning(),
                capacity: raw.series_capacity(j),
            };
            let series = &raw.series(j)[..prefix];
            match level {
                None => fit_mean(series, &spec),
                Some(l) => fit_quantile(series, &spec, l),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = build_records(raw, &forecasters, context, lead)?;
    debug_assert_eq!(dataset.train_end, n_train);
    Ok(PreparedData {
        forecasters,
        dataset,
        level,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    /// Mean base forecasts, every strategy, full weight sweep.
    Case1,
    /// Quantile base forecasts at the nominal level, core strategies, full sweep.
    Case2,
    /// Mean base forecasts with penalty-lag context at one weight, repeated
    /// over training seeds.
    CaseStudy,
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Case::Case1 => "case1",
            Case::Case2 => "case2",
            Case::CaseStudy => "casestudy",
        })
    }
}

impl FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "case1" => Ok(Case::Case1),
            "case2" => Ok(Case::Case2),
            "casestudy" => Ok(Case::CaseStudy),
            _ => Err(Error::Config(format!("unknown case {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub strategy: Strategy,
    pub producer: usize,
    pub ap_mean: f64,
    pub ap_std: f64,
}

#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub files: Vec<PathBuf>,
    pub completed: usize,
    pub total: usize,
    pub sweeps: Vec<SweepReport>,
    pub table: Vec<TableRow>,
}

fn write_resolved_config(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let path = dir.join("config.toml");
    let mut f = File::create(&path)?;
    writeln!(f, "{}", provenance_line(&cfg.hash()?, cfg.seed))?;
    f.write_all(cfg.to_toml()?.as_bytes())?;
    Ok(path)
}

/// Runs a configured sweep on prepared data and writes its reports.
pub fn sweep_to_dir(
    cfg: &RunConfig,
    data: &PreparedData,
    strategies: &[Strategy],
    w_grid: &[f64],
    dir: &Path,
) -> Result<SweepReport> {
    let report = run_sweep(
        &data.dataset,
        strategies,
        w_grid,
        &cfg.sweep_config(),
        cfg.seed,
        &cfg.hash()?,
    )?;
    write_sweep_reports(&report, dir)?;
    Ok(report)
}

fn sweep_files(dir: &Path, report: &SweepReport) -> Vec<PathBuf> {
    let mut files = vec![dir.join("sweep.csv"), dir.join("rmse.csv"), dir.join("plots.gp")];
    let mut seen = Vec::new();
    for c in &report.cells {
        if !seen.contains(&c.strategy) {
            seen.push(c.strategy);
            files.push(dir.join(format!("plot_{}.dat", c.strategy)));
        }
    }
    files
}

pub fn run_case(cfg: &RunConfig, case: Case, dir: &Path) -> Result<CaseOutcome> {
    std::fs::create_dir_all(dir)?;
    let raw = load_raw(cfg)?;
    let mut files = vec![write_resolved_config(cfg, dir)?];
    match case {
        Case::Case1 | Case::Case2 => {
            let (forecast, strategies): (ForecastCase, &[Strategy]) = match case {
                Case::Case1 => (ForecastCase::Mean, &Strategy::ALL),
                _ => (ForecastCase::Quantile, &Strategy::CORE),
            };
            let data = prepare_data(cfg, &raw, forecast, &cfg.context.spec(false))?;
            if let Some(level) = data.level {
                log::info!("base forecasts at quantile level {level}");
            }
            let report = sweep_to_dir(cfg, &data, strategies, &cfg.sweep.w_grid, dir)?;
            files.extend(sweep_files(dir, &report));
            Ok(CaseOutcome {
                files,
                completed: report.completed(),
                total: report.cells.len(),
                sweeps: vec![report],
                table: Vec::new(),
            })
        }
        Case::CaseStudy => {
            let data = prepare_data(cfg, &raw, ForecastCase::Mean, &cfg.context.spec(true))?;
            let w = [cfg.casestudy.w];
            let mut sweeps = Vec::new();
            for r in 0..cfg.casestudy.repetitions {
                let mut rep = cfg.clone();
                rep.seed = cfg.seed.wrapping_add(r as u64);
                let report = run_sweep(
                    &data.dataset,
                    &Strategy::CORE,
                    &w,
                    &rep.sweep_config(),
                    rep.seed,
                    &cfg.hash()?,
                )?;
                sweeps.push(report);
            }
            let m = data.dataset.hierarchy.m();
            let mut table = Vec::new();
            let mut completed = 0;
            let mut total = 0;
            for s in Strategy::CORE {
                let cells: Vec<_> = sweeps.iter().filter_map(|r| r.cell(s, w[0])).collect();
                total += cells.len();
                let ok: Vec<_> = cells
                    .iter()
                    .filter(|c| !matches!(c.status, CellStatus::Failed(_)))
                    .collect();
                completed += ok.len();
                if ok.is_empty() {
                    continue;
                }
                for i in 0..m {
                    let values: Vec<f64> = ok.iter().map(|c| c.ap[i]).collect();
                    let (mean, std) = mean_std(&values);
                    table.push(TableRow {
                        strategy: s,
                        producer: i + 1,
                        ap_mean: mean,
                        ap_std: std,
                    });
                }
            }
            let path = dir.join("table2.csv");
            let mut f = std::io::BufWriter::new(File::create(&path)?);
            writeln!(f, "{}", provenance_line(&cfg.hash()?, cfg.seed))?;
            writeln!(f, "strategy,producer,AP_mean,AP_std")?;
            for row in &table {
                writeln!(f, "{},{},{},{}", row.strategy, row.producer, row.ap_mean, row.ap_std)?;
            }
            f.flush()?;
            files.push(path);
            Ok(CaseOutcome {
                files,
                completed,
                total,
                sweeps,
                table,
            })
        }
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Writes fitted base-forecast coefficients as CSV.
pub fn write_forecasters(
    forecasters: &[FittedForecaster],
    path: &Path,
    header: &str,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    writeln!(f, "{header}")?;
    let lags = forecasters.first().map(|f| f.spec.lags.clone()).unwrap_or_default();
    let cols: Vec<String> = lags.iter().map(|l| format!("lag_{l}")).collect();
    writeln!(f, "series,objective,intercept,{}", cols.join(","))?;
    for fc in forecasters {
        let objective = match fc.spec.objective {
            Objective::SquaredError => "mean".to_string(),
            Objective::Pinball { level } => format!("quantile_{level}"),
        };
        let w: Vec<String> = fc.weights.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{},{},{},{}", fc.spec.target, objective, fc.intercept, w.join(","))?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.synthetic.hours = 600;
        cfg.train.epochs = 3;
        cfg.quality.epochs = 3;
        cfg.sweep.w_grid = vec![0.5, 1.0];
        cfg.casestudy.repetitions = 2;
        cfg
    }

    #[test]
    fn base_forecasters_see_only_the_training_prefix() {
        let cfg = small_config();
        let raw = load_raw(&cfg).unwrap();
        let data = prepare_data(&cfg, &raw, ForecastCase::Mean, &cfg.context.spec(false)).unwrap();
        // Changing the test-period data must not move the fitted coefficients.
        let mut altered = raw.clone();
        let last_train = data.dataset.train().last().unwrap().t as usize;
        for s in altered.leaves.iter_mut() {
            for v in s[last_train + 1..].iter_mut() {
                *v = 0.0;
            }
        }
        for t in last_train + 1..altered.len() {
            altered.aggregate[t] = 0.0;
        }
        let again = prepare_data(&cfg, &altered, ForecastCase::Mean, &cfg.context.spec(false)).unwrap();
        assert_eq!(data.forecasters, again.forecasters);
        assert_eq!(data.dataset.train(), again.dataset.train());
    }

    #[test]
    fn quantile_case_uses_nominal_level() {
        let cfg = small_config();
        let raw = load_raw(&cfg).unwrap();
        let data = prepare_data(&cfg, &raw, ForecastCase::Quantile, &cfg.context.spec(false)).unwrap();
        assert_eq!(data.level, Some(0.75));
    }

    #[test]
    fn case_names() {
        for c in [Case::Case1, Case::Case2, Case::CaseStudy] {
            assert_eq!(c.to_string().parse::<Case>().unwrap(), c);
        }
        assert!("case3".parse::<Case>().is_err());
    }

    #[test]
    fn casestudy_table_shape() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let out = run_case(&cfg, Case::CaseStudy, dir.path()).unwrap();
        assert_eq!(out.table.len(), 4 * 4);
        let text = std::fs::read_to_string(dir.path().join("table2.csv")).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# config_hash="));
        assert_eq!(lines.next().unwrap(), "strategy,producer,AP_mean,AP_std");
        // Deterministic strategies have no spread across seeds.
        let indep = out.table.iter().find(|r| r.strategy == Strategy::Independent).unwrap();
        assert_eq!(indep.ap_std, 0.0);
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }
}
