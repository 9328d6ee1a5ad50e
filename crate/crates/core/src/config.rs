//! Run configuration: a TOML document with one level of sections. Every key
//! has a default; the resolved document is hashed into all outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocation::GammaMode;
use crate::baseforecast::Learning;
use crate::dataio::{uniform_correlation, ContextSpec, PriceRegime, SyntheticSpec, DEFAULT_CAPACITIES};
use crate::error::{Error, Result};
use crate::evaluate::{Strategy, SweepConfig};
use crate::neural::Activation;
use crate::reconcile::{DualRule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generation_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub price_csv: Option<PathBuf>,
    pub max_gap_hours: usize,
    /// Leaf capacities; the ingested maxima are used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capacities: Option<Vec<f64>>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            generation_csv: None,
            price_csv: None,
            max_gap_hours: 3,
            capacities: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceKind {
    Fixed,
    RegimeSwitching,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub m: usize,
    /// Defaults to the first `m` of the reference capacities, cycled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capacities: Option<Vec<f64>>,
    pub ar: f64,
    /// Common off-diagonal innovation correlation.
    pub rho: f64,
    /// Full correlation matrix, overriding `rho`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<Vec<Vec<f64>>>,
    pub mean_level: f64,
    pub spread: f64,
    pub hours: usize,
    pub start: i64,
    pub price: PriceKind,
    pub pi_f: f64,
    pub psi_plus: f64,
    pub psi_minus: f64,
    pub spot_sd: f64,
    pub persistence: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            m: s.m,
            capacities: None,
            ar: s.ar[0],
            rho: s.correlation[0][1],
            correlation: None,
            mean_level: s.mean_level,
            spread: s.spread,
            hours: s.hours,
            start: s.start,
            price: PriceKind::Fixed,
            pi_f: 25.0,
            psi_plus: 12.0,
            psi_minus: 4.0,
            spot_sd: 8.0,
            persistence: 0.8,
        }
    }
}

impl SyntheticSection {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        let m = self.m;
        let capacities = self.capacities.clone().unwrap_or_else(|| {
            (0..m).map(|i| DEFAULT_CAPACITIES[i % DEFAULT_CAPACITIES.len()]).collect()
        });
        let price = match self.price {
            PriceKind::Fixed => PriceRegime::Fixed {
                pi_f: self.pi_f,
                psi_plus: self.psi_plus,
                psi_minus: self.psi_minus,
            },
            PriceKind::RegimeSwitching => PriceRegime::RegimeSwitching {
                spot_mean: self.pi_f,
                spot_sd: self.spot_sd,
                persistence: self.persistence,
                mean_psi_plus: self.psi_plus,
                mean_psi_minus: self.psi_minus,
            },
        };
        SyntheticSpec {
            m,
            capacities,
            ar: vec![self.ar; m],
            correlation: self
                .correlation
                .clone()
                .unwrap_or_else(|| uniform_correlation(m, self.rho)),
            mean_level: self.mean_level,
            spread: self.spread,
            price,
            hours: self.hours,
            seed,
            start: self.start,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastCase {
    Mean,
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub case: ForecastCase,
    /// Quantile level; the nominal level of the training prices when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    pub lags: Vec<usize>,
    pub lead: usize,
    pub step: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        let l = Learning::default();
        Self {
            case: ForecastCase::Mean,
            level: None,
            lags: vec![1, 2, 3, 24],
            lead: 1,
            step: l.step,
            epochs: l.epochs,
            batch_size: l.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextSection {
    pub gen_lags: Vec<usize>,
    /// Penalty lag depth used by the case study.
    pub penalty_lag_depth: usize,
}

impl Default for ContextSection {
    fn default() -> Self {
        Self {
            gen_lags: vec![1, 2, 3],
            penalty_lag_depth: 24,
        }
    }
}

impl ContextSection {
    pub fn spec(&self, with_penalties: bool) -> ContextSpec {
        ContextSpec {
            gen_lags: self.gen_lags.clone(),
            penalty_lag_depth: with_penalties.then_some(self.penalty_lag_depth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub strategies: Vec<String>,
    pub w_grid: Vec<f64>,
    pub jobs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.iter().map(|s| s.to_string()).collect(),
            w_grid: (1..=10).map(|i| i as f64 / 10.0).collect(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambda: f64,
    pub nu: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub w: f64,
    pub gamma_mode: GammaMode,
    pub epsilon_log: f64,
    pub grad_clip: f64,
    pub hidden_width: usize,
    pub activation: Activation,
    pub dual_rule: DualRule,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda: t.lambda,
            nu: t.nu,
            epochs: t.epochs,
            batch_size: t.batch_size,
            w: t.w,
            gamma_mode: t.gamma_mode,
            epsilon_log: t.epsilon_log,
            grad_clip: t.grad_clip,
            hidden_width: t.hidden_width,
            activation: t.activation,
            dual_rule: t.dual_rule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualitySection {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for QualitySection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda: t.lambda,
            epochs: t.epochs,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaseStudySection {
    pub repetitions: usize,
    pub w: f64,
}

impl Default for CaseStudySection {
    fn default() -> Self {
        Self {
            repetitions: 10,
            w: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub instances: usize,
    pub gradient_instances: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            instances: 10_000,
            gradient_instances: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub synthetic: SyntheticSection,
    pub forecast: ForecastSection,
    pub context: ContextSection,
    pub sweep: SweepSection,
    pub train: TrainSection,
    pub quality: QualitySection,
    pub casestudy: CaseStudySection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: None,
            data: DataSection::default(),
            synthetic: SyntheticSection::default(),
            forecast: ForecastSection::default(),
            context: ContextSection::default(),
            sweep: SweepSection::default(),
            train: TrainSection::default(),
            quality: QualitySection::default(),
            casestudy: CaseStudySection::default(),
            verify: VerifySection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative CSV paths are taken relative to the config file.
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.data.generation_csv, &mut cfg.data.price_csv]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Fully resolved document.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of the resolved document, with the
    /// output location and thread count excluded.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        canonical.sweep.jobs = 1;
        let digest = Sha256::digest(canonical.to_toml()?.as_bytes());
        Ok(hex::encode(digest)[..16].to_string())
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>> {
        self.sweep.strategies.iter().map(|s| s.parse()).collect()
    }

    pub fn value_train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambda: t.lambda,
            nu: t.nu.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            w: t.w,
            gamma_mode: t.gamma_mode,
            epsilon_log: t.epsilon_log,
            grad_clip: t.grad_clip,
            seed: self.seed,
            hidden_width: t.hidden_width,
            activation: t.activation,
            dual_rule: t.dual_rule,
        }
    }

    pub fn quality_train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.quality.lambda,
            epochs: self.quality.epochs,
            batch_size: self.quality.batch_size,
            ..self.value_train_config()
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            value: self.value_train_config(),
            quality: self.quality_train_config(),
            jobs: self.sweep.jobs,
        }
    }

    pub fn learning(&self) -> Learning {
        Learning {
            step: self.forecast.step,
            epochs: self.forecast.epochs,
            batch_size: self.forecast.batch_size,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.value_train_config().validate()?;
        self.quality_train_config().validate()?;
        self.strategies()?;
        if self.sweep.w_grid.is_empty() || self.sweep.w_grid.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Config("w_grid must be nonempty with values in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.casestudy.w) || self.casestudy.repetitions == 0 {
            return Err(Error::Config("invalid casestudy section".into()));
        }
        if self.forecast.lags.is_empty() || self.forecast.lags.contains(&0) || self.forecast.lead == 0 {
            return Err(Error::Config("forecast lags and lead must be >= 1".into()));
        }
        if let Some(l) = self.forecast.level {
            if !(l > 0.0 && l < 1.0) {
                return Err(Error::Config(format!("quantile level {l} outside (0, 1)")));
            }
        }
        if self.context.gen_lags.contains(&0) {
            return Err(Error::Config("context lags must be >= 1".into()));
        }
        match self.data.source {
            DataSource::Synthetic => self.synthetic.spec(self.seed).validate()?,
            DataSource::Csv => {
                if self.data.generation_csv.is_none() || self.data.price_csv.is_none() {
                    return Err(Error::Config(
                        "csv source needs generation_csv and price_csv".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_resolves_to_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let spec = cfg.synthetic.spec(cfg.seed);
        assert_eq!(spec.m, 4);
        assert_eq!(
            spec.price,
            PriceRegime::Fixed {
                pi_f: 25.0,
                psi_plus: 12.0,
                psi_minus: 4.0
            }
        );
        assert_eq!(cfg.train.lambda, 1e-3);
        assert_eq!(cfg.sweep.w_grid.len(), 10);
    }

    #[test]
    fn resolved_document_round_trips() {
        let text = "seed = 7\n[train]\nlambda = 0.02\nnu = [0.1]\n[sweep]\nw_grid = [0.5]\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash().unwrap(), again.hash().unwrap());
        assert_ne!(cfg.hash().unwrap(), RunConfig::default().hash().unwrap());
        let mut moved = cfg.clone();
        moved.output_dir = Some("elsewhere".into());
        moved.sweep.jobs = 4;
        assert_eq!(moved.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn rejects_unknown_and_invalid_keys() {
        assert!(RunConfig::from_toml("[train]\nlamda = 1.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlambda = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[sweep]\nw_grid = [1.5]\n").is_err());
        assert!(RunConfig::from_toml("[sweep]\nstrategies = [\"magic\"]\n").is_err());
        assert!(RunConfig::from_toml("[data]\nsource = \"csv\"\n").is_err());
        assert!(RunConfig::from_toml("[synthetic]\nrho = -0.9\n").is_err());
    }
}
