//! Independent base forecasters: linear models on a series' own lagged values.
//!
//! Lag `l` at issue time `t` is the value observed at `t + 1 - l`, so lag 1 is
//! the latest observation. The target is the value at `t + lead`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    SquaredError,
    Pinball { level: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Learning {
    pub step: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Learning {
    fn default() -> Self {
        Self {
            step: 0.1,
            epochs: 60,
            batch_size: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    /// Series index in hierarchy order.
    pub target: usize,
    pub lags: Vec<usize>,
    pub lead: usize,
    pub objective: Objective,
    pub learning: Learning,
    /// Upper clamp for predictions.
    pub capacity: f64,
}

impl RegressionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lags.is_empty() || self.lags.contains(&0) {
            return Err(Error::Config(format!(
                "lags must be nonempty and >= 1, got {:?}",
                self.lags
            )));
        }
        if self.lead == 0 {
            return Err(Error::Config("lead time must be >= 1".into()));
        }
        if let Objective::Pinball { level } = self.objective {
            if !(level > 0.0 && level < 1.0) {
                return Err(Error::Config(format!("pinball level {level} outside (0, 1)")));
            }
        }
        if !(self.capacity.is_finite() && self.capacity >= 0.0) {
            return Err(Error::Config(format!("invalid capacity {}", self.capacity)));
        }
        validate_learning(&self.learning)
    }

    pub fn max_lag(&self) -> usize {
        self.lags.iter().copied().max().unwrap_or(0)
    }
}

fn validate_learning(l: &Learning) -> Result<()> {
    if !(l.step > 0.0 && l.step.is_finite()) || l.epochs == 0 || l.batch_size == 0 {
        return Err(Error::Config(format!("invalid learning settings {l:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedForecaster {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub spec: RegressionSpec,
}

impl FittedForecaster {
    pub fn raw_score(&self, features: &[f64]) -> Result<f64> {
        check_dim(self.weights.len(), features.len(), "forecaster features")?;
        Ok(self.intercept
            + self
                .weights
                .iter()
                .zip(features)
                .map(|(w, x)| w * x)
                .sum::<f64>())
    }

    /// Linear score clamped to `[0, capacity]`.
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        Ok(self.raw_score(features)?.clamp(0.0, self.spec.capacity))
    }

    /// Lagged features available at issue time `t`.
    pub fn features_at(&self, series: &[f64], t: usize) -> Option<Vec<f64>> {
        lag_features(series, &self.spec.lags, t)
    }
}

pub fn lag_features(series: &[f64], lags: &[usize], t: usize) -> Option<Vec<f64>> {
    lags.iter()
        .map(|&l| {
            if l == 0 || l > t + 1 || t >= series.len() {
                None
            } else {
                Some(series[t + 1 - l])
            }
        })
        .collect()
}

/// Design matrix and targets for every issue time with all lags and the
/// target available.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedDesign {
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

pub fn lagged_design(series: &[f64], lags: &[usize], lead: usize) -> LaggedDesign {
    let max_lag = lags.iter().copied().max().unwrap_or(1).max(1);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut t = max_lag - 1;
    while t + lead < series.len() {
        if let Some(row) = lag_features(series, lags, t) {
            rows.push(row);
            targets.push(series[t + lead]);
        }
        t += 1;
    }
    LaggedDesign { rows, targets }
}

fn check_series(series: &[f64], spec: &RegressionSpec) -> Result<()> {
    spec.validate()?;
    if series.len() <= spec.max_lag() + 10 {
        return Err(Error::Data(format!(
            "series of length {} too short for max lag {}",
            series.len(),
            spec.max_lag()
        )));
    }
    if series.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("series contains non-finite values".into()));
    }
    Ok(())
}

/// Column means and spreads; constant columns get unit spread.
fn column_stats(rows: &[Vec<f64>], p: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; p];
    for r in rows {
        for j in 0..p {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; p];
    for r in rows {
        for j in 0..p {
            var[j] += (r[j] - mean[j]).powi(2);
        }
    }
    let sd = var
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

fn scalar_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

/// Ordinary least squares with intercept. A rank-deficient design falls back
/// to ridge with damping `1e-6 * trace / dim`.
pub fn least_squares(rows: &[Vec<f64>], targets: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_dim(rows.len(), targets.len(), "design rows")?;
    if rows.is_empty() {
        return Err(Error::Data("empty design".into()));
    }
    let p = rows[0].len();
    let n = rows.len();
    let (x_mean, _) = column_stats(rows, p);
    let y_mean = targets.iter().sum::<f64>() / n as f64;
    if p == 0 {
        return Ok((Vec::new(), y_mean));
    }
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut centered = vec![0.0; p];
    for (r, &y) in rows.iter().zip(targets) {
        check_dim(p, r.len(), "design row")?;
        for j in 0..p {
            centered[j] = r[j] - x_mean[j];
        }
        let yc = y - y_mean;
        for j in 0..p {
            xty[j] += centered[j] * yc;
            for k in 0..=j {
                xtx[(j, k)] += centered[j] * centered[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            xtx[(k, j)] = xtx[(j, k)];
        }
    }
    let well_posed = xtx.clone().cholesky().filter(|c| {
        let diag = c.l_dirty().diagonal();
        let max = diag.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let min = diag.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        max > 0.0 && min * min > 1e-12 * max * max
    });
    let beta = match well_posed {
        Some(chol) => chol.solve(&xty),
        None => {
            let damping = (1e-6 * xtx.trace() / p as f64).max(1e-12);
            let mut ridge = xtx;
            for j in 0..p {
                ridge[(j, j)] += damping;
            }
            ridge
                .cholesky()
                .ok_or_else(|| Error::Data("ridge system not positive definite".into()))?
                .solve(&xty)
        }
    };
    let weights: Vec<f64> = beta.iter().copied().collect();
    let intercept = y_mean - weights.iter().zip(&x_mean).map(|(w, m)| w * m).sum::<f64>();
    Ok((weights, intercept))
}

/// Least-squares mean forecaster.
pub fn fit_mean(series: &[f64], spec: &RegressionSpec) -> Result<FittedForecaster> {
    check_series(series, spec)?;
    if spec.objective != Objective::SquaredError {
        return Err(Error::Config("fit_mean needs the squared-error objective".into()));
    }
    let design = lagged_design(series, &spec.lags, spec.lead);
    let (weights, intercept) = least_squares(&design.rows, &design.targets)?;
    Ok(FittedForecaster {
        weights,
        intercept,
        spec: spec.clone(),
    })
}

/// Full-batch gradient descent on the mean squared error. Returns the model and
/// the per-epoch training loss (the first entry is the loss at zero weights).
pub fn fit_mean_gd(series: &[f64], spec: &RegressionSpec) -> Result<(FittedForecaster, Vec<f64>)> {
    check_series(series, spec)?;
    let design = lagged_design(series, &spec.lags, spec.lead);
    let p = spec.lags.len();
    let (x_mean, x_sd) = column_stats(&design.rows, p);
    let (y_mean, y_sd) = scalar_stats(&design.targets);
    let xs: Vec<Vec<f64>> = design
        .rows
        .iter()
        .map(|r| (0..p).map(|j| (r[j] - x_mean[j]) / x_sd[j]).collect())
        .collect();
    let ys: Vec<f64> = design.targets.iter().map(|y| (y - y_mean) / y_sd).collect();
    let n = xs.len() as f64;
    let mut w = vec![0.0; p];
    let mut b = 0.0;
    let loss = |w: &[f64], b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(x, y)| {
                let pred = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                (pred - y).powi(2)
            })
            .sum::<f64>()
            / n
            * y_sd
            * y_sd
    };
    let mut trace = vec![loss(&w, b)];
    for _ in 0..spec.learning.epochs {
        let mut gw = vec![0.0; p];
        let mut gb = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let r = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() - y;
            gb += 2.0 * r / n;
            for j in 0..p {
                gw[j] += 2.0 * r * x[j] / n;
            }
        }
        b -= spec.learning.step * gb;
        for j in 0..p {
            w[j] -= spec.learning.step * gw[j];
        }
        let l = loss(&w, b);
        if !l.is_finite() {
            return Err(Error::Divergence {
                epoch: trace.len(),
                reason: "non-finite squared error".into(),
            });
        }
        trace.push(l);
    }
    let weights: Vec<f64> = (0..p).map(|j| w[j] * y_sd / x_sd[j]).collect();
    let intercept =
        y_mean + y_sd * b - weights.iter().zip(&x_mean).map(|(a, m)| a * m).sum::<f64>();
    Ok((
        FittedForecaster {
            weights,
            intercept,
            spec: spec.clone(),
        },
        trace,
    ))
}

/// `level * (y - q)` above the prediction, `(1 - level) * (q - y)` below.
pub fn pinball_loss(prediction: f64, actual: f64, level: f64) -> f64 {
    let r = actual - prediction;
    if r >= 0.0 {
        level * r
    } else {
        (level - 1.0) * r
    }
}

/// Linear quantile regression by minibatch subgradient descent on the pinball
/// loss, with iterate averaging over the second half of training. Features and
/// target are standardized internally; the pinball loss is equivariant under
/// that change of scale, so the returned coefficients are in original units.
pub fn quantile_regression(
    rows: &[Vec<f64>],
    targets: &[f64],
    level: f64,
    learning: &Learning,
) -> Result<(Vec<f64>, f64)> {
    check_dim(rows.len(), targets.len(), "design rows")?;
    if rows.is_empty() {
        return Err(Error::Data("empty design".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("pinball level {level} outside (0, 1)")));
    }
    validate_learning(learning)?;
    let p = rows[0].len();
    let (x_mean, x_sd) = column_stats(rows, p);
    let (y_mean, y_sd) = scalar_stats(targets);
    let xs: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| (0..p).map(|j| (r[j] - x_mean[j]) / x_sd[j]).collect())
        .collect();
    let ys: Vec<f64> = targets.iter().map(|y| (y - y_mean) / y_sd).collect();
    let full_loss = |w: &[f64], b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(x, &y)| {
                pinball_loss(b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>(), y, level)
            })
            .sum::<f64>()
            / xs.len() as f64
    };

    // Warm start: least squares with the intercept moved to the residual quantile.
    let (mut w, mut b) = least_squares(&xs, &ys)?;
    let mut residuals: Vec<f64> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| y - b - w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect();
    residuals.sort_by(f64::total_cmp);
    let rank = ((level * residuals.len() as f64).ceil() as usize).clamp(1, residuals.len());
    b += residuals[rank - 1];

    let mut rng = ChaCha8Rng::seed_from_u64(learning.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut avg_w = vec![0.0; p];
    let mut avg_b = 0.0;
    let mut averaged = 0usize;
    let mut trace = vec![full_loss(&w, b)];
    let patience = (learning.epochs as f64 * 0.2).ceil() as usize;
    let tolerance = trace[0] * (1.0 + 1e-3) + 1e-12;
    let mut best_early = f64::INFINITY;
    let average_from = learning.epochs / 2;
    for epoch in 0..learning.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(learning.batch_size) {
            let mut gw = vec![0.0; p];
            let mut gb = 0.0;
            for &i in chunk {
                let x = &xs[i];
                let pred = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                // d/dq of the pinball loss; zero at the kink.
                let g = if ys[i] > pred {
                    -level
                } else if ys[i] < pred {
                    1.0 - level
                } else {
                    0.0
                };
                gb += g;
                for j in 0..p {
                    gw[j] += g * x[j];
                }
            }
            let scale = learning.step / ((1 + epoch) as f64).sqrt() / chunk.len() as f64;
            b -= scale * gb;
            for j in 0..p {
                w[j] -= scale * gw[j];
            }
            if epoch >= average_from {
                averaged += 1;
                let k = averaged as f64;
                avg_b += (b - avg_b) / k;
                for j in 0..p {
                    avg_w[j] += (w[j] - avg_w[j]) / k;
                }
            }
        }
        let l = full_loss(&w, b);
        if !l.is_finite() {
            trace.push(l);
            return Err(Error::NonConvergence { trace });
        }
        trace.push(l);
        best_early = best_early.min(l);
        if epoch + 1 == patience && best_early > tolerance {
            return Err(Error::NonConvergence { trace });
        }
    }
    if averaged == 0 {
        avg_w = w;
        avg_b = b;
    }
    let weights: Vec<f64> = (0..p).map(|j| avg_w[j] * y_sd / x_sd[j]).collect();
    let intercept =
        y_mean + y_sd * avg_b - weights.iter().zip(&x_mean).map(|(a, m)| a * m).sum::<f64>();
    Ok((weights, intercept))
}

/// Quantile forecaster at `level`.
pub fn fit_quantile(series: &[f64], spec: &RegressionSpec, level: f64) -> Result<FittedForecaster> {
    let mut spec = spec.clone();
    spec.objective = Objective::Pinball { level };
    check_series(series, &spec)?;
    let design = lagged_design(series, &spec.lags, spec.lead);
    let (weights, intercept) = if design.targets.iter().all(|&y| y == design.targets[0]) {
        (vec![0.0; spec.lags.len()], design.targets[0])
    } else {
        quantile_regression(&design.rows, &design.targets, level, &spec.learning)?
    };
    Ok(FittedForecaster {
        weights,
        intercept,
        spec,
    })
}
