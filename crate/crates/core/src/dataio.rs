//! Hourly generation and price data: CSV ingestion, synthetic series, and the
//! lagged record set used by the experiments.
//!
//! Generation CSV: `timestamp,leaf_1,...,leaf_m[,aggregate][,filled]`.
//! Price CSV: `timestamp,spot,up_reg,down_reg`. Timestamps are ISO-8601 UTC on
//! an hourly grid. Lines starting with `#` are ignored.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baseforecast::{lag_features, FittedForecaster};
use crate::error::{check_dim, Error, Result};
use crate::hierarchy::{ForecastRecord, Hierarchy};
use crate::market::{MarketHour, Penalties};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

/// Validated hourly dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub timestamps: Vec<DateTime<Utc>>,
    /// `leaves[i][t]`, MW.
    pub leaves: Vec<Vec<f64>>,
    pub aggregate: Vec<f64>,
    pub prices: Vec<MarketHour>,
    /// Rows created by gap interpolation.
    pub filled: Vec<bool>,
    /// Leaf capacities, MW.
    pub capacities: Vec<f64>,
}

impl RawDataset {
    pub fn m(&self) -> usize {
        self.leaves.len()
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn hierarchy(&self) -> Result<Hierarchy> {
        Hierarchy::two_level(self.m())
    }

    /// Series `j` in hierarchy order: 0 is the aggregate, `1..=m` the leaves.
    pub fn series(&self, j: usize) -> &[f64] {
        if j == 0 {
            &self.aggregate
        } else {
            &self.leaves[j - 1]
        }
    }

    /// Capacity of series `j` in hierarchy order.
    pub fn series_capacity(&self, j: usize) -> f64 {
        if j == 0 {
            self.capacities.iter().sum()
        } else {
            self.capacities[j - 1]
        }
    }

    /// Leading `len` hours.
    pub fn prefix(&self, len: usize) -> RawDataset {
        let len = len.min(self.len());
        RawDataset {
            timestamps: self.timestamps[..len].to_vec(),
            leaves: self.leaves.iter().map(|s| s[..len].to_vec()).collect(),
            aggregate: self.aggregate[..len].to_vec(),
            prices: self.prices[..len].to_vec(),
            filled: self.filled[..len].to_vec(),
            capacities: self.capacities.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        check_dim(n, self.aggregate.len(), "aggregate series")?;
        check_dim(n, self.prices.len(), "price series")?;
        check_dim(n, self.filled.len(), "filled flags")?;
        check_dim(self.m(), self.capacities.len(), "capacities")?;
        for s in &self.leaves {
            check_dim(n, s.len(), "leaf series")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Longest run of missing hours filled by interpolation.
    pub max_gap_hours: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { max_gap_hours: 3 }
    }
}

fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .or_else(|_| {
            chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
                .or_else(|_| chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
                .map(|t| Utc.from_utc_datetime(&t))
        })
        .map_err(|e| format!("bad timestamp {s:?}: {e}"))
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

struct Table {
    header: Vec<String>,
    /// (line number, fields)
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(Table { header, rows })
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_number(path: &Path, line: usize, field: &str, what: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| parse_error(path, line, format!("unparseable {what} {field:?}")))?;
    if !v.is_finite() {
        return Err(parse_error(path, line, format!("non-finite {what}")));
    }
    Ok(v)
}

struct GenerationTable {
    timestamps: Vec<DateTime<Utc>>,
    leaves: Vec<Vec<f64>>,
    aggregate: Option<Vec<f64>>,
    filled: Vec<bool>,
}

fn parse_generation(path: &Path) -> Result<GenerationTable> {
    let table = read_table(path)?;
    let h = &table.header;
    if h.first().map(String::as_str) != Some("timestamp") {
        return Err(parse_error(path, 1, "first column must be timestamp"));
    }
    let m = h.iter().filter(|c| c.starts_with("leaf_")).count();
    if m == 0 {
        return Err(parse_error(path, 1, "no leaf_i columns"));
    }
    for (i, col) in h[1..=m].iter().enumerate() {
        if *col != format!("leaf_{}", i + 1) {
            return Err(parse_error(path, 1, format!("expected leaf_{}, found {col}", i + 1)));
        }
    }
    let mut extra = h[m + 1..].iter();
    let mut has_aggregate = false;
    let mut has_filled = false;
    for col in extra.by_ref() {
        match col.as_str() {
            "aggregate" if !has_aggregate && !has_filled => has_aggregate = true,
            "filled" if !has_filled => has_filled = true,
            _ => return Err(parse_error(path, 1, format!("unexpected column {col}"))),
        }
    }
    let width = 1 + m + has_aggregate as usize + has_filled as usize;
    let mut out = GenerationTable {
        timestamps: Vec::new(),
        leaves: vec![Vec::new(); m],
        aggregate: has_aggregate.then(Vec::new),
        filled: Vec::new(),
    };
    for (line, fields) in &table.rows {
        if fields.len() != width {
            return Err(parse_error(path, *line, format!("expected {width} fields")));
        }
        out.timestamps
            .push(parse_timestamp(&fields[0]).map_err(|e| parse_error(path, *line, e))?);
        let mut sum = 0.0;
        for i in 0..m {
            let v = parse_number(path, *line, &fields[1 + i], "generation")?;
            if v < 0.0 {
                return Err(parse_error(path, *line, format!("negative generation {v}")));
            }
            sum += v;
            out.leaves[i].push(v);
        }
        if let Some(agg) = out.aggregate.as_mut() {
            let v = parse_number(path, *line, &fields[1 + m], "aggregate")?;
            if (v - sum).abs() > 1e-6 * sum.abs().max(1.0) {
                return Err(parse_error(
                    path,
                    *line,
                    format!("aggregate {v} differs from leaf sum {sum}"),
                ));
            }
            agg.push(v);
        }
        if has_filled {
            let f = &fields[width - 1];
            out.filled.push(match f.as_str() {
                "0" | "false" => false,
                "1" | "true" => true,
                _ => return Err(parse_error(path, *line, format!("bad filled flag {f:?}"))),
            });
        } else {
            out.filled.push(false);
        }
    }
    Ok(out)
}

fn parse_prices(path: &Path) -> Result<(Vec<DateTime<Utc>>, Vec<[f64; 3]>)> {
    let table = read_table(path)?;
    let expected = ["timestamp", "spot", "up_reg", "down_reg"];
    if table.header != expected {
        return Err(parse_error(
            path,
            1,
            format!("price header must be {}", expected.join(",")),
        ));
    }
    let mut ts = Vec::new();
    let mut prices = Vec::new();
    for (line, fields) in &table.rows {
        if fields.len() != 4 {
            return Err(parse_error(path, *line, "expected 4 fields"));
        }
        ts.push(parse_timestamp(&fields[0]).map_err(|e| parse_error(path, *line, e))?);
        let p = [
            parse_number(path, *line, &fields[1], "spot price")?,
            parse_number(path, *line, &fields[2], "up-regulation price")?,
            parse_number(path, *line, &fields[3], "down-regulation price")?,
        ];
        MarketHour::new(0, p[0], p[1], p[2]).map_err(|e| parse_error(path, *line, e.to_string()))?;
        prices.push(p);
    }
    Ok((ts, prices))
}

/// Fills gaps of up to `max_gap` missing hours by linear interpolation of
/// every column. Returns the new timestamps, columns and fill flags.
fn fill_gaps(
    path: &Path,
    timestamps: &[DateTime<Utc>],
    columns: &[Vec<f64>],
    filled: &[bool],
    max_gap: usize,
) -> Result<(Vec<DateTime<Utc>>, Vec<Vec<f64>>, Vec<bool>)> {
    let hour = Duration::hours(1);
    let mut ts = Vec::with_capacity(timestamps.len());
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(timestamps.len()); columns.len()];
    let mut flags = Vec::with_capacity(timestamps.len());
    for k in 0..timestamps.len() {
        if k > 0 {
            let step = timestamps[k] - timestamps[k - 1];
            if step <= Duration::zero() || step.num_seconds() % 3600 != 0 {
                return Err(parse_error(
                    path,
                    k + 2,
                    format!("timestamp {} breaks the hourly grid", format_timestamp(&timestamps[k])),
                ));
            }
            let missing = (step.num_hours() - 1) as usize;
            if missing > max_gap {
                return Err(parse_error(
                    path,
                    k + 2,
                    format!("gap of {missing} hours exceeds the fill limit of {max_gap}"),
                ));
            }
            for g in 1..=missing {
                let frac = g as f64 / (missing + 1) as f64;
                ts.push(timestamps[k - 1] + hour * g as i32);
                for (c, col) in columns.iter().enumerate() {
                    cols[c].push(col[k - 1] + frac * (col[k] - col[k - 1]));
                }
                flags.push(true);
            }
        }
        ts.push(timestamps[k]);
        for (c, col) in columns.iter().enumerate() {
            cols[c].push(col[k]);
        }
        flags.push(filled[k]);
    }
    Ok((ts, cols, flags))
}

/// Reads and validates a generation file and a price file covering the same hours.
pub fn ingest_csv(
    generation_path: &Path,
    price_path: &Path,
    options: &IngestOptions,
) -> Result<RawDataset> {
    let gen = parse_generation(generation_path)?;
    if gen.timestamps.is_empty() {
        return Err(parse_error(generation_path, 1, "no data rows"));
    }
    let m = gen.leaves.len();
    let mut columns = gen.leaves.clone();
    if let Some(a) = &gen.aggregate {
        columns.push(a.clone());
    }
    let (ts, mut cols, filled) = fill_gaps(
        generation_path,
        &gen.timestamps,
        &columns,
        &gen.filled,
        options.max_gap_hours,
    )?;
    let aggregate = if gen.aggregate.is_some() {
        cols.pop().unwrap()
    } else {
        (0..ts.len())
            .map(|t| cols.iter().map(|c| c[t]).sum())
            .collect()
    };
    let leaves = cols;

    let (pts, prices) = parse_prices(price_path)?;
    let price_cols: Vec<Vec<f64>> = (0..3).map(|c| prices.iter().map(|p| p[c]).collect()).collect();
    let (pts, pcols, pfilled) = fill_gaps(
        price_path,
        &pts,
        &price_cols,
        &vec![false; pts.len()],
        options.max_gap_hours,
    )?;
    if pts != ts {
        return Err(Error::Data(format!(
            "price hours ({} rows from {}) do not match generation hours ({} rows from {})",
            pts.len(),
            pts.first().map(format_timestamp).unwrap_or_default(),
            ts.len(),
            format_timestamp(&ts[0]),
        )));
    }
    let epoch0 = ts[0].timestamp() / 3600;
    let hours = (0..ts.len())
        .map(|t| MarketHour::new(ts[t].timestamp() / 3600 - epoch0, pcols[0][t], pcols[1][t], pcols[2][t]))
        .collect::<Result<Vec<_>>>()?;
    let filled: Vec<bool> = filled.iter().zip(&pfilled).map(|(a, b)| *a || *b).collect();
    let capacities = (0..m)
        .map(|i| leaves[i].iter().fold(0.0f64, |a, &v| a.max(v)).max(f64::MIN_POSITIVE))
        .collect();
    let raw = RawDataset {
        timestamps: ts,
        leaves,
        aggregate,
        prices: hours,
        filled,
        capacities,
    };
    raw.validate()?;
    Ok(raw)
}

/// Writes the generation file with the aggregate and fill-flag columns.
pub fn write_generation_csv(raw: &RawDataset, path: &Path, header_comment: Option<&str>) -> Result<()> {
    raw.validate()?;
    let mut out = std::io::BufWriter::new(File::create(path)?);
    if let Some(c) = header_comment {
        writeln!(out, "# {c}")?;
    }
    let mut header = vec!["timestamp".to_string()];
    header.extend((1..=raw.m()).map(|i| format!("leaf_{i}")));
    header.push("aggregate".into());
    header.push("filled".into());
    writeln!(out, "{}", header.join(","))?;
    for t in 0..raw.len() {
        let mut row = vec![format_timestamp(&raw.timestamps[t])];
        row.extend(raw.leaves.iter().map(|s| s[t].to_string()));
        row.push(raw.aggregate[t].to_string());
        row.push(if raw.filled[t] { "1" } else { "0" }.into());
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_price_csv(raw: &RawDataset, path: &Path, header_comment: Option<&str>) -> Result<()> {
    raw.validate()?;
    let mut out = std::io::BufWriter::new(File::create(path)?);
    if let Some(c) = header_comment {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "timestamp,spot,up_reg,down_reg")?;
    for (t, h) in raw.timestamps.iter().zip(&raw.prices) {
        writeln!(
            out,
            "{},{},{},{}",
            format_timestamp(t),
            h.pi_f(),
            h.pi_up(),
            h.pi_dw()
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriceRegime {
    /// Same prices every hour.
    Fixed {
        pi_f: f64,
        psi_plus: f64,
        psi_minus: f64,
    },
    /// Markov chain over balanced, short-system and long-system hours. Only
    /// one regulation price deviates from spot in any hour.
    RegimeSwitching {
        spot_mean: f64,
        spot_sd: f64,
        /// Probability of staying in the current state.
        persistence: f64,
        mean_psi_plus: f64,
        mean_psi_minus: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub m: usize,
    pub capacities: Vec<f64>,
    /// Lag-one coefficient of each leaf's latent Gaussian process.
    pub ar: Vec<f64>,
    /// Correlation of the latent innovations.
    pub correlation: Vec<Vec<f64>>,
    /// Mean output as a fraction of capacity before clipping.
    pub mean_level: f64,
    /// Standard deviation of the latent process as a fraction of capacity.
    pub spread: f64,
    pub price: PriceRegime,
    pub hours: usize,
    pub seed: u64,
    /// Unix seconds of the first hour.
    pub start: i64,
}

pub const DEFAULT_CAPACITIES: [f64; 4] = [1.7496, 2.9646, 3.3777, 2.5272];

impl Default for SyntheticSpec {
    fn default() -> Self {
        let m = DEFAULT_CAPACITIES.len();
        Self {
            m,
            capacities: DEFAULT_CAPACITIES.to_vec(),
            ar: vec![0.9; m],
            correlation: uniform_correlation(m, 0.3),
            mean_level: 0.4,
            spread: 0.35,
            price: PriceRegime::Fixed {
                pi_f: 25.0,
                psi_plus: 12.0,
                psi_minus: 4.0,
            },
            hours: 17_000,
            seed: 42,
            start: 1_514_764_800,
        }
    }
}

/// Unit diagonal, `rho` elsewhere.
pub fn uniform_correlation(m: usize, rho: f64) -> Vec<Vec<f64>> {
    (0..m)
        .map(|i| (0..m).map(|j| if i == j { 1.0 } else { rho }).collect())
        .collect()
}

/// Lower factor `L` with `L L^T = C` for a positive semidefinite `C`.
fn psd_factor(c: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let m = c.len();
    let mat = DMatrix::from_fn(m, m, |i, j| c[i][j]);
    let sym = mat.symmetric_eigen();
    let min = sym.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if min < -1e-9 {
        return Err(Error::Config(format!(
            "correlation matrix not positive semidefinite (eigenvalue {min})"
        )));
    }
    let sqrt_d = DMatrix::from_diagonal(&sym.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&sym.eigenvectors * sqrt_d)
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m == 0 {
            return bad("synthetic spec needs m >= 1".into());
        }
        check_dim(self.m, self.capacities.len(), "synthetic capacities")?;
        check_dim(self.m, self.ar.len(), "AR coefficients")?;
        check_dim(self.m, self.correlation.len(), "correlation rows")?;
        if self.capacities.iter().any(|&u| !(u > 0.0 && u.is_finite())) {
            return bad(format!("capacities must be > 0, got {:?}", self.capacities));
        }
        if self.ar.iter().any(|a| !(a.abs() < 1.0)) {
            return bad(format!("AR coefficients must lie in (-1, 1), got {:?}", self.ar));
        }
        for (i, row) in self.correlation.iter().enumerate() {
            check_dim(self.m, row.len(), "correlation row")?;
            if (row[i] - 1.0).abs() > 1e-12 {
                return bad("correlation diagonal must be 1".into());
            }
            for (j, &v) in row.iter().enumerate() {
                if !(v.abs() <= 1.0) || (v - self.correlation[j][i]).abs() > 1e-12 {
                    return bad("correlation matrix must be symmetric with entries in [-1, 1]".into());
                }
            }
        }
        psd_factor(&self.correlation)?;
        if !(self.spread > 0.0 && self.spread.is_finite() && self.mean_level.is_finite()) {
            return bad("spread must be > 0 and mean level finite".into());
        }
        match &self.price {
            PriceRegime::Fixed { pi_f, psi_plus, psi_minus } => {
                Penalties::new(*psi_plus, *psi_minus)?;
                if !pi_f.is_finite() {
                    return bad("spot price must be finite".into());
                }
            }
            PriceRegime::RegimeSwitching {
                spot_mean,
                spot_sd,
                persistence,
                mean_psi_plus,
                mean_psi_minus,
            } => {
                if !(spot_mean.is_finite() && *spot_sd >= 0.0 && (0.0..1.0).contains(persistence))
                    || !(*mean_psi_plus > 0.0 && *mean_psi_minus > 0.0)
                {
                    return bad("invalid regime-switching price settings".into());
                }
            }
        }
        if self.hours == 0 {
            return bad("hours must be >= 1".into());
        }
        Ok(())
    }
}

/// Clipped vector-autoregressive generation and prices, deterministic under the seed.
pub fn synthesize(spec: &SyntheticSpec) -> Result<RawDataset> {
    spec.validate()?;
    let m = spec.m;
    let factor = psd_factor(&spec.correlation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut z = vec![0.0; m];
    let mut eps = vec![0.0; m];
    // Start from the stationary distribution.
    for (i, zi) in z.iter_mut().enumerate() {
        let s: f64 = (0..m)
            .map(|k| factor[(i, k)] * rng.sample::<f64, _>(StandardNormal))
            .sum();
        *zi = s;
    }
    let mut leaves = vec![Vec::with_capacity(spec.hours); m];
    let mut aggregate = Vec::with_capacity(spec.hours);
    for _ in 0..spec.hours {
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let mut total = 0.0;
        for i in 0..m {
            let shock: f64 = (0..m).map(|k| factor[(i, k)] * eps[k]).sum();
            let a = spec.ar[i];
            z[i] = a * z[i] + (1.0 - a * a).sqrt() * shock;
            let u = spec.capacities[i];
            let y = (u * (spec.mean_level + spec.spread * z[i])).clamp(0.0, u);
            leaves[i].push(y);
            total += y;
        }
        aggregate.push(total);
    }

    let mut prices = Vec::with_capacity(spec.hours);
    match &spec.price {
        PriceRegime::Fixed { pi_f, psi_plus, psi_minus } => {
            let p = Penalties::new(*psi_plus, *psi_minus)?;
            for t in 0..spec.hours {
                prices.push(MarketHour::from_penalties(t as i64, *pi_f, p)?);
            }
        }
        PriceRegime::RegimeSwitching {
            spot_mean,
            spot_sd,
            persistence,
            mean_psi_plus,
            mean_psi_minus,
        } => {
            let plus = Exp::new(1.0 / mean_psi_plus).map_err(|e| Error::Config(e.to_string()))?;
            let minus = Exp::new(1.0 / mean_psi_minus).map_err(|e| Error::Config(e.to_string()))?;
            // 0 balanced, 1 long system (surplus penalized), 2 short system.
            let mut state = 0usize;
            for t in 0..spec.hours {
                if rng.random::<f64>() >= *persistence {
                    state = rng.random_range(0..3);
                }
                let spot = spot_mean + spot_sd * rng.sample::<f64, _>(StandardNormal);
                let (pp, pm) = match state {
                    0 => (0.0, 0.0),
                    1 => (plus.sample(&mut rng), 0.0),
                    _ => (0.0, minus.sample(&mut rng)),
                };
                prices.push(MarketHour::from_penalties(t as i64, spot, Penalties::new(pp, pm)?)?);
            }
        }
    }
    let start = Utc
        .timestamp_opt(spec.start, 0)
        .single()
        .ok_or_else(|| Error::Config(format!("invalid start time {}", spec.start)))?;
    let timestamps = (0..spec.hours)
        .map(|t| start + Duration::hours(t as i64))
        .collect();
    let raw = RawDataset {
        timestamps,
        leaves,
        aggregate,
        prices,
        filled: vec![false; spec.hours],
        capacities: spec.capacities.clone(),
    };
    raw.validate()?;
    Ok(raw)
}

/// Contextual features: lagged generation of every series and optionally the
/// lagged penalties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub gen_lags: Vec<usize>,
    /// Depth `h` of the penalty lags `t-h..=t`.
    pub penalty_lag_depth: Option<usize>,
}

impl Default for ContextSpec {
    fn default() -> Self {
        Self {
            gen_lags: vec![1, 2, 3],
            penalty_lag_depth: None,
        }
    }
}

impl ContextSpec {
    pub fn dim(&self, n: usize) -> usize {
        self.gen_lags.len() * n + self.penalty_lag_depth.map_or(0, |h| 2 * (h + 1))
    }

    /// Earliest issue index with every context feature available.
    pub fn first_issue(&self) -> usize {
        let g = self.gen_lags.iter().copied().max().unwrap_or(1).max(1) - 1;
        g.max(self.penalty_lag_depth.unwrap_or(0))
    }

    fn features(&self, raw: &RawDataset, t: usize, out: &mut Vec<f64>) {
        out.clear();
        let n = raw.m() + 1;
        for &l in &self.gen_lags {
            for j in 0..n {
                out.push(raw.series(j)[t + 1 - l]);
            }
        }
        if let Some(h) = self.penalty_lag_depth {
            for s in t - h..=t {
                out.push(raw.prices[s].penalties().psi_plus());
            }
            for s in t - h..=t {
                out.push(raw.prices[s].penalties().psi_minus());
            }
        }
    }
}

/// Records with a chronological train/test boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentDataset {
    pub records: Vec<ForecastRecord>,
    pub train_end: usize,
    pub hierarchy: Hierarchy,
    pub capacities: Vec<f64>,
}

impl ExperimentDataset {
    /// Boundary at `floor(0.8 * len)`.
    pub fn new(records: Vec<ForecastRecord>, hierarchy: Hierarchy, capacities: Vec<f64>) -> Result<Self> {
        let train_end = train_len(records.len())?;
        Ok(Self {
            records,
            train_end,
            hierarchy,
            capacities,
        })
    }

    pub fn train(&self) -> &[ForecastRecord] {
        &self.records[..self.train_end]
    }

    pub fn test(&self) -> &[ForecastRecord] {
        &self.records[self.train_end..]
    }
}

/// Size of the training part of `len` usable records.
pub fn train_len(len: usize) -> Result<usize> {
    if len < 10 {
        return Err(Error::Data(format!("need at least 10 records, got {len}")));
    }
    Ok(len * 4 / 5)
}

/// Chronological 80/20 split.
pub fn split(records: &[ForecastRecord]) -> Result<(&[ForecastRecord], &[ForecastRecord])> {
    Ok(records.split_at(train_len(records.len())?))
}

/// Issue indices with every lag and the target available.
pub fn issue_range(
    raw_len: usize,
    max_forecaster_lag: usize,
    context: &ContextSpec,
    lead: usize,
) -> std::ops::Range<usize> {
    let first = (max_forecaster_lag.max(1) - 1).max(context.first_issue());
    first..raw_len.saturating_sub(lead).max(first)
}

/// One record per usable issue time `t`, targeting hour `t + lead`.
pub fn build_records(
    raw: &RawDataset,
    forecasters: &[FittedForecaster],
    context: &ContextSpec,
    lead: usize,
) -> Result<ExperimentDataset> {
    if lead == 0 {
        return Err(Error::Config("lead time must be >= 1".into()));
    }
    let hierarchy = raw.hierarchy()?;
    let n = hierarchy.n();
    check_dim(n, forecasters.len(), "forecasters")?;
    for (j, f) in forecasters.iter().enumerate() {
        if f.spec.target != j {
            return Err(Error::Data(format!(
                "forecaster {j} targets series {}",
                f.spec.target
            )));
        }
    }
    let max_lag = forecasters.iter().map(|f| f.spec.max_lag()).max().unwrap_or(1);
    let mut records = Vec::new();
    let mut ctx = Vec::with_capacity(context.dim(n));
    for t in issue_range(raw.len(), max_lag, context, lead) {
        let mut base = Vec::with_capacity(n);
        for (j, f) in forecasters.iter().enumerate() {
            let x = lag_features(raw.series(j), &f.spec.lags, t)
                .ok_or_else(|| Error::Data(format!("lags unavailable at {t}")))?;
            base.push(f.predict(&x)?);
        }
        context.features(raw, t, &mut ctx);
        let target = t + lead;
        let actual = hierarchy.aggregate(&raw.leaves.iter().map(|s| s[target]).collect::<Vec<_>>())?;
        records.push(ForecastRecord {
            t: target as i64,
            base: crate::hierarchy::SeriesVector(base),
            context: ctx.clone(),
            actual,
            hour: raw.prices[target],
        });
    }
    ExperimentDataset::new(records, hierarchy, raw.capacities.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseforecast::{Learning, Objective, RegressionSpec};

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    const PRICES3: &str = "timestamp,spot,up_reg,down_reg\n\
        2020-01-01T00:00:00Z,25,29,13\n\
        2020-01-01T01:00:00Z,25,29,13\n\
        2020-01-01T02:00:00Z,25,29,13\n";

    #[test]
    fn ingest_with_aggregate_column() {
        let dir = tempfile::tempdir().unwrap();
        let g = write(
            dir.path(),
            "g.csv",
            "timestamp,leaf_1,leaf_2,leaf_3,leaf_4,aggregate\n\
             2020-01-01T00:00:00Z,1,2,3,4,10\n\
             # comment line\n\
             2020-01-01T01:00:00Z,0.5,0.5,0.5,0.5,2\n\
             2020-01-01T02:00:00Z,0,0,0,0,0\n",
        );
        let p = write(dir.path(), "p.csv", PRICES3);
        let raw = ingest_csv(&g, &p, &IngestOptions::default()).unwrap();
        assert_eq!(raw.m(), 4);
        assert_eq!(raw.aggregate, vec![10.0, 2.0, 0.0]);
        assert_eq!(raw.prices[0].penalties().psi_plus(), 12.0);
        assert_eq!(raw.capacities, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn ingest_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "p.csv", PRICES3);
        let g = write(
            dir.path(),
            "g.csv",
            "timestamp,leaf_1,leaf_2,aggregate\n\
             2020-01-01T00:00:00Z,1,2,3\n\
             2020-01-01T01:00:00Z,1,2,3.5\n\
             2020-01-01T02:00:00Z,1,2,3\n",
        );
        match ingest_csv(&g, &p, &IngestOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let g = write(
            dir.path(),
            "g2.csv",
            "timestamp,leaf_1\n2020-01-01T00:00:00Z,-1\n",
        );
        assert!(ingest_csv(&g, &p, &IngestOptions::default()).is_err());
        let g = write(dir.path(), "g3.csv", "timestamp,leaf_1\n2020-01-01T00:00:00Z,abc\n");
        assert!(matches!(
            ingest_csv(&g, &p, &IngestOptions::default()),
            Err(Error::Parse { line: 2, .. })
        ));
        let g = write(
            dir.path(),
            "g4.csv",
            "timestamp,leaf_1\n2020-01-01T00:00:00Z,1\n2020-01-01T01:00:00Z,1\n2020-01-01T02:00:00Z,1\n",
        );
        let bad_p = write(
            dir.path(),
            "p2.csv",
            "timestamp,spot,up_reg,down_reg\n\
             2020-01-01T00:00:00Z,25,20,13\n\
             2020-01-01T01:00:00Z,25,29,13\n\
             2020-01-01T02:00:00Z,25,29,13\n",
        );
        assert!(matches!(
            ingest_csv(&g, &bad_p, &IngestOptions::default()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn short_gaps_are_filled_long_gaps_abort() {
        let dir = tempfile::tempdir().unwrap();
        let g = write(
            dir.path(),
            "g.csv",
            "timestamp,leaf_1\n2020-01-01T00:00:00Z,0\n2020-01-01T04:00:00Z,4\n",
        );
        let p = write(
            dir.path(),
            "p.csv",
            "timestamp,spot,up_reg,down_reg\n2020-01-01T00:00:00Z,20,30,10\n2020-01-01T04:00:00Z,24,30,10\n",
        );
        let raw = ingest_csv(&g, &p, &IngestOptions::default()).unwrap();
        assert_eq!(raw.leaves[0], vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(raw.filled, vec![false, true, true, true, false]);
        assert_eq!(raw.prices[2].pi_f(), 22.0);
        let g = write(
            dir.path(),
            "g2.csv",
            "timestamp,leaf_1\n2020-01-01T00:00:00Z,0\n2020-01-01T05:00:00Z,4\n",
        );
        assert!(ingest_csv(&g, &p, &IngestOptions::default()).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            hours: 300,
            price: PriceRegime::RegimeSwitching {
                spot_mean: 40.0,
                spot_sd: 8.0,
                persistence: 0.8,
                mean_psi_plus: 10.0,
                mean_psi_minus: 6.0,
            },
            ..SyntheticSpec::default()
        };
        let raw = synthesize(&spec).unwrap();
        let g = dir.path().join("g.csv");
        let p = dir.path().join("p.csv");
        write_generation_csv(&raw, &g, Some("seed=42")).unwrap();
        write_price_csv(&raw, &p, None).unwrap();
        let mut back = ingest_csv(&g, &p, &IngestOptions::default()).unwrap();
        back.capacities = raw.capacities.clone();
        assert_eq!(back.leaves, raw.leaves);
        assert_eq!(back.aggregate, raw.aggregate);
        assert_eq!(back.timestamps, raw.timestamps);
        for (a, b) in back.prices.iter().zip(&raw.prices) {
            assert_eq!((a.pi_f(), a.pi_up(), a.pi_dw()), (b.pi_f(), b.pi_up(), b.pi_dw()));
        }
        let g2 = dir.path().join("g2.csv");
        write_generation_csv(&back, &g2, Some("seed=42")).unwrap();
        assert_eq!(std::fs::read(&g).unwrap(), std::fs::read(&g2).unwrap());
    }

    fn sample_corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn independent_leaves_are_uncorrelated() {
        let spec = SyntheticSpec {
            correlation: uniform_correlation(4, 0.0),
            ar: vec![0.5; 4],
            hours: 60_000,
            ..SyntheticSpec::default()
        };
        let raw = synthesize(&spec).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                let r = sample_corr(&raw.leaves[i], &raw.leaves[j]);
                assert!(r.abs() < 0.05, "{i},{j}: {r}");
            }
        }
    }

    #[test]
    fn synthetic_invariants() {
        let raw = synthesize(&SyntheticSpec {
            hours: 2000,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let h = raw.hierarchy().unwrap();
        for t in 0..raw.len() {
            let leaves: Vec<f64> = raw.leaves.iter().map(|s| s[t]).collect();
            assert!(h.is_coherent(&h.aggregate(&leaves).unwrap(), 0.0));
            assert_eq!(raw.aggregate[t], leaves.iter().sum::<f64>());
            for (i, &v) in leaves.iter().enumerate() {
                assert!(v >= 0.0 && v <= raw.capacities[i]);
            }
            let p = raw.prices[t];
            assert_eq!((p.pi_f(), p.pi_up(), p.pi_dw()), (25.0, 29.0, 13.0));
        }
        let again = synthesize(&SyntheticSpec {
            hours: 2000,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_eq!(raw, again);
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = SyntheticSpec::default();
        spec.correlation = uniform_correlation(4, -0.5);
        assert!(synthesize(&spec).is_err());
        let mut spec = SyntheticSpec::default();
        spec.capacities[0] = 0.0;
        assert!(synthesize(&spec).is_err());
        // Singular but semidefinite is accepted.
        let mut spec = SyntheticSpec::default();
        spec.correlation = uniform_correlation(4, 1.0);
        spec.hours = 10;
        assert!(synthesize(&spec).is_ok());
    }

    #[test]
    fn regime_switching_hours_are_single_sided() {
        let raw = synthesize(&SyntheticSpec {
            hours: 2000,
            price: PriceRegime::RegimeSwitching {
                spot_mean: 40.0,
                spot_sd: 5.0,
                persistence: 0.9,
                mean_psi_plus: 8.0,
                mean_psi_minus: 8.0,
            },
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert!(raw.prices.iter().all(|h| h.is_single_sided()));
    }

    fn persistence_forecasters(n: usize, lags: Vec<usize>) -> Vec<FittedForecaster> {
        (0..n)
            .map(|j| {
                let mut weights = vec![0.0; lags.len()];
                weights[0] = 1.0;
                FittedForecaster {
                    weights,
                    intercept: 0.0,
                    spec: RegressionSpec {
                        target: j,
                        lags: lags.clone(),
                        lead: 1,
                        objective: Objective::SquaredError,
                        learning: Learning::default(),
                        capacity: f64::MAX,
                    },
                }
            })
            .collect()
    }

    #[test]
    fn record_dimensions_and_boundaries() {
        let raw = synthesize(&SyntheticSpec {
            hours: 200,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let f = persistence_forecasters(5, vec![1, 2, 3, 24]);
        let ctx = ContextSpec::default();
        let ds = build_records(&raw, &f, &ctx, 1).unwrap();
        assert_eq!(ds.records[0].context.len(), 15);
        // First issue time is 23 (lag 24 needs index 0), so the first target is 24.
        assert_eq!(ds.records[0].t, 24);
        assert_eq!(ds.records.len(), 200 - 24);
        let with_pen = ContextSpec {
            penalty_lag_depth: Some(24),
            ..ContextSpec::default()
        };
        let ds2 = build_records(&raw, &f, &with_pen, 1).unwrap();
        assert_eq!(ds2.records[0].context.len(), 15 + 50);
        assert_eq!(ds2.records[0].t, 25);
        for r in &ds.records {
            r.validate(&ds.hierarchy).unwrap();
            // Persistence base forecast and lag-1 context both equal the value at the issue time.
            let issue = (r.t - 1) as usize;
            assert_eq!(r.base.0[0], raw.aggregate[issue]);
            assert_eq!(r.context[1], raw.leaves[0][issue]);
        }
        assert!(build_records(&raw, &f[..4], &ctx, 1).is_err());
    }

    #[test]
    fn context_never_looks_ahead() {
        let raw = synthesize(&SyntheticSpec {
            hours: 120,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let f = persistence_forecasters(5, vec![1, 2]);
        let ctx = ContextSpec {
            gen_lags: vec![1, 2, 3],
            penalty_lag_depth: Some(4),
        };
        let ds = build_records(&raw, &f, &ctx, 1).unwrap();
        for r in &ds.records {
            let issue = (r.t - 1) as usize;
            let mut expected = Vec::new();
            ctx.features(&raw, issue, &mut expected);
            assert_eq!(r.context, expected);
            for (k, &l) in ctx.gen_lags.iter().enumerate() {
                assert!(issue + 1 - l <= issue);
                assert_eq!(r.context[k * 5], raw.aggregate[issue + 1 - l]);
            }
        }
    }

    #[test]
    fn split_rules() {
        let h = Hierarchy::two_level(1).unwrap();
        let mk = |n: usize| -> Vec<ForecastRecord> {
            (0..n)
                .map(|t| ForecastRecord {
                    t: t as i64,
                    base: crate::hierarchy::SeriesVector(vec![0.0, 0.0]),
                    context: vec![],
                    actual: h.aggregate(&[0.0]).unwrap(),
                    hour: MarketHour::new(t as i64, 25.0, 29.0, 13.0).unwrap(),
                })
                .collect()
        };
        let r = mk(100);
        let (a, b) = split(&r).unwrap();
        assert_eq!((a.len(), b.len()), (80, 20));
        let r = mk(101);
        let (a, b) = split(&r).unwrap();
        assert_eq!((a.len(), b.len()), (80, 21));
        assert!(a.last().unwrap().t < b[0].t);
        assert!(split(&mk(9)).is_err());
    }
}
