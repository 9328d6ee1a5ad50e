//! Offering strategies built on a latent leaf vector `h`: the reconciled
//! forecast is always `S h`, hence coherent.
//!
//! Value-oriented training maximizes the Nash product of the producers' excess
//! profits over independent offering, subject to every excess staying
//! non-negative, with the primal-dual loop below.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{allocated_costs_with_jacobian, AllocationPolicy, GammaMode};
use crate::error::{check_dim, Error, Result};
use crate::hierarchy::{ForecastRecord, Hierarchy, SeriesVector};
use crate::market::{imbalance_cost, positive_part, Penalties};
use crate::neural::{
    Activation, Dense, ForwardTrace, GradientBundle, MlpParams, NetworkFile, OutputBound,
    relative_error,
    Standardizer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReconKind {
    BottomUp,
    QualityLearned,
    QualityLinear,
    ValueLearned,
    ValueLinear,
}

impl ReconKind {
    pub const ALL: [ReconKind; 5] = [
        ReconKind::BottomUp,
        ReconKind::QualityLearned,
        ReconKind::QualityLinear,
        ReconKind::ValueLearned,
        ReconKind::ValueLinear,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ReconKind::BottomUp => "bottom_up",
            ReconKind::QualityLearned => "quality_learned",
            ReconKind::QualityLinear => "quality_linear",
            ReconKind::ValueLearned => "value_learned",
            ReconKind::ValueLinear => "value_linear",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, ReconKind::QualityLinear | ReconKind::ValueLinear)
    }

    pub fn is_value(&self) -> bool {
        matches!(self, ReconKind::ValueLearned | ReconKind::ValueLinear)
    }

    /// Learned maps see the context vector; linear maps see base forecasts only.
    pub fn uses_context(&self) -> bool {
        matches!(self, ReconKind::QualityLearned | ReconKind::ValueLearned)
    }
}

impl fmt::Display for ReconKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReconKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ReconKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown reconciliation kind {s:?}")))
    }
}

/// A reconciliation map `g` and the hierarchy it maps into.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconModel {
    kind: ReconKind,
    hierarchy: Hierarchy,
    network: Option<NetworkFile>,
    capacities: Vec<f64>,
}

impl ReconModel {
    pub fn bottom_up(hierarchy: Hierarchy) -> Self {
        let m = hierarchy.m();
        Self {
            kind: ReconKind::BottomUp,
            hierarchy,
            network: None,
            capacities: vec![f64::INFINITY; m],
        }
    }

    pub fn from_network(
        kind: ReconKind,
        hierarchy: Hierarchy,
        network: NetworkFile,
        capacities: Vec<f64>,
    ) -> Result<Self> {
        if kind == ReconKind::BottomUp {
            return Err(Error::Config("bottom-up reconciliation has no network".into()));
        }
        check_dim(hierarchy.m(), capacities.len(), "capacities")?;
        check_dim(hierarchy.m(), network.params.output_dim(), "network output")?;
        check_dim(network.params.input_dim(), network.scaler.dim(), "network scaler")?;
        if capacities.iter().any(|&u| !(u.is_finite() && u > 0.0)) {
            return Err(Error::Config("capacities must be finite and > 0".into()));
        }
        Ok(Self {
            kind,
            hierarchy,
            network: Some(network),
            capacities,
        })
    }

    pub fn kind(&self) -> ReconKind {
        self.kind
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn network(&self) -> Option<&NetworkFile> {
        self.network.as_ref()
    }

    pub fn network_mut(&mut self) -> Option<&mut NetworkFile> {
        self.network.as_mut()
    }

    pub fn capacities(&self) -> &[f64] {
        &self.capacities
    }

    fn input_raw(&self, base: &SeriesVector, context: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(base.as_slice());
        if self.kind.uses_context() {
            out.extend_from_slice(context);
        }
    }

    /// Standardized network input for one record.
    pub fn network_input(&self, base: &SeriesVector, context: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.hierarchy.n(), base.len(), "base forecast")?;
        let Some(net) = &self.network else {
            return Ok(Vec::new());
        };
        let mut raw = Vec::new();
        self.input_raw(base, context, &mut raw);
        check_dim(net.params.input_dim(), raw.len(), "network input")?;
        Ok(net.scaler.apply(&raw))
    }

    /// Latent leaf vector `h`.
    pub fn latent(&self, base: &SeriesVector, context: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.hierarchy.n(), base.len(), "base forecast")?;
        match &self.network {
            None => Ok(base.leaves(self.hierarchy.m()).to_vec()),
            Some(net) => {
                let x = self.network_input(base, context)?;
                let mut h = net.params.forward(&x)?;
                if self.kind.is_linear() {
                    for (v, &u) in h.iter_mut().zip(&self.capacities) {
                        *v = v.clamp(0.0, u);
                    }
                }
                Ok(h)
            }
        }
    }

    /// `S g(base, context)`.
    pub fn reconcile(&self, base: &SeriesVector, context: &[f64]) -> Result<SeriesVector> {
        let h = self.latent(base, context)?;
        self.hierarchy.aggregate(&h)
    }

    /// Text model file: a short header followed by the network block.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "recon 1")?;
        writeln!(out, "kind {}", self.kind)?;
        let s = self.hierarchy.structural_matrix();
        let k = self.hierarchy.n_aggregates();
        writeln!(out, "hierarchy {} {}", self.hierarchy.m(), k)?;
        for row in &s[..k] {
            writeln!(
                out,
                "{}",
                row.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
            )?;
        }
        match &self.network {
            None => writeln!(out, "no_network")?,
            Some(net) => {
                writeln!(
                    out,
                    "capacities {}",
                    self.capacities
                        .iter()
                        .map(|u| u.to_string())
                        .collect::<Vec<_>>()
                        .join(" ")
                )?;
                net.write_to(out)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut line = String::new();
        let mut next_line = |input: &mut R| -> Result<String> {
            line.clear();
            if input.read_line(&mut line)? == 0 {
                return Err(Error::ModelFormat("unexpected end of model file".into()));
            }
            Ok(line.trim().to_string())
        };
        let bad = |l: &str| Error::ModelFormat(format!("unexpected line {l:?}"));
        let mut header = next_line(input)?;
        while header.starts_with('#') {
            header = next_line(input)?;
        }
        if header != "recon 1" {
            return Err(bad(&header));
        }
        let kind_line = next_line(input)?;
        let kind: ReconKind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| bad(&kind_line))?
            .parse()
            .map_err(|_| bad(&kind_line))?;
        let h_line = next_line(input)?;
        let dims: Vec<usize> = h_line
            .strip_prefix("hierarchy ")
            .ok_or_else(|| bad(&h_line))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(&h_line)))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(bad(&h_line));
        }
        let mut rows = Vec::with_capacity(dims[1]);
        for _ in 0..dims[1] {
            let r = next_line(input)?;
            rows.push(
                r.split_whitespace()
                    .map(|t| t.parse::<u8>().map_err(|_| bad(&r)))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let hierarchy = Hierarchy::from_aggregation(dims[0], rows)?;
        let tail = next_line(input)?;
        if tail == "no_network" {
            if kind != ReconKind::BottomUp {
                return Err(Error::ModelFormat(format!("{kind} model without network")));
            }
            return Ok(Self::bottom_up(hierarchy));
        }
        let capacities: Vec<f64> = tail
            .strip_prefix("capacities ")
            .ok_or_else(|| bad(&tail))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(&tail)))
            .collect::<Result<_>>()?;
        let network = NetworkFile::read_from(input)?;
        Self::from_network(kind, hierarchy, network, capacities)
    }
}

/// Dual update variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualRule {
    /// `mu <- mu + nu [V]^+`: multipliers never decrease.
    #[default]
    AsWritten,
    /// Conventional projected ascent `mu <- [mu + nu V]^+`.
    Projected,
}

impl fmt::Display for DualRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DualRule::AsWritten => "as_written",
            DualRule::Projected => "projected",
        })
    }
}

impl FromStr for DualRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_written" => Ok(DualRule::AsWritten),
            "projected" => Ok(DualRule::Projected),
            _ => Err(Error::Config(format!("unknown dual rule {s:?}"))),
        }
    }
}

/// Lagrange multipliers, their step sizes and the per-epoch mean violation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub history: Vec<Vec<f64>>,
}

impl DualState {
    /// Multipliers start at 1.
    pub fn new(nu: Vec<f64>) -> Result<Self> {
        if nu.is_empty() || nu.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("dual steps must be > 0, got {nu:?}")));
        }
        Ok(Self {
            mu: vec![1.0; nu.len()],
            nu,
            history: Vec::new(),
        })
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            mu: vec![0.0; m],
            nu: vec![1.0; m],
            history: Vec::new(),
        }
    }

    /// Applies one update for mean violations `v_i` (allocated minus independent cost).
    pub fn step(&mut self, violations: &[f64], rule: DualRule) {
        for ((mu, &nu), &v) in self.mu.iter_mut().zip(&self.nu).zip(violations) {
            *mu = match rule {
                DualRule::AsWritten => *mu + nu * positive_part(v),
                DualRule::Projected => positive_part(*mu + nu * v),
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    /// One step for every producer, or a single shared value.
    pub nu: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub w: f64,
    pub gamma_mode: GammaMode,
    /// Barrier floor relative to the mean training independent cost.
    pub epsilon_log: f64,
    /// Upper bound on the Euclidean norm of each primal step's gradient.
    pub grad_clip: f64,
    pub seed: u64,
    pub hidden_width: usize,
    pub activation: Activation,
    pub dual_rule: DualRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            nu: vec![1e-2],
            epochs: 500,
            batch_size: 64,
            w: 0.9,
            gamma_mode: GammaMode::Ge,
            epsilon_log: 1e-6,
            grad_clip: 10.0,
            seed: 42,
            hidden_width: 32,
            activation: Activation::Tanh,
            dual_rule: DualRule::AsWritten,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be > 0, got {}", self.lambda));
        }
        if self.nu.is_empty() || self.nu.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad(format!("nu must be > 0, got {:?}", self.nu));
        }
        if !(self.epsilon_log > 0.0 && self.epsilon_log.is_finite()) {
            return bad(format!("epsilon_log must be > 0, got {}", self.epsilon_log));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be > 0, got {}", self.grad_clip));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_width == 0 {
            return bad("epochs, batch_size and hidden_width must be >= 1".into());
        }
        AllocationPolicy::new(self.w, self.gamma_mode)?;
        Ok(())
    }

    pub fn policy(&self) -> Result<AllocationPolicy> {
        AllocationPolicy::new(self.w, self.gamma_mode)
    }

    pub fn nu_for(&self, m: usize) -> Result<Vec<f64>> {
        match self.nu.len() {
            1 => Ok(vec![self.nu[0]; m]),
            k if k == m => Ok(self.nu.clone()),
            k => Err(Error::Dimension {
                expected: m,
                got: k,
                context: "dual steps",
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch objective over the epoch.
    pub objective: f64,
    /// Mean batch excess per producer over the epoch.
    pub avg_excess: Vec<f64>,
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainStatus {
    Ok,
    /// Producers whose full-set excess ended below `-tol`.
    ConstraintFailure { producers: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    /// Full training-set excess per producer for the returned model.
    pub final_excess: Vec<f64>,
    pub tolerance: f64,
    pub status: TrainStatus,
}

impl TrainingReport {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let m = self.final_excess.len();
        let mut header = vec!["epoch".to_string(), "L_batch".to_string()];
        header.extend((1..=m).map(|i| format!("avg_excess_{i}")));
        header.extend((1..=m).map(|i| format!("mu_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string(), e.objective.to_string()];
            row.extend(e.avg_excess.iter().map(|v| v.to_string()));
            row.extend(e.mu.iter().map(|v| v.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Per-record values the trainers need, computed once.
struct Prepared {
    input: Vec<f64>,
    /// All series, hierarchy order.
    actual: Vec<f64>,
    penalties: Penalties,
    independent: Vec<f64>,
}

fn independent_costs(record: &ForecastRecord, m: usize) -> Vec<f64> {
    let p = record.hour.penalties();
    record
        .base
        .leaves(m)
        .iter()
        .zip(record.actual.leaves(m))
        .map(|(&o, &y)| imbalance_cost(o, y, &p))
        .collect()
}

fn prepare(model: &ReconModel, records: &[ForecastRecord]) -> Result<Vec<Prepared>> {
    let m = model.hierarchy.m();
    records
        .iter()
        .map(|r| {
            check_dim(model.hierarchy.n(), r.actual.len(), "actual")?;
            Ok(Prepared {
                input: model.network_input(&r.base, &r.context)?,
                actual: r.actual.0.clone(),
                penalties: r.hour.penalties(),
                independent: independent_costs(r, m),
            })
        })
        .collect()
}

/// Mean independent cost over records and producers.
pub fn mean_independent_cost(records: &[ForecastRecord], m: usize) -> f64 {
    if records.is_empty() || m == 0 {
        return 0.0;
    }
    let total: f64 = records
        .iter()
        .map(|r| independent_costs(r, m).iter().sum::<f64>())
        .sum();
    total / (records.len() * m) as f64
}

/// Absolute barrier floor for a training set.
pub fn barrier_floor(records: &[ForecastRecord], m: usize, relative: f64) -> f64 {
    (relative * mean_independent_cost(records, m)).max(f64::MIN_POSITIVE)
}

fn require_two_level(h: &Hierarchy) -> Result<()> {
    if !h.is_two_level() {
        return Err(Error::Config(
            "value-oriented training needs a two-level hierarchy".into(),
        ));
    }
    Ok(())
}

/// Scratch buffers for one batch.
struct Workspace {
    traces: Vec<ForwardTrace>,
    jacobians: Vec<Vec<Vec<f64>>>,
    costs: Vec<f64>,
    grad_out: Vec<f64>,
}

impl Workspace {
    fn new(m: usize) -> Self {
        Self {
            traces: Vec::new(),
            jacobians: Vec::new(),
            costs: vec![0.0; m],
            grad_out: vec![0.0; m],
        }
    }

    fn ensure(&mut self, batch: usize, m: usize) {
        if self.traces.len() < batch {
            self.traces.resize_with(batch, ForwardTrace::default);
            self.jacobians.resize_with(batch, || vec![vec![0.0; m]; m]);
        }
    }
}

/// Leaf values from a forward trace, clamped for linear maps. Returns the
/// clamp mask (true where the derivative passes through).
fn latent_from_trace(trace: &ForwardTrace, linear: bool, caps: &[f64], h: &mut Vec<f64>) -> Vec<bool> {
    h.clear();
    let mut pass = Vec::with_capacity(caps.len());
    for (&v, &u) in trace.output.iter().zip(caps) {
        if linear {
            let c = v.clamp(0.0, u);
            pass.push(c == v && v > 0.0 && v < u);
            h.push(c);
        } else {
            pass.push(true);
            h.push(v);
        }
    }
    pass
}

/// Batch quantities of the value objective.
struct ValueBatch {
    /// Mean over the batch of `independent - allocated`, per producer.
    excess: Vec<f64>,
    masks: Vec<Vec<bool>>,
}

fn value_forward(
    params: &MlpParams,
    linear: bool,
    caps: &[f64],
    batch: &[&Prepared],
    policy: &AllocationPolicy,
    ws: &mut Workspace,
) -> ValueBatch {
    let m = caps.len();
    ws.ensure(batch.len(), m);
    let mut excess = vec![0.0; m];
    let mut masks = Vec::with_capacity(batch.len());
    let mut h = Vec::with_capacity(m);
    for (b, rec) in batch.iter().enumerate() {
        params.forward_into(&rec.input, &mut ws.traces[b]);
        masks.push(latent_from_trace(&ws.traces[b], linear, caps, &mut h));
        allocated_costs_with_jacobian(
            policy,
            &h,
            &rec.actual[1..],
            rec.actual[0],
            &rec.penalties,
            &mut ws.costs,
            &mut ws.jacobians[b],
        );
        for i in 0..m {
            excess[i] += rec.independent[i] - ws.costs[i];
        }
    }
    let n = batch.len() as f64;
    excess.iter_mut().for_each(|e| *e /= n);
    ValueBatch { excess, masks }
}

fn nash_value(excess: &[f64], eps: f64) -> f64 {
    excess.iter().map(|&e| -e.max(eps).ln()).sum()
}

fn lagrangian_value(excess: &[f64], mu: &[f64], eps: f64) -> f64 {
    nash_value(excess, eps)
        + mu
            .iter()
            .zip(excess)
            .map(|(&u, &e)| u * positive_part(-e))
            .sum::<f64>()
}

/// `dL/dE_i`: barrier slope where the floor is inactive plus the hinge slope.
fn lagrangian_slopes(excess: &[f64], mu: &[f64], eps: f64) -> Vec<f64> {
    excess
        .iter()
        .zip(mu)
        .map(|(&e, &u)| {
            let barrier = if e > eps { -1.0 / e } else { 0.0 };
            let hinge = if e < 0.0 { -u } else { 0.0 };
            barrier + hinge
        })
        .collect()
}

fn value_backward(
    params: &MlpParams,
    batch_len: usize,
    vb: &ValueBatch,
    slopes: &[f64],
    ws: &mut Workspace,
    grads: &mut GradientBundle,
) {
    let m = slopes.len();
    let n = batch_len as f64;
    for b in 0..batch_len {
        let jac = &ws.jacobians[b];
        for j in 0..m {
            // dE_i/dh_j = -(1/B) dc_i/dh_j.
            let mut g = 0.0;
            for i in 0..m {
                g -= slopes[i] * jac[i][j];
            }
            ws.grad_out[j] = if vb.masks[b][j] { g / n } else { 0.0 };
        }
        params.backward_accumulate(&ws.traces[b], &ws.grad_out, grads);
    }
}

fn learned_parts(model: &ReconModel) -> Result<(&MlpParams, bool)> {
    match &model.network {
        Some(net) => Ok((&net.params, model.kind.is_linear())),
        None => Err(Error::Config("model has no trainable parameters".into())),
    }
}

/// Batch excess `mean(independent - allocated)` per producer for any model.
pub fn batch_excess(
    records: &[ForecastRecord],
    model: &ReconModel,
    policy: &AllocationPolicy,
) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    require_two_level(&model.hierarchy)?;
    let m = model.hierarchy.m();
    let mut excess = vec![0.0; m];
    let mut costs = vec![0.0; m];
    let mut jac = vec![vec![0.0; m]; m];
    for r in records {
        let h = model.latent(&r.base, &r.context)?;
        allocated_costs_with_jacobian(
            policy,
            &h,
            r.actual.leaves(m),
            r.actual.total(),
            &r.hour.penalties(),
            &mut costs,
            &mut jac,
        );
        let indep = independent_costs(r, m);
        for i in 0..m {
            excess[i] += indep[i] - costs[i];
        }
    }
    excess.iter_mut().for_each(|e| *e /= records.len() as f64);
    Ok(excess)
}

/// `sum_i -log(max(E_i, eps))` with `E_i` the batch mean excess of producer `i`.
pub fn nash_objective(
    records: &[ForecastRecord],
    model: &ReconModel,
    policy: &AllocationPolicy,
    eps: f64,
) -> Result<f64> {
    Ok(nash_value(&batch_excess(records, model, policy)?, eps))
}

/// Nash objective plus `sum_i mu_i [-E_i]^+`.
pub fn lagrangian(
    records: &[ForecastRecord],
    model: &ReconModel,
    dual: &DualState,
    policy: &AllocationPolicy,
    eps: f64,
) -> Result<f64> {
    let excess = batch_excess(records, model, policy)?;
    check_dim(excess.len(), dual.mu.len(), "multipliers")?;
    Ok(lagrangian_value(&excess, &dual.mu, eps))
}

/// Analytic gradient of [`lagrangian`] with respect to the network parameters.
pub fn primal_grad(
    records: &[ForecastRecord],
    model: &ReconModel,
    dual: &DualState,
    policy: &AllocationPolicy,
    eps: f64,
) -> Result<GradientBundle> {
    if records.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    require_two_level(&model.hierarchy)?;
    let (params, linear) = learned_parts(model)?;
    check_dim(model.hierarchy.m(), dual.mu.len(), "multipliers")?;
    let prepared = prepare(model, records)?;
    let batch: Vec<&Prepared> = prepared.iter().collect();
    let mut ws = Workspace::new(model.hierarchy.m());
    let vb = value_forward(params, linear, &model.capacities, &batch, policy, &mut ws);
    let slopes = lagrangian_slopes(&vb.excess, &dual.mu, eps);
    let mut grads = GradientBundle::zeros_like(params);
    value_backward(params, batch.len(), &vb, &slopes, &mut ws, &mut grads);
    if !grads.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            reason: "non-finite gradient".into(),
        });
    }
    Ok(grads)
}

/// Largest relative deviation between [`primal_grad`] and central finite
/// differences of [`lagrangian`] with perturbation `step`. Entries six orders
/// of magnitude below the gradient's largest entry count as agreeing.
pub fn gradient_error(
    records: &[ForecastRecord],
    model: &ReconModel,
    dual: &DualState,
    policy: &AllocationPolicy,
    eps: f64,
    step: f64,
) -> Result<f64> {
    let analytic: Vec<f64> = primal_grad(records, model, dual, policy, eps)?.iter().collect();
    let theta = learned_parts(model)?.0.flat();
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(theta.len());
    let mut t = theta.clone();
    for k in 0..theta.len() {
        t[k] = theta[k] + step;
        probe.network_mut().unwrap().params.set_flat(&t)?;
        let up = lagrangian(records, &probe, dual, policy, eps)?;
        t[k] = theta[k] - step;
        probe.network_mut().unwrap().params.set_flat(&t)?;
        let down = lagrangian(records, &probe, dual, policy, eps)?;
        t[k] = theta[k];
        numeric.push((up - down) / (2.0 * step));
    }
    let scale = analytic.iter().fold(0.0f64, |a, g| a.max(g.abs())).max(1e-8);
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            if a.abs().max(n.abs()) < 1e-6 * scale {
                0.0
            } else {
                relative_error(*a, *n)
            }
        })
        .fold(0.0, f64::max))
}

/// One dual step from the batch violations of `model`.
pub fn dual_update(
    dual: &DualState,
    records: &[ForecastRecord],
    model: &ReconModel,
    policy: &AllocationPolicy,
    rule: DualRule,
) -> Result<DualState> {
    let excess = batch_excess(records, model, policy)?;
    check_dim(excess.len(), dual.mu.len(), "multipliers")?;
    let violations: Vec<f64> = excess.iter().map(|e| -e).collect();
    let mut next = dual.clone();
    next.step(&violations, rule);
    Ok(next)
}

fn raw_inputs(kind: ReconKind, records: &[ForecastRecord]) -> Vec<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            let mut v = r.base.0.clone();
            if kind.uses_context() {
                v.extend_from_slice(&r.context);
            }
            v
        })
        .collect()
}

/// Fresh untrained model: Glorot-initialized MLP with scaled-sigmoid output for
/// learned kinds, the bottom-up map for linear kinds.
pub fn initial_model(
    kind: ReconKind,
    hierarchy: &Hierarchy,
    records: &[ForecastRecord],
    capacities: &[f64],
    config: &TrainConfig,
) -> Result<ReconModel> {
    if records.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if kind == ReconKind::BottomUp {
        return Ok(ReconModel::bottom_up(hierarchy.clone()));
    }
    let m = hierarchy.m();
    let n = hierarchy.n();
    check_dim(m, capacities.len(), "capacities")?;
    for r in records {
        check_dim(n, r.base.len(), "base forecast")?;
        check_dim(records[0].context.len(), r.context.len(), "context")?;
    }
    let raw = raw_inputs(kind, records);
    let scaler = Standardizer::fit(raw.iter().map(|v| v.as_slice()))?;
    let dim = raw[0].len();
    let params = if kind.is_linear() {
        let k = hierarchy.n_aggregates();
        let mut layer = Dense::zeros(dim, m);
        for j in 0..m {
            layer.weights[j * dim + k + j] = scaler.std[k + j];
            layer.bias[j] = scaler.mean[k + j];
        }
        MlpParams::from_layers(vec![layer], config.activation, OutputBound::Identity)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        MlpParams::init(
            &[dim, config.hidden_width, m],
            config.activation,
            OutputBound::ScaledSigmoid(capacities.to_vec()),
            &mut rng,
        )?
    };
    ReconModel::from_network(
        kind,
        hierarchy.clone(),
        NetworkFile {
            params,
            scaler,
            seed: config.seed,
        },
        capacities.to_vec(),
    )
}

fn check_training_set(records: &[ForecastRecord], config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if config.batch_size > records.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds training set of {}",
            config.batch_size,
            records.len()
        )));
    }
    Ok(())
}

/// Squared error over all series of `S h` for one prepared record, and its
/// gradient with respect to `h`.
fn squared_error_grad(s: &[Vec<i64>], h: &[f64], actual: &[f64], grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for (row, &y) in s.iter().zip(actual) {
        let pred: f64 = row.iter().zip(h).map(|(&a, &v)| a as f64 * v).sum();
        let r = pred - y;
        loss += r * r;
        for (g, &a) in grad.iter_mut().zip(row) {
            *g += 2.0 * r * a as f64;
        }
    }
    loss
}

/// Mean over records of the total squared error of the reconciled vector.
pub fn quality_loss(records: &[ForecastRecord], model: &ReconModel) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Data("empty record set".into()));
    }
    let mut total = 0.0;
    for r in records {
        let rec = model.reconcile(&r.base, &r.context)?;
        total += rec
            .as_slice()
            .iter()
            .zip(r.actual.as_slice())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(total / records.len() as f64)
}

/// Minibatch SGD on the total squared error of `S h` (quality-oriented).
/// Returns the model and a loss trace: the loss of the initial model followed
/// by the running mean loss of every epoch.
pub fn train_quality(
    kind: ReconKind,
    hierarchy: &Hierarchy,
    records: &[ForecastRecord],
    capacities: &[f64],
    config: &TrainConfig,
) -> Result<(ReconModel, Vec<f64>)> {
    if !matches!(kind, ReconKind::QualityLearned | ReconKind::QualityLinear) {
        return Err(Error::Config(format!("{kind} is not a quality-oriented kind")));
    }
    check_training_set(records, config)?;
    let mut model = initial_model(kind, hierarchy, records, capacities, config)?;
    let prepared = prepare(&model, records)?;
    let s = hierarchy.structural_matrix();
    let m = hierarchy.m();
    let linear = kind.is_linear();
    let caps = capacities.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut trace = ForwardTrace::default();
    let mut h = Vec::with_capacity(m);
    let mut grad_h = vec![0.0; m];
    let mut loss_trace = vec![quality_loss(records, &model)?];
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let params = &mut model.network.as_mut().unwrap().params;
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut grads = GradientBundle::zeros_like(params);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let rec = &prepared[i];
                params.forward_into(&rec.input, &mut trace);
                let mask = latent_from_trace(&trace, linear, &caps, &mut h);
                epoch_loss += squared_error_grad(&s, &h, &rec.actual, &mut grad_h);
                for j in 0..m {
                    grad_h[j] = if mask[j] { grad_h[j] * scale } else { 0.0 };
                }
                params.backward_accumulate(&trace, &grad_h, &mut grads);
            }
            params.apply_sgd(&grads, config.lambda).map_err(|_| Error::Divergence {
                epoch,
                reason: "non-finite squared-error gradient".into(),
            })?;
        }
        let mean = epoch_loss / prepared.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: "non-finite squared error".into(),
            });
        }
        log::debug!("quality epoch {epoch}: running loss {mean}");
        loss_trace.push(mean);
    }
    Ok((model, loss_trace))
}

/// Primal-dual training of a value-oriented map: every iteration samples a
/// batch, takes an SGD step on the batch Lagrangian at the current multipliers
/// and then raises each multiplier by its step times the batch violation.
pub fn train_value(
    kind: ReconKind,
    hierarchy: &Hierarchy,
    records: &[ForecastRecord],
    capacities: &[f64],
    config: &TrainConfig,
) -> Result<(ReconModel, DualState, TrainingReport)> {
    if !kind.is_value() {
        return Err(Error::Config(format!("{kind} is not a value-oriented kind")));
    }
    require_two_level(hierarchy)?;
    check_training_set(records, config)?;
    let m = hierarchy.m();
    let policy = config.policy()?;
    let eps = barrier_floor(records, m, config.epsilon_log);
    let mut model = initial_model(kind, hierarchy, records, capacities, config)?;
    let prepared = prepare(&model, records)?;
    let linear = kind.is_linear();
    let caps = capacities.to_vec();
    let mut dual = DualState::new(config.nu_for(m)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut ws = Workspace::new(m);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut objective_sum = 0.0;
        let mut excess_sum = vec![0.0; m];
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let params = &mut model.network.as_mut().unwrap().params;
            let vb = value_forward(params, linear, &caps, &batch, &policy, &mut ws);
            let objective = lagrangian_value(&vb.excess, &dual.mu, eps);
            if !objective.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: "non-finite batch Lagrangian".into(),
                });
            }
            let slopes = lagrangian_slopes(&vb.excess, &dual.mu, eps);
            let mut grads = GradientBundle::zeros_like(params);
            value_backward(params, batch.len(), &vb, &slopes, &mut ws, &mut grads);
            grads.clip_norm(config.grad_clip);
            params.apply_sgd(&grads, config.lambda).map_err(|_| Error::Divergence {
                epoch,
                reason: "non-finite Lagrangian gradient".into(),
            })?;
            let violations: Vec<f64> = vb.excess.iter().map(|e| -e).collect();
            dual.step(&violations, config.dual_rule);
            objective_sum += objective;
            for i in 0..m {
                excess_sum[i] += vb.excess[i];
            }
            batches += 1;
        }
        let nb = batches as f64;
        let avg_excess: Vec<f64> = excess_sum.iter().map(|e| e / nb).collect();
        dual.history
            .push(avg_excess.iter().map(|e| -e).collect());
        log::debug!("value epoch {epoch}: L {} excess {avg_excess:?}", objective_sum / nb);
        epochs.push(EpochRecord {
            epoch,
            objective: objective_sum / nb,
            avg_excess,
            mu: dual.mu.clone(),
        });
    }
    let final_excess = batch_excess(records, &model, &policy)?;
    let tolerance = 1e-6 * mean_independent_cost(records, m);
    let failing: Vec<usize> = final_excess
        .iter()
        .enumerate()
        .filter(|(_, &e)| e < -tolerance)
        .map(|(i, _)| i)
        .collect();
    let status = if failing.is_empty() {
        TrainStatus::Ok
    } else {
        TrainStatus::ConstraintFailure { producers: failing }
    };
    Ok((
        model,
        dual,
        TrainingReport {
            epochs,
            final_excess,
            tolerance,
            status,
        },
    ))
}
