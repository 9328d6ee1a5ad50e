//! Weighted proportional cost allocation inside a two-level portfolio.
//!
//! Producer `i` is charged
//! `c_i^AG = (1 - w) c(h_i, y_i) + w gamma_i c(h_sum, y_sum)`
//! where `h` are the reconciled leaf forecasts (pseudo-offers, never traded)
//! and `h_sum` is the aggregate offer the portfolio manager actually submits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::hierarchy::SeriesVector;
use crate::market::{imbalance_cost, imbalance_cost_slope, Penalties};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaMode {
    /// Share of actual generation.
    #[default]
    Ge,
    /// Share of pseudo-offer cost.
    Pc,
}

impl fmt::Display for GammaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GammaMode::Ge => "ge",
            GammaMode::Pc => "pc",
        })
    }
}

impl FromStr for GammaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ge" => Ok(GammaMode::Ge),
            "pc" => Ok(GammaMode::Pc),
            other => Err(Error::Config(format!("unknown gamma mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationPolicy {
    w: f64,
    gamma_mode: GammaMode,
}

impl AllocationPolicy {
    pub fn new(w: f64, gamma_mode: GammaMode) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Config(format!("allocation weight {w} outside [0, 1]")));
        }
        Ok(Self { w, gamma_mode })
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn gamma_mode(&self) -> GammaMode {
        self.gamma_mode
    }
}

/// Per-hour outcome of the allocation rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettlementBreakdown {
    pub allocated: Vec<f64>,
    pub aggregate_cost: f64,
    pub pseudo_costs: Vec<f64>,
    pub gammas: Vec<f64>,
    pub pm_payoff: f64,
    /// Only known when the independent (base) offers are supplied.
    pub extra_profit: Option<f64>,
}

impl SettlementBreakdown {
    pub fn csv_header(m: usize) -> Vec<String> {
        let mut h: Vec<String> = ["t", "w", "gamma_mode", "c_sum"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((1..=m).map(|i| format!("c_agg_{i}")));
        h.extend((1..=m).map(|i| format!("c_pseudo_{i}")));
        h.extend((1..=m).map(|i| format!("gamma_{i}")));
        h.push("R".into());
        h.push("R_pm".into());
        h
    }

    pub fn csv_row(&self, t: i64, policy: &AllocationPolicy) -> Vec<String> {
        let mut row = vec![
            t.to_string(),
            policy.w().to_string(),
            policy.gamma_mode().to_string(),
            self.aggregate_cost.to_string(),
        ];
        row.extend(self.allocated.iter().map(f64::to_string));
        row.extend(self.pseudo_costs.iter().map(f64::to_string));
        row.extend(self.gammas.iter().map(f64::to_string));
        row.push(self.extra_profit.map(|r| r.to_string()).unwrap_or_default());
        row.push(self.pm_payoff.to_string());
        row
    }
}

fn split_two_level<'a>(v: &'a SeriesVector, what: &'static str) -> Result<(f64, &'a [f64])> {
    if v.len() < 2 {
        return Err(Error::Dimension {
            expected: 2,
            got: v.len(),
            context: what,
        });
    }
    Ok((v.0[0], &v.0[1..]))
}

fn check_actuals(actual: &[f64]) -> Result<()> {
    if let Some(bad) = actual.iter().find(|&&y| y < 0.0 || !y.is_finite()) {
        return Err(Error::Data(format!("negative or non-finite generation {bad}")));
    }
    Ok(())
}

pub fn pseudo_costs(leaves: &[f64], actual_leaves: &[f64], penalties: &Penalties) -> Vec<f64> {
    leaves
        .iter()
        .zip(actual_leaves)
        .map(|(&h, &y)| imbalance_cost(h, y, penalties))
        .collect()
}

fn generation_shares(actual_leaves: &[f64], actual_total: f64) -> Vec<f64> {
    let m = actual_leaves.len();
    if actual_total == 0.0 {
        vec![1.0 / m as f64; m]
    } else {
        actual_leaves.iter().map(|&y| y / actual_total).collect()
    }
}

fn cost_shares(pseudo: &[f64]) -> Vec<f64> {
    let m = pseudo.len();
    let total: f64 = pseudo.iter().sum();
    if total == 0.0 {
        vec![1.0 / m as f64; m]
    } else {
        pseudo.iter().map(|&c| c / total).collect()
    }
}

/// Cost shares `gamma_i`, non-negative and summing to one.
pub fn gammas(
    mode: GammaMode,
    reconciled: &SeriesVector,
    actual: &SeriesVector,
    penalties: &Penalties,
) -> Result<Vec<f64>> {
    let (_, leaves) = split_two_level(reconciled, "reconciled vector")?;
    let (y_sum, y) = split_two_level(actual, "actual vector")?;
    check_dim(leaves.len(), y.len(), "actual leaves")?;
    check_actuals(actual.as_slice())?;
    Ok(match mode {
        GammaMode::Ge => generation_shares(y, y_sum),
        GammaMode::Pc => cost_shares(&pseudo_costs(leaves, y, penalties)),
    })
}

/// Applies the allocation rule to one hour.
pub fn allocate(
    policy: &AllocationPolicy,
    reconciled: &SeriesVector,
    actual: &SeriesVector,
    penalties: &Penalties,
) -> Result<SettlementBreakdown> {
    let (h_sum, leaves) = split_two_level(reconciled, "reconciled vector")?;
    let (y_sum, y) = split_two_level(actual, "actual vector")?;
    check_dim(leaves.len(), y.len(), "actual leaves")?;
    check_actuals(actual.as_slice())?;
    let leaf_sum: f64 = leaves.iter().sum();
    let scale = 1.0 + reconciled.0.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if (h_sum - leaf_sum).abs() > 1e-6 * scale {
        return Err(Error::Incoherent {
            residual: h_sum - leaf_sum,
        });
    }

    let pseudo = pseudo_costs(leaves, y, penalties);
    let aggregate_cost = imbalance_cost(h_sum, y_sum, penalties);
    let gammas = match policy.gamma_mode {
        GammaMode::Ge => generation_shares(y, y_sum),
        GammaMode::Pc => cost_shares(&pseudo),
    };
    let w = policy.w;
    let allocated = pseudo
        .iter()
        .zip(&gammas)
        .map(|(&c, &g)| (1.0 - w) * c + w * g * aggregate_cost)
        .collect();
    let pseudo_total: f64 = pseudo.iter().sum();
    Ok(SettlementBreakdown {
        allocated,
        aggregate_cost,
        pseudo_costs: pseudo,
        gammas,
        pm_payoff: (1.0 - w) * (pseudo_total - aggregate_cost),
        extra_profit: None,
    })
}

/// Allocation plus the extra profit relative to independent offering.
pub fn settle(
    policy: &AllocationPolicy,
    base_offers: &[f64],
    reconciled: &SeriesVector,
    actual: &SeriesVector,
    penalties: &Penalties,
) -> Result<SettlementBreakdown> {
    let mut breakdown = allocate(policy, reconciled, actual, penalties)?;
    breakdown.extra_profit = Some(extra_profit(
        base_offers,
        reconciled.total(),
        actual,
        penalties,
    )?);
    Ok(breakdown)
}

/// `R = sum_i c(base_i, y_i) - c(reconciled_sum, y_sum)`. May be negative for a
/// single hour.
pub fn extra_profit(
    base_offers: &[f64],
    reconciled_sum: f64,
    actual: &SeriesVector,
    penalties: &Penalties,
) -> Result<f64> {
    let (y_sum, y) = split_two_level(actual, "actual vector")?;
    check_dim(y.len(), base_offers.len(), "base offers")?;
    let independent: f64 = pseudo_costs(base_offers, y, penalties).iter().sum();
    Ok(independent - imbalance_cost(reconciled_sum, y_sum, penalties))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitCostCondition {
    Holds,
    Violated,
    /// Some producer (or the portfolio) generated nothing.
    Inapplicable,
}

/// Aggregate cost per MWh no larger than any producer's pseudo-offer cost per MWh.
pub fn check_unit_cost_condition(
    reconciled: &SeriesVector,
    actual: &SeriesVector,
    penalties: &Penalties,
) -> UnitCostCondition {
    let (Ok((h_sum, leaves)), Ok((y_sum, y))) = (
        split_two_level(reconciled, "reconciled"),
        split_two_level(actual, "actual"),
    ) else {
        return UnitCostCondition::Inapplicable;
    };
    if leaves.len() != y.len() || y_sum <= 0.0 || y.iter().any(|&v| v <= 0.0) {
        return UnitCostCondition::Inapplicable;
    }
    let unit_aggregate = imbalance_cost(h_sum, y_sum, penalties) / y_sum;
    let holds = leaves
        .iter()
        .zip(y)
        .all(|(&h, &yi)| unit_aggregate <= imbalance_cost(h, yi, penalties) / yi);
    if holds {
        UnitCostCondition::Holds
    } else {
        UnitCostCondition::Violated
    }
}

/// Allocated costs for leaf pseudo-offers `h` together with the Jacobian
/// `jac[i][j] = d c_i^AG / d h_j` (hinge kinks take slope 0, zero-denominator
/// share fallbacks are constant). Used by the trainers; `h` is coherent by
/// construction.
pub(crate) fn allocated_costs_with_jacobian(
    policy: &AllocationPolicy,
    h: &[f64],
    actual_leaves: &[f64],
    actual_total: f64,
    penalties: &Penalties,
    costs: &mut [f64],
    jac: &mut [Vec<f64>],
) {
    let m = h.len();
    let w = policy.w;
    let h_sum: f64 = h.iter().sum();
    let agg_cost = imbalance_cost(h_sum, actual_total, penalties);
    let agg_slope = imbalance_cost_slope(h_sum, actual_total, penalties);
    let pseudo: Vec<f64> = (0..m)
        .map(|i| imbalance_cost(h[i], actual_leaves[i], penalties))
        .collect();
    let slopes: Vec<f64> = (0..m)
        .map(|i| imbalance_cost_slope(h[i], actual_leaves[i], penalties))
        .collect();
    match policy.gamma_mode {
        GammaMode::Ge => {
            let g = generation_shares(actual_leaves, actual_total);
            for i in 0..m {
                costs[i] = (1.0 - w) * pseudo[i] + w * g[i] * agg_cost;
                for j in 0..m {
                    let own = if i == j { (1.0 - w) * slopes[i] } else { 0.0 };
                    jac[i][j] = own + w * g[i] * agg_slope;
                }
            }
        }
        GammaMode::Pc => {
            let total: f64 = pseudo.iter().sum();
            if total == 0.0 {
                let g = 1.0 / m as f64;
                for i in 0..m {
                    costs[i] = (1.0 - w) * pseudo[i] + w * g * agg_cost;
                    for j in 0..m {
                        let own = if i == j { (1.0 - w) * slopes[i] } else { 0.0 };
                        jac[i][j] = own + w * g * agg_slope;
                    }
                }
            } else {
                for i in 0..m {
                    let g = pseudo[i] / total;
                    costs[i] = (1.0 - w) * pseudo[i] + w * g * agg_cost;
                    for j in 0..m {
                        let own_slope = if i == j { slopes[i] } else { 0.0 };
                        let dg = (own_slope * total - pseudo[i] * slopes[j]) / (total * total);
                        jac[i][j] = (1.0 - w) * own_slope + w * (dg * agg_cost + g * agg_slope);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::Hierarchy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pen() -> Penalties {
        Penalties::new(12.0, 4.0).unwrap()
    }

    fn sv(v: &[f64]) -> SeriesVector {
        SeriesVector(v.to_vec())
    }

    #[test]
    fn generation_share_examples() {
        let g = gammas(GammaMode::Ge, &sv(&[4.0, 1.0, 1.0, 2.0]), &sv(&[4.0, 1.0, 1.0, 2.0]), &pen())
            .unwrap();
        assert_eq!(g, vec![0.25, 0.25, 0.5]);
        let g = gammas(GammaMode::Ge, &sv(&[1.0; 5]), &sv(&[0.0; 5]), &pen()).unwrap();
        assert_eq!(g, vec![0.25; 4]);
        assert!(gammas(GammaMode::Ge, &sv(&[1.0, 1.0]), &sv(&[-1.0, -1.0]), &pen()).is_err());
    }

    #[test]
    fn cost_share_example() {
        // Pseudo costs (6, 2): leaf 1 under-offers by 0.5, leaf 2 over-offers by 0.5.
        let rec = sv(&[3.0, 1.0, 2.0]);
        let act = sv(&[3.0, 1.5, 1.5]);
        let g = gammas(GammaMode::Pc, &rec, &act, &pen()).unwrap();
        assert!((g[0] - 0.75).abs() < 1e-12 && (g[1] - 0.25).abs() < 1e-12);
        // Zero pseudo cost falls back to equal shares.
        let g = gammas(GammaMode::Pc, &act, &act, &pen()).unwrap();
        assert_eq!(g, vec![0.5, 0.5]);
    }

    #[test]
    fn boundary_weights() {
        let rec = sv(&[3.0, 1.0, 2.0]);
        let act = sv(&[3.2, 1.5, 1.7]);
        let b0 = allocate(&AllocationPolicy::new(0.0, GammaMode::Ge).unwrap(), &rec, &act, &pen())
            .unwrap();
        assert_eq!(b0.allocated, b0.pseudo_costs);
        let b1 = allocate(&AllocationPolicy::new(1.0, GammaMode::Ge).unwrap(), &rec, &act, &pen())
            .unwrap();
        for i in 0..2 {
            assert_eq!(b1.allocated[i], b1.gammas[i] * b1.aggregate_cost);
        }
        assert_eq!(b1.pm_payoff, 0.0);
    }

    #[test]
    fn half_weight_hand_example() {
        // Equal actuals give gamma^ge = (0.5, 0.5); pseudo costs (6, 2), aggregate cost 4.
        let policy = AllocationPolicy::new(0.5, GammaMode::Ge).unwrap();
        let p = Penalties::new(8.0, 8.0).unwrap();
        let rec = sv(&[2.5, 0.75, 1.75]);
        let act = sv(&[3.0, 1.5, 1.5]);
        let b = allocate(&policy, &rec, &act, &p).unwrap();
        assert_eq!(b.pseudo_costs, vec![6.0, 2.0]);
        assert_eq!(b.aggregate_cost, 4.0);
        assert_eq!(b.gammas, vec![0.5, 0.5]);
        assert_eq!(b.allocated, vec![4.0, 2.0]);
        assert_eq!(b.pm_payoff, 2.0);
    }

    #[test]
    fn incoherent_reconciliation_rejected() {
        let policy = AllocationPolicy::new(0.5, GammaMode::Ge).unwrap();
        let err = allocate(&policy, &sv(&[3.5, 1.0, 2.0]), &sv(&[3.0, 1.0, 2.0]), &pen());
        assert!(matches!(err, Err(Error::Incoherent { .. })));
        assert!(AllocationPolicy::new(1.2, GammaMode::Ge).is_err());
    }

    #[test]
    fn extra_profit_examples() {
        let act = sv(&[3.0, 1.2, 1.8]);
        let r = extra_profit(&[1.0, 2.0], 3.0, &act, &pen()).unwrap();
        let independent = imbalance_cost(1.0, 1.2, &pen()) + imbalance_cost(2.0, 1.8, &pen());
        assert!((r - independent).abs() < 1e-12 && r >= 0.0);
        let r = extra_profit(&[1.2, 1.8], 2.5, &act, &pen()).unwrap();
        assert!((r + imbalance_cost(2.5, 3.0, &pen())).abs() < 1e-12 && r <= 0.0);
    }

    #[test]
    fn unit_cost_condition_cases() {
        let act = sv(&[3.0, 1.2, 1.8]);
        assert_eq!(
            check_unit_cost_condition(&sv(&[3.0, 1.0, 2.0]), &act, &pen()),
            UnitCostCondition::Holds
        );
        let single = sv(&[1.3, 1.3]);
        assert_eq!(
            check_unit_cost_condition(&single, &sv(&[1.0, 1.0]), &pen()),
            UnitCostCondition::Holds
        );
        assert_eq!(
            check_unit_cost_condition(&sv(&[3.0, 1.0, 2.0]), &sv(&[1.0, 0.0, 1.0]), &pen()),
            UnitCostCondition::Inapplicable
        );
        // Leaf 1 exact, aggregate off: violated.
        assert_eq!(
            check_unit_cost_condition(&sv(&[3.2, 1.2, 2.0]), &act, &pen()),
            UnitCostCondition::Violated
        );
    }

    #[test]
    fn unit_cost_condition_matches_direct_comparison() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Hierarchy::two_level(3).unwrap();
        for _ in 0..2000 {
            let leaves: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..3.0)).collect();
            let ys: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..3.0)).collect();
            let rec = h.aggregate(&leaves).unwrap();
            let act = h.aggregate(&ys).unwrap();
            let p = Penalties::new(rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)).unwrap();
            let agg = imbalance_cost(rec.total(), act.total(), &p) / act.total();
            let direct = (0..3).all(|i| agg <= imbalance_cost(leaves[i], ys[i], &p) / ys[i]);
            let got = check_unit_cost_condition(&rec, &act, &p);
            assert_eq!(got == UnitCostCondition::Holds, direct);
        }
    }

    #[test]
    fn jacobian_matches_difference_quotients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mode in [GammaMode::Ge, GammaMode::Pc] {
            for _ in 0..200 {
                let m = rng.random_range(1..5);
                let policy = AllocationPolicy::new(rng.random_range(0.0..1.0), mode).unwrap();
                let p = Penalties::new(rng.random_range(0.1..20.0), rng.random_range(0.1..20.0))
                    .unwrap();
                let h: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..3.0)).collect();
                let y: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..3.0)).collect();
                let ys: f64 = y.iter().sum();
                let mut c = vec![0.0; m];
                let mut jac = vec![vec![0.0; m]; m];
                allocated_costs_with_jacobian(&policy, &h, &y, ys, &p, &mut c, &mut jac);
                let eps = 1e-7;
                for j in 0..m {
                    let mut hp = h.clone();
                    hp[j] += eps;
                    let mut hm = h.clone();
                    hm[j] -= eps;
                    let mut cp = vec![0.0; m];
                    let mut cm = vec![0.0; m];
                    let mut scratch = vec![vec![0.0; m]; m];
                    allocated_costs_with_jacobian(&policy, &hp, &y, ys, &p, &mut cp, &mut scratch);
                    allocated_costs_with_jacobian(&policy, &hm, &y, ys, &p, &mut cm, &mut scratch);
                    for i in 0..m {
                        let fd = (cp[i] - cm[i]) / (2.0 * eps);
                        assert!(
                            (fd - jac[i][j]).abs() < 1e-5 * (1.0 + fd.abs()),
                            "{mode} i={i} j={j} fd={fd} an={}",
                            jac[i][j]
                        );
                    }
                }
            }
        }
    }
}
