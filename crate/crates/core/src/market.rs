//! Forward-market settlement under dual-price imbalance settlement.
//!
//! A producer offers `offer` MWh at the forward price and delivers `actual`.
//! Shortfalls are bought back at the up-regulation price and surpluses are
//! sold at the down-regulation price. All prices are price-taker inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `[x]^+`.
#[inline]
pub fn positive_part(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Prices for one delivery hour (currency/MWh).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketHour {
    t: i64,
    pi_f: f64,
    pi_up: f64,
    pi_dw: f64,
}

impl MarketHour {
    /// Validates `pi_up >= pi_f >= pi_dw` with finite prices.
    pub fn new(t: i64, pi_f: f64, pi_up: f64, pi_dw: f64) -> Result<Self> {
        if !(pi_f.is_finite() && pi_up.is_finite() && pi_dw.is_finite()) {
            return Err(Error::Config(format!(
                "hour {t}: non-finite price ({pi_f}, {pi_up}, {pi_dw})"
            )));
        }
        if pi_up < pi_f {
            return Err(Error::Config(format!(
                "hour {t}: up-regulation price {pi_up} below forward price {pi_f}"
            )));
        }
        if pi_dw > pi_f {
            return Err(Error::Config(format!(
                "hour {t}: down-regulation price {pi_dw} above forward price {pi_f}"
            )));
        }
        Ok(Self {
            t,
            pi_f,
            pi_up,
            pi_dw,
        })
    }

    /// Builds an hour from a forward price and the two penalties.
    pub fn from_penalties(t: i64, pi_f: f64, penalties: Penalties) -> Result<Self> {
        Self::new(
            t,
            pi_f,
            pi_f + penalties.psi_minus,
            pi_f - penalties.psi_plus,
        )
    }

    pub fn t(&self) -> i64 {
        self.t
    }

    pub fn pi_f(&self) -> f64 {
        self.pi_f
    }

    pub fn pi_up(&self) -> f64 {
        self.pi_up
    }

    pub fn pi_dw(&self) -> f64 {
        self.pi_dw
    }

    /// True when at most one regulation price differs from the forward price,
    /// which is how realized hourly settlements look. Expected-value setups
    /// (both penalties positive) are still valid hours.
    pub fn is_single_sided(&self) -> bool {
        self.pi_up == self.pi_f || self.pi_dw == self.pi_f
    }

    pub fn penalties(&self) -> Penalties {
        penalties_from_hour(self)
    }
}

/// Overproduction (`psi_plus`) and underproduction (`psi_minus`) penalties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    psi_plus: f64,
    psi_minus: f64,
}

impl Penalties {
    pub fn new(psi_plus: f64, psi_minus: f64) -> Result<Self> {
        if !(psi_plus.is_finite() && psi_minus.is_finite()) {
            return Err(Error::Config(format!(
                "penalties must be finite, got ({psi_plus}, {psi_minus})"
            )));
        }
        if psi_plus < 0.0 || psi_minus < 0.0 {
            return Err(Error::Config(format!(
                "penalties must be non-negative, got ({psi_plus}, {psi_minus})"
            )));
        }
        Ok(Self {
            psi_plus,
            psi_minus,
        })
    }

    pub fn psi_plus(&self) -> f64 {
        self.psi_plus
    }

    pub fn psi_minus(&self) -> f64 {
        self.psi_minus
    }

    /// No imbalance incentive: every offer is costless.
    pub fn is_degenerate(&self) -> bool {
        self.psi_plus + self.psi_minus == 0.0
    }
}

/// Non-negative capped forward offer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Offer {
    quantity: f64,
    capacity_bound: f64,
}

impl Offer {
    pub fn new(quantity: f64, capacity_bound: f64) -> Result<Self> {
        if !(quantity.is_finite() && capacity_bound.is_finite()) || capacity_bound < 0.0 {
            return Err(Error::Config(format!(
                "invalid offer {quantity} with capacity {capacity_bound}"
            )));
        }
        if quantity < 0.0 || quantity > capacity_bound {
            return Err(Error::Config(format!(
                "offer {quantity} outside [0, {capacity_bound}]"
            )));
        }
        Ok(Self {
            quantity,
            capacity_bound,
        })
    }

    /// Clamps a raw quantity into the offer domain.
    pub fn clamped(quantity: f64, capacity_bound: f64) -> Self {
        let capacity_bound = capacity_bound.max(0.0);
        Self {
            quantity: quantity.clamp(0.0, capacity_bound),
            capacity_bound,
        }
    }

    pub fn quantity(&self) -> f64 {
        self.quantity
    }

    pub fn capacity_bound(&self) -> f64 {
        self.capacity_bound
    }
}

/// Settlement profit: forward revenue minus up-regulation purchases plus
/// down-regulation sales.
pub fn profit(offer: f64, actual: f64, hour: &MarketHour) -> f64 {
    hour.pi_f * offer - hour.pi_up * positive_part(offer - actual)
        + hour.pi_dw * positive_part(actual - offer)
}

/// Same profit written as oracle revenue minus imbalance cost.
pub fn profit_decomposed(offer: f64, actual: f64, hour: &MarketHour) -> f64 {
    hour.pi_f * actual - imbalance_cost(offer, actual, &hour.penalties())
}

/// `psi_plus [actual - offer]^+ + psi_minus [offer - actual]^+`, always `>= 0`.
#[inline]
pub fn imbalance_cost(offer: f64, actual: f64, penalties: &Penalties) -> f64 {
    penalties.psi_plus * positive_part(actual - offer)
        + penalties.psi_minus * positive_part(offer - actual)
}

/// Subgradient of [`imbalance_cost`] with respect to the offer. Zero at the kink.
#[inline]
pub fn imbalance_cost_slope(offer: f64, actual: f64, penalties: &Penalties) -> f64 {
    if offer > actual {
        penalties.psi_minus
    } else if offer < actual {
        -penalties.psi_plus
    } else {
        0.0
    }
}

/// Newsvendor-optimal quantile level `psi_plus / (psi_plus + psi_minus)`.
pub fn nominal_level(penalties: &Penalties) -> Result<f64> {
    let total = penalties.psi_plus + penalties.psi_minus;
    if total <= 0.0 {
        return Err(Error::DegenerateHour);
    }
    Ok(penalties.psi_plus / total)
}

pub fn penalties_from_hour(hour: &MarketHour) -> Penalties {
    // Hour invariants guarantee both differences are non-negative.
    Penalties {
        psi_plus: hour.pi_f - hour.pi_dw,
        psi_minus: hour.pi_up - hour.pi_f,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference_hour() -> MarketHour {
        MarketHour::new(0, 25.0, 29.0, 13.0).unwrap()
    }

    #[test]
    fn profit_hand_values() {
        let h = reference_hour();
        assert!((profit(1.0, 1.5, &h) - 31.5).abs() < 1e-12);
        assert_eq!(profit(2.0, 2.0, &h), 50.0);
        assert_eq!(profit(0.0, 0.0, &h), 0.0);
    }

    #[test]
    fn imbalance_cost_hand_values() {
        let p = Penalties::new(12.0, 4.0).unwrap();
        assert!((imbalance_cost(1.0, 1.5, &p) - 6.0).abs() < 1e-12);
        assert!((imbalance_cost(1.5, 1.0, &p) - 2.0).abs() < 1e-12);
        assert_eq!(imbalance_cost(0.7, 0.7, &p), 0.0);
    }

    #[test]
    fn nominal_levels() {
        let l = |a, b| nominal_level(&Penalties::new(a, b).unwrap()).unwrap();
        assert_eq!(l(12.0, 4.0), 0.75);
        assert_eq!(l(1.0, 1.0), 0.5);
        assert_eq!(l(0.0, 5.0), 0.0);
        assert!(matches!(
            nominal_level(&Penalties::new(0.0, 0.0).unwrap()),
            Err(Error::DegenerateHour)
        ));
    }

    #[test]
    fn penalties_from_prices() {
        let p = reference_hour().penalties();
        assert_eq!((p.psi_plus(), p.psi_minus()), (12.0, 4.0));
        let flat = MarketHour::new(1, 30.0, 30.0, 30.0).unwrap().penalties();
        assert_eq!((flat.psi_plus(), flat.psi_minus()), (0.0, 0.0));
        assert!(flat.is_degenerate());
        let one_sided = MarketHour::new(2, 25.0, 25.0, 20.0).unwrap();
        assert_eq!(
            (one_sided.penalties().psi_plus(), one_sided.penalties().psi_minus()),
            (5.0, 0.0)
        );
        assert!(one_sided.is_single_sided());
        assert!(!reference_hour().is_single_sided());
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(MarketHour::new(0, 25.0, 24.0, 13.0).is_err());
        assert!(MarketHour::new(0, 25.0, 29.0, 26.0).is_err());
        assert!(MarketHour::new(0, f64::NAN, 29.0, 13.0).is_err());
        assert!(Penalties::new(-1.0, 4.0).is_err());
        assert!(Penalties::new(1.0, f64::INFINITY).is_err());
        assert!(Offer::new(3.0, 2.0).is_err());
        assert!(Offer::new(-0.1, 2.0).is_err());
        assert_eq!(Offer::clamped(3.0, 2.0).quantity(), 2.0);
    }

    #[test]
    fn slope_matches_difference_quotient() {
        let p = Penalties::new(12.0, 4.0).unwrap();
        assert_eq!(imbalance_cost_slope(1.0, 1.5, &p), -12.0);
        assert_eq!(imbalance_cost_slope(2.0, 1.5, &p), 4.0);
        assert_eq!(imbalance_cost_slope(1.5, 1.5, &p), 0.0);
    }

    fn hour_strategy() -> impl Strategy<Value = MarketHour> {
        (0.0..100.0f64, 0.0..50.0f64, 0.0..50.0f64)
            .prop_map(|(f, up, dw)| MarketHour::new(0, f, f + up, f - dw).unwrap())
    }

    proptest! {
        #[test]
        fn settlement_identity(offer in 0.0..10.0f64, actual in 0.0..10.0f64, h in hour_strategy()) {
            let a = profit(offer, actual, &h);
            let b = profit_decomposed(offer, actual, &h);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs())));
        }

        #[test]
        fn cost_is_non_negative_and_one_sided(offer in 0.0..10.0f64, actual in 0.0..10.0f64,
                                              pp in 0.0..50.0f64, pm in 0.0..50.0f64) {
            let p = Penalties::new(pp, pm).unwrap();
            prop_assert!(imbalance_cost(offer, actual, &p) >= 0.0);
            let over = positive_part(actual - offer);
            let under = positive_part(offer - actual);
            prop_assert!(over == 0.0 || under == 0.0);
        }

        #[test]
        fn nominal_level_scale_invariant(pp in 0.0..50.0f64, pm in 0.001..50.0f64, c in 0.01..100.0f64) {
            let a = nominal_level(&Penalties::new(pp, pm).unwrap()).unwrap();
            let b = nominal_level(&Penalties::new(c * pp, c * pm).unwrap()).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
