//! Battery physics: dispatch aggregation, state-of-charge dynamics, and
//! operational feasibility checks.
//!
//! Power flow convention throughout the crate: discharge is positive,
//! charge is negative. A dispatch entry never carries both directions;
//! the charge/discharge split of a signed value `d` is
//! `P_d = max(d, 0)`, `P_c = max(-d, 0)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack applied to power-limit comparisons (kW). Guards against solver
/// round-off being reported as a violation.
pub const POWER_EPS_KW: f64 = 1e-6;
/// Slack applied to state-of-charge bound comparisons. Wide enough to
/// absorb interior-point solver tolerance on optimizer output.
pub const SOC_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum BatteryError {
    #[error("invalid battery spec: {0}")]
    InvalidSpec(String),
    #[error("dispatch schedule rows have unequal lengths")]
    RaggedSchedule,
    #[error("dispatch entry at market {market}, interval {interval} is not finite")]
    NonFiniteEntry { market: usize, interval: usize },
}

/// Physical and economic parameters of one energy storage system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatterySpec {
    /// Usable energy capacity E (kWh).
    pub capacity_kwh: f64,
    /// Rated capacity used by the degradation model (kWh); equals
    /// `capacity_kwh` unless overridden.
    pub rated_capacity_kwh: f64,
    /// Charge efficiency, in (0, 1].
    pub eff_charge: f64,
    /// Discharge efficiency, in (0, 1].
    pub eff_discharge: f64,
    /// Maximum charging power (kW, positive).
    pub p_charge_max_kw: f64,
    /// Maximum discharging power (kW, positive).
    pub p_discharge_max_kw: f64,
    /// Lower state-of-charge bound, fraction of capacity.
    pub soc_min: f64,
    /// Upper state-of-charge bound, fraction of capacity.
    pub soc_max: f64,
    /// Initial state of charge, within the bounds.
    pub soc_init: f64,
    /// Cost-of-degradation multiplier c ($/kWh of capacity lost).
    pub cod_coeff_usd_per_kwh: f64,
    /// Cycle stress coefficient a1 in `a1 * depth^a2`.
    pub stress_a1: f64,
    /// Cycle stress exponent a2.
    pub stress_a2: f64,
}

impl BatterySpec {
    /// A spec with common defaults: unit efficiencies, 1C power limits,
    /// SoC window [0.2, 0.8] starting at 0.5, Li-ion stress coefficients
    /// (a1 = 5.24e-4, a2 = 2.03) and zero degradation cost.
    pub fn new(capacity_kwh: f64) -> Self {
        Self {
            capacity_kwh,
            rated_capacity_kwh: capacity_kwh,
            eff_charge: 1.0,
            eff_discharge: 1.0,
            p_charge_max_kw: capacity_kwh,
            p_discharge_max_kw: capacity_kwh,
            soc_min: 0.2,
            soc_max: 0.8,
            soc_init: 0.5,
            cod_coeff_usd_per_kwh: 0.0,
            stress_a1: 5.24e-4,
            stress_a2: 2.03,
        }
    }

    pub fn validate(&self) -> Result<(), BatteryError> {
        let err = |msg: String| Err(BatteryError::InvalidSpec(msg));
        if !(self.capacity_kwh > 0.0) {
            return err(format!("capacity_kwh must be > 0, got {}", self.capacity_kwh));
        }
        if !(self.rated_capacity_kwh > 0.0) {
            return err(format!(
                "rated_capacity_kwh must be > 0, got {}",
                self.rated_capacity_kwh
            ));
        }
        for (name, eta) in [("eff_charge", self.eff_charge), ("eff_discharge", self.eff_discharge)]
        {
            if !(eta > 0.0 && eta <= 1.0) {
                return err(format!("{name} must lie in (0, 1], got {eta}"));
            }
        }
        if !(self.p_charge_max_kw > 0.0) {
            return err(format!("p_charge_max_kw must be > 0, got {}", self.p_charge_max_kw));
        }
        if !(self.p_discharge_max_kw > 0.0) {
            return err(format!(
                "p_discharge_max_kw must be > 0, got {}",
                self.p_discharge_max_kw
            ));
        }
        if !(self.soc_min >= 0.0 && self.soc_max <= 1.0 && self.soc_min < self.soc_max) {
            return err(format!(
                "SoC bounds must satisfy 0 <= soc_min < soc_max <= 1, got [{}, {}]",
                self.soc_min, self.soc_max
            ));
        }
        if !(self.soc_init >= self.soc_min && self.soc_init <= self.soc_max) {
            return err(format!(
                "soc_init must lie in [{}, {}], got {}",
                self.soc_min, self.soc_max, self.soc_init
            ));
        }
        if !(self.cod_coeff_usd_per_kwh >= 0.0) {
            return err(format!(
                "cod_coeff_usd_per_kwh must be >= 0, got {}",
                self.cod_coeff_usd_per_kwh
            ));
        }
        if !(self.stress_a1 > 0.0) {
            return err(format!("stress_a1 must be > 0, got {}", self.stress_a1));
        }
        if !(self.stress_a2 > 0.0) {
            return err(format!("stress_a2 must be > 0, got {}", self.stress_a2));
        }
        Ok(())
    }
}

/// Signed per-market dispatch of one battery over a market horizon.
///
/// Rows are markets, columns are intervals; values in kW with discharge
/// positive and charge negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSchedule {
    rows: Vec<Vec<f64>>,
}

impl DispatchSchedule {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, BatteryError> {
        let intervals = rows.first().map(|r| r.len()).unwrap_or(0);
        for (m, row) in rows.iter().enumerate() {
            if row.len() != intervals {
                return Err(BatteryError::RaggedSchedule);
            }
            for (h, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(BatteryError::NonFiniteEntry { market: m, interval: h });
                }
            }
        }
        Ok(Self { rows })
    }

    pub fn zeros(markets: usize, intervals: usize) -> Self {
        Self { rows: vec![vec![0.0; intervals]; markets] }
    }

    pub fn markets(&self) -> usize {
        self.rows.len()
    }

    pub fn intervals(&self) -> usize {
        self.rows.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn get(&self, market: usize, interval: usize) -> f64 {
        self.rows[market][interval]
    }

    pub fn set(&mut self, market: usize, interval: usize, value_kw: f64) {
        self.rows[market][interval] = value_kw;
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Charging power drawn in one market cell (kW, non-negative).
    pub fn charge_kw(&self, market: usize, interval: usize) -> f64 {
        (-self.rows[market][interval]).max(0.0)
    }

    /// Discharging power delivered in one market cell (kW, non-negative).
    pub fn discharge_kw(&self, market: usize, interval: usize) -> f64 {
        self.rows[market][interval].max(0.0)
    }
}

/// Total signed dispatch per interval, summed over markets (kW).
pub fn aggregate_dispatch(schedule: &DispatchSchedule) -> Vec<f64> {
    let h = schedule.intervals();
    let mut total = vec![0.0; h];
    for row in schedule.rows() {
        for (t, v) in row.iter().enumerate() {
            total[t] += v;
        }
    }
    total
}

/// State of charge over a horizon; element 0 is the initial state, so the
/// vector is one longer than the dispatch it was produced from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocTrajectory(pub Vec<f64>);

impl SocTrajectory {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for SocTrajectory {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// State-of-charge trajectory driven by an aggregated signed dispatch.
///
/// `soc[h] = soc[h-1] - (P_d/eff_d - eff_c * P_c) * dt / E` with the
/// charge/discharge split taken on the aggregated value. The trajectory is
/// returned raw, without clamping, so that out-of-bound excursions can be
/// diagnosed by [`check_feasible`].
pub fn soc_trajectory(spec: &BatterySpec, net_kw: &[f64], dt_hours: f64) -> SocTrajectory {
    assert!(dt_hours > 0.0, "dt_hours must be positive");
    let mut soc = Vec::with_capacity(net_kw.len() + 1);
    soc.push(spec.soc_init);
    let mut state = spec.soc_init;
    for &d in net_kw {
        let p_d = d.max(0.0);
        let p_c = (-d).max(0.0);
        state -= (p_d / spec.eff_discharge - spec.eff_charge * p_c) * dt_hours / spec.capacity_kwh;
        soc.push(state);
    }
    SocTrajectory(soc)
}

/// One operational-limit violation found by [`check_feasible`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    /// Charging power in one market cell exceeds the charge limit.
    ChargePowerLimit { market: usize, interval: usize, value_kw: f64, limit_kw: f64 },
    /// Discharging power in one market cell exceeds the discharge limit.
    DischargePowerLimit { market: usize, interval: usize, value_kw: f64, limit_kw: f64 },
    /// Market-summed charging power exceeds the charge limit.
    AggregateChargeLimit { interval: usize, value_kw: f64, limit_kw: f64 },
    /// Market-summed discharging power exceeds the discharge limit.
    AggregateDischargeLimit { interval: usize, value_kw: f64, limit_kw: f64 },
    /// State of charge leaves the permitted band. `interval` counts from 1
    /// (the state after that dispatch interval).
    SocOutOfBounds { interval: usize, soc: f64, soc_min: f64, soc_max: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::ChargePowerLimit { market, interval, value_kw, limit_kw } => write!(
                f,
                "charge power {value_kw} kW exceeds limit {limit_kw} kW at market {market}, interval {interval}"
            ),
            Violation::DischargePowerLimit { market, interval, value_kw, limit_kw } => write!(
                f,
                "discharge power {value_kw} kW exceeds limit {limit_kw} kW at market {market}, interval {interval}"
            ),
            Violation::AggregateChargeLimit { interval, value_kw, limit_kw } => write!(
                f,
                "aggregated charge power {value_kw} kW exceeds limit {limit_kw} kW at interval {interval}"
            ),
            Violation::AggregateDischargeLimit { interval, value_kw, limit_kw } => write!(
                f,
                "aggregated discharge power {value_kw} kW exceeds limit {limit_kw} kW at interval {interval}"
            ),
            Violation::SocOutOfBounds { interval, soc, soc_min, soc_max } => write!(
                f,
                "state of charge {soc:.6} outside [{soc_min}, {soc_max}] after interval {interval}"
            ),
        }
    }
}

/// Outcome of a feasibility check; an empty violation list means feasible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub violations: Vec<Violation>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks a dispatch schedule against per-market power limits, aggregated
/// power limits and, when `check_soc` is set, the SoC band.
///
/// Violations are data, not errors: callers such as the dataset generator
/// use the report for rejection diagnostics.
pub fn check_feasible(
    spec: &BatterySpec,
    schedule: &DispatchSchedule,
    dt_hours: f64,
    check_soc: bool,
) -> FeasibilityReport {
    let mut violations = Vec::new();
    for m in 0..schedule.markets() {
        for h in 0..schedule.intervals() {
            let p_c = schedule.charge_kw(m, h);
            let p_d = schedule.discharge_kw(m, h);
            if p_c > spec.p_charge_max_kw + POWER_EPS_KW {
                violations.push(Violation::ChargePowerLimit {
                    market: m,
                    interval: h,
                    value_kw: p_c,
                    limit_kw: spec.p_charge_max_kw,
                });
            }
            if p_d > spec.p_discharge_max_kw + POWER_EPS_KW {
                violations.push(Violation::DischargePowerLimit {
                    market: m,
                    interval: h,
                    value_kw: p_d,
                    limit_kw: spec.p_discharge_max_kw,
                });
            }
        }
    }
    let net = aggregate_dispatch(schedule);
    for (h, &d) in net.iter().enumerate() {
        let p_c = (-d).max(0.0);
        let p_d = d.max(0.0);
        if p_c > spec.p_charge_max_kw + POWER_EPS_KW {
            violations.push(Violation::AggregateChargeLimit {
                interval: h,
                value_kw: p_c,
                limit_kw: spec.p_charge_max_kw,
            });
        }
        if p_d > spec.p_discharge_max_kw + POWER_EPS_KW {
            violations.push(Violation::AggregateDischargeLimit {
                interval: h,
                value_kw: p_d,
                limit_kw: spec.p_discharge_max_kw,
            });
        }
    }
    if check_soc {
        let soc = soc_trajectory(spec, &net, dt_hours);
        for (h, &s) in soc.values().iter().enumerate().skip(1) {
            if s < spec.soc_min - SOC_EPS || s > spec.soc_max + SOC_EPS {
                violations.push(Violation::SocOutOfBounds {
                    interval: h,
                    soc: s,
                    soc_min: spec.soc_min,
                    soc_max: spec.soc_max,
                });
            }
        }
    }
    FeasibilityReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spec_500() -> BatterySpec {
        BatterySpec::new(500.0)
    }

    #[test]
    fn aggregate_sums_columns() {
        let d = DispatchSchedule::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(aggregate_dispatch(&d), vec![4.0, 6.0]);
    }

    #[test]
    fn aggregate_zero_matrix() {
        let d = DispatchSchedule::zeros(3, 4);
        assert_eq!(aggregate_dispatch(&d), vec![0.0; 4]);
    }

    #[test]
    fn aggregate_single_market_is_identity() {
        let d = DispatchSchedule::new(vec![vec![5.0, -2.0, 0.5]]).unwrap();
        assert_eq!(aggregate_dispatch(&d), vec![5.0, -2.0, 0.5]);
    }

    #[test]
    fn soc_constant_without_flow() {
        let soc = soc_trajectory(&spec_500(), &[0.0, 0.0], 0.25);
        assert_eq!(soc.values(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn soc_discharge_then_charge() {
        let soc = soc_trajectory(&spec_500(), &[200.0, -200.0], 0.25);
        assert_relative_eq!(soc[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(soc[1], 0.4, max_relative = 1e-12);
        assert_relative_eq!(soc[2], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn soc_discharge_efficiency_draws_more_energy() {
        let mut spec = spec_500();
        spec.eff_discharge = 0.9;
        // 180 kW for 0.25 h at 0.9 efficiency draws 50 kWh from the cells.
        let soc = soc_trajectory(&spec, &[180.0], 0.25);
        assert_relative_eq!(soc[1], 0.4, max_relative = 1e-12);
    }

    #[test]
    fn soc_is_returned_unclamped() {
        let soc = soc_trajectory(&spec_500(), &[2000.0], 0.25);
        assert!(soc[1] < 0.0);
    }

    #[test]
    fn power_limit_violation_reported_per_cell() {
        let spec = spec_500();
        let d = DispatchSchedule::new(vec![vec![2.0 * spec.p_discharge_max_kw, 0.0]]).unwrap();
        let report = check_feasible(&spec, &d, 0.25, true);
        let power_violations: Vec<_> = report
            .violations
            .iter()
            .filter(|v| matches!(v, Violation::DischargePowerLimit { market: 0, interval: 0, .. }))
            .collect();
        assert_eq!(power_violations.len(), 1);
    }

    #[test]
    fn charging_from_lower_bound_is_feasible() {
        let mut spec = spec_500();
        spec.soc_init = spec.soc_min;
        let d = DispatchSchedule::new(vec![vec![-100.0, -100.0]]).unwrap();
        let report = check_feasible(&spec, &d, 0.25, true);
        assert!(report.is_feasible(), "violations: {:?}", report.violations);
    }

    #[test]
    fn soc_violation_at_first_interval() {
        let mut spec = spec_500();
        spec.soc_init = 0.25;
        let d = DispatchSchedule::new(vec![vec![200.0]]).unwrap();
        let report = check_feasible(&spec, &d, 0.25, true);
        assert_eq!(report.violations.len(), 1);
        match &report.violations[0] {
            Violation::SocOutOfBounds { interval, soc, .. } => {
                assert_eq!(*interval, 1);
                assert_relative_eq!(*soc, 0.15, max_relative = 1e-12);
            }
            other => panic!("unexpected violation {other:?}"),
        }
    }

    #[test]
    fn soc_check_can_be_disabled() {
        let mut spec = spec_500();
        spec.soc_init = 0.25;
        let d = DispatchSchedule::new(vec![vec![200.0]]).unwrap();
        assert!(check_feasible(&spec, &d, 0.25, false).is_feasible());
    }

    #[test]
    fn spec_validation_rejects_bad_bounds() {
        let mut spec = spec_500();
        spec.soc_min = 0.9;
        assert!(spec.validate().is_err());
        let mut spec = spec_500();
        spec.eff_charge = 1.2;
        assert!(spec.validate().is_err());
        assert!(spec_500().validate().is_ok());
    }

    #[test]
    fn ragged_schedule_rejected() {
        assert!(matches!(
            DispatchSchedule::new(vec![vec![1.0, 2.0], vec![3.0]]),
            Err(BatteryError::RaggedSchedule)
        ));
    }

    proptest! {
        // With equal efficiencies and a shared sign pattern the SoC response
        // is affine in the dispatch.
        #[test]
        fn soc_affine_for_same_sign_pattern(
            signs in proptest::collection::vec(prop_oneof![Just(1.0), Just(-1.0)], 1..8),
            mags1 in proptest::collection::vec(0.0..400.0, 8),
            mags2 in proptest::collection::vec(0.0..400.0, 8),
        ) {
            let spec = spec_500();
            let h = signs.len();
            let d1: Vec<f64> = (0..h).map(|i| signs[i] * mags1[i]).collect();
            let d2: Vec<f64> = (0..h).map(|i| signs[i] * mags2[i]).collect();
            let sum: Vec<f64> = (0..h).map(|i| d1[i] + d2[i]).collect();
            let base = soc_trajectory(&spec, &vec![0.0; h], 0.25);
            let t1 = soc_trajectory(&spec, &d1, 0.25);
            let t2 = soc_trajectory(&spec, &d2, 0.25);
            let ts = soc_trajectory(&spec, &sum, 0.25);
            for i in 0..=h {
                let lhs = ts[i] - base[i];
                let rhs = (t1[i] - base[i]) + (t2[i] - base[i]);
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }

        // Net SoC change telescopes exactly to the summed drawdown.
        #[test]
        fn soc_telescopes(net in proptest::collection::vec(-500.0..500.0f64, 1..12)) {
            let mut spec = spec_500();
            spec.eff_charge = 0.94;
            spec.eff_discharge = 0.9;
            let dt = 0.25;
            let soc = soc_trajectory(&spec, &net, dt);
            let drawdown: f64 = net
                .iter()
                .map(|&d| (d.max(0.0) / spec.eff_discharge - spec.eff_charge * (-d).max(0.0))
                    * dt / spec.capacity_kwh)
                .sum();
            prop_assert!((soc[soc.len() - 1] - spec.soc_init + drawdown).abs() < 1e-12);
        }

        // The zero schedule is feasible for any valid spec.
        #[test]
        fn zero_schedule_feasible(
            capacity in 1.0..2000.0f64,
            soc_init in 0.2..0.8f64,
        ) {
            let mut spec = BatterySpec::new(capacity);
            spec.soc_init = soc_init;
            prop_assert!(spec.validate().is_ok());
            let d = DispatchSchedule::zeros(2, 4);
            prop_assert!(check_feasible(&spec, &d, 0.25, true).is_feasible());
        }
    }
}
