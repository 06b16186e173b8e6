//! Risk-averse energy portfolio allocation for a battery coalition.
//!
//! The problem co-optimizes the guaranteed profit level (value at risk)
//! and the mean of the profit tail below it (conditional value at risk)
//! over a set of price scenarios, subject to battery dynamics, per-cell
//! charge/discharge exclusivity, market trading limits and a convex
//! quadratic cost-of-degradation bound per battery. Exclusivity makes the
//! problem mixed-integer; [`solve`] runs a best-first branch-and-bound with
//! a conic subproblem at each node.

mod bnb;
mod subproblem;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::battery::{BatterySpec, DispatchSchedule};
use crate::gpdef::{DefModel, QuadraticForm};

pub use bnb::solve_continuous_relaxation;

#[derive(Debug, Error)]
pub enum EpaError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("confidence level alpha must lie strictly inside (0, 1), got {0}")]
    AlphaOutOfRange(f64),
    #[error("cost-of-degradation form for battery {battery} is not PSD-projected")]
    NonPsdCodForm { battery: usize },
    #[error("empty profit vector")]
    EmptyProfits,
    #[error("price matrix: {0}")]
    InvalidPrices(String),
    #[error("exhaustive enumeration limited to {limit} cells, problem has {cells}")]
    TooManyCells { cells: usize, limit: usize },
    #[error("conic solver failure: {0}")]
    Solver(String),
}

/// How one market settles a dispatch entry.
///
/// `NetEnergy`: discharge earns and charge pays the price (arbitrage).
/// `Capacity`: committed power earns the price in either direction
/// (reserve-style capacity payment).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettlementMode {
    NetEnergy,
    Capacity,
}

/// The markets the coalition trades in, with a shared interval length and
/// horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub settlements: Vec<SettlementMode>,
    /// Coalition-wide trading limit per market (kW), applied separately to
    /// total charge and total discharge.
    pub trading_limits_kw: Vec<f64>,
    pub dt_hours: f64,
    pub horizon: usize,
}

impl MarketSpec {
    pub fn markets(&self) -> usize {
        self.settlements.len()
    }

    pub fn validate(&self) -> Result<(), EpaError> {
        if self.settlements.is_empty() {
            return Err(EpaError::InvalidProblem("at least one market required".into()));
        }
        if self.trading_limits_kw.len() != self.settlements.len() {
            return Err(EpaError::InvalidProblem(format!(
                "{} trading limits for {} markets",
                self.trading_limits_kw.len(),
                self.settlements.len()
            )));
        }
        if self.trading_limits_kw.iter().any(|&tl| !(tl > 0.0)) {
            return Err(EpaError::InvalidProblem("trading limits must be > 0".into()));
        }
        if !(self.dt_hours > 0.0) {
            return Err(EpaError::InvalidProblem(format!(
                "dt_hours must be > 0, got {}",
                self.dt_hours
            )));
        }
        if self.horizon == 0 {
            return Err(EpaError::InvalidProblem("horizon must be >= 1".into()));
        }
        Ok(())
    }
}

/// Prices over markets x intervals ($/kWh), all non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceMatrix {
    rows: Vec<Vec<f64>>,
}

impl PriceMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, EpaError> {
        let intervals = rows.first().map(|r| r.len()).unwrap_or(0);
        for (m, row) in rows.iter().enumerate() {
            if row.len() != intervals {
                return Err(EpaError::InvalidPrices(format!(
                    "row {m} has {} entries, expected {intervals}",
                    row.len()
                )));
            }
            for (h, &p) in row.iter().enumerate() {
                if !p.is_finite() || p < 0.0 {
                    return Err(EpaError::InvalidPrices(format!(
                        "price at market {m}, interval {h} must be finite and >= 0, got {p}"
                    )));
                }
            }
        }
        Ok(Self { rows })
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

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// The column block `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> PriceMatrix {
        PriceMatrix {
            rows: self.rows.iter().map(|r| r[start..start + len].to_vec()).collect(),
        }
    }
}

/// Equiprobable price scenarios, each markets x intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceScenarioSet {
    pub samples: Vec<PriceMatrix>,
}

impl PriceScenarioSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate_dims(&self, markets: usize, intervals: usize) -> Result<(), EpaError> {
        for (s, sample) in self.samples.iter().enumerate() {
            if sample.markets() != markets || sample.intervals() != intervals {
                return Err(EpaError::InvalidProblem(format!(
                    "scenario {s} is {}x{}, expected {markets}x{intervals}",
                    sample.markets(),
                    sample.intervals()
                )));
            }
        }
        Ok(())
    }
}

/// Branch-and-bound controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative optimality gap at which the search stops.
    pub mip_gap: f64,
    pub node_limit: u64,
    /// Wall-clock limit; `None` keeps runs reproducible.
    pub time_limit_s: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { mip_gap: 1e-4, node_limit: 1_000_000, time_limit_s: None }
    }
}

/// A fully validated portfolio-allocation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpaProblem {
    pub batteries: Vec<BatterySpec>,
    /// PSD-projected quadratic degradation forms, one per battery, on the
    /// market horizon.
    pub cod_forms: Vec<QuadraticForm>,
    pub market: MarketSpec,
    pub scenarios: PriceScenarioSet,
    pub alpha: f64,
    /// Minimum guaranteed profit the value-at-risk must reach; `None`
    /// drops the constraint.
    pub profit_floor: Option<f64>,
    pub options: SolverOptions,
}

impl EpaProblem {
    pub fn battery_count(&self) -> usize {
        self.batteries.len()
    }

    /// Battery x market x interval decision cells.
    pub fn num_cells(&self) -> usize {
        self.batteries.len() * self.market.markets() * self.market.horizon
    }

    /// Charge/discharge exclusivity binaries in the formulation.
    pub fn num_binaries(&self) -> usize {
        2 * self.num_cells()
    }

    /// Auxiliary tail variables, one per scenario.
    pub fn num_tail_vars(&self) -> usize {
        self.scenarios.len()
    }

    /// Auxiliary degradation-cost variables, one per battery.
    pub fn num_cod_vars(&self) -> usize {
        self.batteries.len()
    }

    /// The same problem restricted to the batteries whose bit is set.
    pub fn restricted_to(&self, mask: u64) -> EpaProblem {
        let keep: Vec<usize> =
            (0..self.batteries.len()).filter(|j| mask & (1 << j) != 0).collect();
        EpaProblem {
            batteries: keep.iter().map(|&j| self.batteries[j].clone()).collect(),
            cod_forms: keep.iter().map(|&j| self.cod_forms[j].clone()).collect(),
            market: self.market.clone(),
            scenarios: self.scenarios.clone(),
            alpha: self.alpha,
            profit_floor: self.profit_floor,
            options: self.options.clone(),
        }
    }
}

/// Validates and assembles a problem instance.
pub fn build_problem(
    batteries: Vec<BatterySpec>,
    cod_forms: Vec<QuadraticForm>,
    market: MarketSpec,
    scenarios: PriceScenarioSet,
    alpha: f64,
    profit_floor: Option<f64>,
    options: SolverOptions,
) -> Result<EpaProblem, EpaError> {
    market.validate()?;
    if batteries.is_empty() {
        return Err(EpaError::InvalidProblem("at least one battery required".into()));
    }
    for (j, b) in batteries.iter().enumerate() {
        b.validate()
            .map_err(|e| EpaError::InvalidProblem(format!("battery {j}: {e}")))?;
    }
    if cod_forms.len() != batteries.len() {
        return Err(EpaError::InvalidProblem(format!(
            "{} degradation forms for {} batteries",
            cod_forms.len(),
            batteries.len()
        )));
    }
    for (j, form) in cod_forms.iter().enumerate() {
        if !form.psd_projected {
            return Err(EpaError::NonPsdCodForm { battery: j });
        }
        if form.horizon() != market.horizon {
            return Err(EpaError::InvalidProblem(format!(
                "degradation form for battery {j} has horizon {}, market has {}",
                form.horizon(),
                market.horizon
            )));
        }
    }
    if scenarios.is_empty() {
        return Err(EpaError::InvalidProblem("at least one price scenario required".into()));
    }
    scenarios.validate_dims(market.markets(), market.horizon)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EpaError::AlphaOutOfRange(alpha));
    }
    if !(options.mip_gap >= 0.0) {
        return Err(EpaError::InvalidProblem(format!(
            "mip_gap must be >= 0, got {}",
            options.mip_gap
        )));
    }
    Ok(EpaProblem { batteries, cod_forms, market, scenarios, alpha, profit_floor, options })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// Incumbent proven within the requested gap.
    Optimal,
    /// Node or time limit hit first; `gap` reports what was achieved.
    GapReached,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    /// Relaxation solves performed.
    pub nodes: u64,
    /// Final relative optimality gap.
    pub gap: f64,
    /// Wall time; kept out of serialized output so that runs with a fixed
    /// seed produce byte-identical files.
    #[serde(skip_serializing, default)]
    pub wall_time_s: f64,
}

/// Optimizer output for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpaSolution {
    pub status: SolveStatus,
    /// Signed per-market dispatch per battery (kW).
    pub dispatch: Vec<DispatchSchedule>,
    /// Guaranteed profit level zeta, the value at risk ($).
    pub var_usd: f64,
    /// Co-objective value: zeta plus the weighted tail shortfalls ($).
    pub objective_usd: f64,
    /// Tail shortfall auxiliaries, one per scenario, all <= 0 ($).
    pub tail_shortfalls_usd: Vec<f64>,
    /// Degradation-cost bounds, one per battery ($).
    pub cod_costs_usd: Vec<f64>,
    /// Mean profit over the scenario set ($).
    pub expected_profit_usd: f64,
    pub stats: SolverStats,
    /// Present when the instance is infeasible, naming the likely binding
    /// constraint.
    pub diagnostic: Option<String>,
}

impl EpaSolution {
    pub(crate) fn infeasible(problem: &EpaProblem, diagnostic: String, stats: SolverStats) -> Self {
        let m = problem.market.markets();
        let h = problem.market.horizon;
        EpaSolution {
            status: SolveStatus::Infeasible,
            dispatch: vec![DispatchSchedule::zeros(m, h); problem.batteries.len()],
            var_usd: 0.0,
            objective_usd: 0.0,
            tail_shortfalls_usd: vec![0.0; problem.scenarios.len()],
            cod_costs_usd: vec![0.0; problem.batteries.len()],
            expected_profit_usd: 0.0,
            stats,
            diagnostic: Some(diagnostic),
        }
    }
}

/// Market revenue of one battery's schedule under one price matrix ($).
///
/// Net-energy markets settle the signed value (discharge earns, charge
/// pays); capacity markets pay for committed power in either direction.
pub fn revenue_usd(
    schedule: &DispatchSchedule,
    prices: &PriceMatrix,
    market: &MarketSpec,
) -> f64 {
    let mut total = 0.0;
    for m in 0..market.markets() {
        for h in 0..market.horizon {
            let d = schedule.get(m, h);
            let traded = match market.settlements[m] {
                SettlementMode::NetEnergy => d,
                SettlementMode::Capacity => d.abs(),
            };
            total += prices.get(m, h) * traded * market.dt_hours;
        }
    }
    total
}

/// Coalition profit under one price sample, with the degradation cost
/// taken from the unprojected learned model ($).
pub fn evaluate_profit(
    dispatch: &[DispatchSchedule],
    prices: &PriceMatrix,
    defs: &[DefModel],
    specs: &[BatterySpec],
    market: &MarketSpec,
) -> Result<f64, EpaError> {
    if dispatch.len() != defs.len() || dispatch.len() != specs.len() {
        return Err(EpaError::InvalidProblem(format!(
            "{} schedules, {} models, {} specs",
            dispatch.len(),
            defs.len(),
            specs.len()
        )));
    }
    let mut total = 0.0;
    for ((schedule, def), spec) in dispatch.iter().zip(defs).zip(specs) {
        let net = crate::battery::aggregate_dispatch(schedule);
        let deg = def
            .predict(&net)
            .map_err(|e| EpaError::InvalidProblem(format!("degradation model: {e}")))?;
        total += revenue_usd(schedule, prices, market) - spec.cod_coeff_usd_per_kwh * deg;
    }
    Ok(total)
}

/// Coalition profit under one price sample with the degradation cost from
/// quadratic forms — the accounting the optimizer itself uses ($).
pub fn evaluate_profit_with_forms(
    dispatch: &[DispatchSchedule],
    prices: &PriceMatrix,
    forms: &[QuadraticForm],
    specs: &[BatterySpec],
    market: &MarketSpec,
) -> f64 {
    let mut total = 0.0;
    for ((schedule, form), spec) in dispatch.iter().zip(forms).zip(specs) {
        let net = crate::battery::aggregate_dispatch(schedule);
        total += revenue_usd(schedule, prices, market)
            - spec.cod_coeff_usd_per_kwh * form.evaluate(&net);
    }
    total
}

/// Per-scenario coalition profits with quadratic-form degradation costs.
pub fn scenario_profits_with_forms(
    dispatch: &[DispatchSchedule],
    scenarios: &PriceScenarioSet,
    forms: &[QuadraticForm],
    specs: &[BatterySpec],
    market: &MarketSpec,
) -> Vec<f64> {
    scenarios
        .samples
        .iter()
        .map(|prices| evaluate_profit_with_forms(dispatch, prices, forms, specs, market))
        .collect()
}

/// Empirical value at risk and conditional value at risk of a profit
/// sample at confidence `alpha`.
///
/// VaR is the largest sample value `z` with `#(samples <= z) / S <=
/// 1 - alpha` (the minimum sample when none qualifies); CVaR is the mean
/// of the samples at or below VaR, so CVaR <= VaR always holds.
pub fn var_cvar(profits: &[f64], alpha: f64) -> Result<(f64, f64), EpaError> {
    if profits.is_empty() {
        return Err(EpaError::EmptyProfits);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EpaError::AlphaOutOfRange(alpha));
    }
    let mut sorted = profits.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let threshold = (1.0 - alpha) * sorted.len() as f64 + 1e-9;
    let mut var = sorted[0];
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        // j = count of samples <= sorted[i]
        if (j as f64) <= threshold {
            var = sorted[i];
            i = j;
        } else {
            break;
        }
    }
    let tail: Vec<f64> = sorted.iter().copied().take_while(|&v| v <= var).collect();
    let cvar = tail.iter().sum::<f64>() / tail.len() as f64;
    Ok((var, cvar))
}

/// Solves the instance by branch-and-bound over the exclusivity binaries.
pub fn solve(problem: &EpaProblem) -> Result<EpaSolution, EpaError> {
    bnb::branch_and_bound(problem)
}

/// Solves the instance by enumerating every charge-only/discharge-only
/// cell pattern with one conic solve each. Exponential in the cell count;
/// used as an independent optimality oracle on small instances.
pub fn solve_enumerated(problem: &EpaProblem) -> Result<EpaSolution, EpaError> {
    bnb::solve_enumerated(problem)
}

/// Risk-neutral baseline: optimizes each price sample independently,
/// averages the dispatch elementwise, and evaluates that averaged dispatch
/// over the same sample set. `var_usd`/`objective_usd` report the
/// empirical VaR/CVaR of the averaged dispatch.
pub fn solve_risk_neutral(problem: &EpaProblem) -> Result<EpaSolution, EpaError> {
    use rayon::prelude::*;
    let start = std::time::Instant::now();
    let per_sample: Vec<Result<EpaSolution, EpaError>> = problem
        .scenarios
        .samples
        .par_iter()
        .map(|sample| {
            let sub = EpaProblem {
                batteries: problem.batteries.clone(),
                cod_forms: problem.cod_forms.clone(),
                market: problem.market.clone(),
                scenarios: PriceScenarioSet { samples: vec![sample.clone()] },
                // With one scenario the co-objective reduces to that
                // sample's profit for any alpha; the floor is dropped so
                // every per-sample problem stays feasible.
                alpha: 0.5,
                profit_floor: None,
                options: problem.options.clone(),
            };
            solve(&sub)
        })
        .collect();

    let b = problem.batteries.len();
    let m = problem.market.markets();
    let h = problem.market.horizon;
    let mut averaged = vec![DispatchSchedule::zeros(m, h); b];
    let mut nodes = 0;
    let mut worst_gap = 0.0f64;
    let s_count = problem.scenarios.len() as f64;
    for result in per_sample {
        let sol = result?;
        if sol.status == SolveStatus::Infeasible {
            return Ok(EpaSolution::infeasible(
                problem,
                sol.diagnostic.unwrap_or_else(|| "per-sample solve infeasible".into()),
                SolverStats { nodes, gap: f64::INFINITY, wall_time_s: start.elapsed().as_secs_f64() },
            ));
        }
        nodes += sol.stats.nodes;
        worst_gap = worst_gap.max(sol.stats.gap);
        for j in 0..b {
            for mm in 0..m {
                for hh in 0..h {
                    let v = averaged[j].get(mm, hh) + sol.dispatch[j].get(mm, hh) / s_count;
                    averaged[j].set(mm, hh, v);
                }
            }
        }
    }

    let profits = scenario_profits_with_forms(
        &averaged,
        &problem.scenarios,
        &problem.cod_forms,
        &problem.batteries,
        &problem.market,
    );
    let (var, cvar) = var_cvar(&profits, problem.alpha)?;
    let expected = profits.iter().sum::<f64>() / profits.len() as f64;
    let tail: Vec<f64> = profits.iter().map(|&p| (p - var).min(0.0)).collect();
    let cod: Vec<f64> = averaged
        .iter()
        .zip(&problem.cod_forms)
        .zip(&problem.batteries)
        .map(|((d, form), spec)| {
            spec.cod_coeff_usd_per_kwh * form.evaluate(&crate::battery::aggregate_dispatch(d))
        })
        .collect();
    Ok(EpaSolution {
        status: SolveStatus::Optimal,
        dispatch: averaged,
        var_usd: var,
        objective_usd: cvar,
        tail_shortfalls_usd: tail,
        cod_costs_usd: cod,
        expected_profit_usd: expected,
        stats: SolverStats { nodes, gap: worst_gap, wall_time_s: start.elapsed().as_secs_f64() },
        diagnostic: None,
    })
}

#[cfg(test)]
mod tests;
