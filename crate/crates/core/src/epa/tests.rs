use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use super::*;
use crate::battery::BatterySpec;
use crate::gpdef::QuadraticForm;

fn diag_form(horizon: usize, value: f64) -> QuadraticForm {
    QuadraticForm {
        quadratic: DMatrix::identity(horizon, horizon) * value,
        linear: DVector::zeros(horizon),
        constant: 0.0,
        psd_projected: true,
        max_clipped_eigenvalue: 0.0,
    }
}

fn battery(cod: f64) -> BatterySpec {
    let mut spec = BatterySpec::new(500.0);
    spec.cod_coeff_usd_per_kwh = cod;
    spec
}

fn single_market(horizon: usize) -> MarketSpec {
    MarketSpec {
        settlements: vec![SettlementMode::NetEnergy],
        trading_limits_kw: vec![1000.0],
        dt_hours: 0.25,
        horizon,
    }
}

fn arbitrage_problem(cod: f64, floor: Option<f64>) -> EpaProblem {
    build_problem(
        vec![battery(cod)],
        vec![diag_form(2, 2e-8)],
        single_market(2),
        PriceScenarioSet { samples: vec![PriceMatrix::new(vec![vec![0.1, 0.4]]).unwrap()] },
        0.5,
        floor,
        SolverOptions::default(),
    )
    .unwrap()
}

#[test]
fn build_problem_reports_formulation_sizes() {
    let market = MarketSpec {
        settlements: vec![SettlementMode::NetEnergy, SettlementMode::Capacity],
        trading_limits_kw: vec![1000.0, 1000.0],
        dt_hours: 0.25,
        horizon: 4,
    };
    let scenarios = PriceScenarioSet {
        samples: (0..5)
            .map(|_| PriceMatrix::new(vec![vec![0.2; 4], vec![0.1; 4]]).unwrap())
            .collect(),
    };
    let problem = build_problem(
        vec![battery(350.0), battery(450.0), battery(550.0)],
        vec![diag_form(4, 1e-8); 3],
        market,
        scenarios,
        0.95,
        Some(1.0),
        SolverOptions::default(),
    )
    .unwrap();
    assert_eq!(problem.num_binaries(), 48);
    assert_eq!(problem.num_tail_vars(), 5);
    assert_eq!(problem.num_cod_vars(), 3);
}

#[test]
fn build_problem_rejects_wrong_scenario_horizon() {
    let err = build_problem(
        vec![battery(0.0)],
        vec![diag_form(2, 0.0)],
        single_market(2),
        PriceScenarioSet { samples: vec![PriceMatrix::new(vec![vec![0.1, 0.4, 0.2]]).unwrap()] },
        0.5,
        None,
        SolverOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, EpaError::InvalidProblem(_)));
}

#[test]
fn build_problem_rejects_alpha_one() {
    let err = build_problem(
        vec![battery(0.0)],
        vec![diag_form(2, 0.0)],
        single_market(2),
        PriceScenarioSet { samples: vec![PriceMatrix::new(vec![vec![0.1, 0.4]]).unwrap()] },
        1.0,
        None,
        SolverOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, EpaError::AlphaOutOfRange(_)));
}

#[test]
fn build_problem_rejects_unprojected_form() {
    let mut form = diag_form(2, 1e-8);
    form.psd_projected = false;
    let err = build_problem(
        vec![battery(350.0)],
        vec![form],
        single_market(2),
        PriceScenarioSet { samples: vec![PriceMatrix::new(vec![vec![0.1, 0.4]]).unwrap()] },
        0.5,
        None,
        SolverOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, EpaError::NonPsdCodForm { battery: 0 }));
}

#[test]
fn var_cvar_hundred_uniform_profits() {
    let profits: Vec<f64> = (1..=100).map(|v| v as f64).collect();
    let (var, cvar) = var_cvar(&profits, 0.95).unwrap();
    assert_eq!(var, 5.0);
    assert_eq!(cvar, 3.0);
}

#[test]
fn var_cvar_single_sample() {
    let (var, cvar) = var_cvar(&[42.0], 0.95).unwrap();
    assert_eq!(var, 42.0);
    assert_eq!(cvar, 42.0);
}

#[test]
fn var_cvar_all_equal() {
    let (var, cvar) = var_cvar(&[7.0; 12], 0.8).unwrap();
    assert_eq!(var, 7.0);
    assert_eq!(cvar, 7.0);
}

#[test]
fn var_cvar_rejects_empty() {
    assert!(matches!(var_cvar(&[], 0.9), Err(EpaError::EmptyProfits)));
}

#[test]
fn evaluate_profit_examples() {
    let market = single_market(1);
    let spec = battery(0.0);
    let zero_form = diag_form(1, 0.0);
    let prices = PriceMatrix::new(vec![vec![0.2]]).unwrap();

    let idle = DispatchSchedule::zeros(1, 1);
    assert_eq!(
        evaluate_profit_with_forms(&[idle], &prices, &[zero_form.clone()], &[spec.clone()], &market),
        0.0
    );

    let mut discharge = DispatchSchedule::zeros(1, 1);
    discharge.set(0, 0, 100.0);
    let revenue = evaluate_profit_with_forms(
        &[discharge.clone()],
        &prices,
        &[zero_form],
        &[spec.clone()],
        &market,
    );
    assert_relative_eq!(revenue, 5.0, max_relative = 1e-12);

    // A degradation charge of $1.2 comes straight off the revenue.
    let mut cod_spec = spec;
    cod_spec.cod_coeff_usd_per_kwh = 1.0;
    let form = QuadraticForm {
        quadratic: DMatrix::zeros(1, 1),
        linear: DVector::zeros(1),
        constant: 1.2,
        psd_projected: true,
        max_clipped_eigenvalue: 0.0,
    };
    let net = evaluate_profit_with_forms(&[discharge], &prices, &[form], &[cod_spec], &market);
    assert_relative_eq!(net, 3.8, max_relative = 1e-12);
}

#[test]
fn capacity_market_pays_both_directions() {
    let market = MarketSpec {
        settlements: vec![SettlementMode::Capacity],
        trading_limits_kw: vec![1000.0],
        dt_hours: 0.25,
        horizon: 2,
    };
    let prices = PriceMatrix::new(vec![vec![0.1, 0.1]]).unwrap();
    let mut schedule = DispatchSchedule::zeros(1, 2);
    schedule.set(0, 0, -200.0);
    schedule.set(0, 1, 200.0);
    assert_relative_eq!(revenue_usd(&schedule, &prices, &market), 10.0, max_relative = 1e-12);
}

#[test]
fn single_scenario_solution_matches_enumeration_and_structure() {
    let problem = arbitrage_problem(350.0, None);
    let sol = solve(&problem).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    let oracle = solve_enumerated(&problem).unwrap();
    assert_relative_eq!(sol.objective_usd, oracle.objective_usd, max_relative = 1e-6);

    // With one scenario the guaranteed level equals that sample's profit
    // and the tail shortfall vanishes.
    let profit = evaluate_profit_with_forms(
        &sol.dispatch,
        &problem.scenarios.samples[0],
        &problem.cod_forms,
        &problem.batteries,
        &problem.market,
    );
    assert_relative_eq!(sol.var_usd, profit, max_relative = 1e-4);
    assert!(sol.tail_shortfalls_usd[0].abs() < 1e-4);
    assert!(sol.tail_shortfalls_usd[0] <= 0.0);
    // Optimal play sells the stored 0.3 SoC: the full 500 kW at the 0.4
    // price and the remaining 100 kW of headroom at 0.1.
    assert_relative_eq!(sol.dispatch[0].get(0, 0), 100.0, max_relative = 1e-4);
    assert_relative_eq!(sol.dispatch[0].get(0, 1), 500.0, max_relative = 1e-4);
}

#[test]
fn unattainable_profit_floor_is_infeasible_with_diagnostic() {
    let problem = arbitrage_problem(350.0, Some(1000.0));
    let sol = solve(&problem).unwrap();
    assert_eq!(sol.status, SolveStatus::Infeasible);
    let msg = sol.diagnostic.expect("diagnostic present");
    assert!(msg.contains("floor"), "diagnostic was: {msg}");
}

#[test]
fn objective_matches_tail_recomputation() {
    // Two scenarios, both directions of degradation pressure active.
    let scenarios = PriceScenarioSet {
        samples: vec![
            PriceMatrix::new(vec![vec![0.1, 0.4]]).unwrap(),
            PriceMatrix::new(vec![vec![0.3, 0.15]]).unwrap(),
        ],
    };
    let problem = build_problem(
        vec![battery(350.0)],
        vec![diag_form(2, 2e-8)],
        single_market(2),
        scenarios,
        0.5,
        None,
        SolverOptions::default(),
    )
    .unwrap();
    let sol = solve(&problem).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    let profits = scenario_profits_with_forms(
        &sol.dispatch,
        &problem.scenarios,
        &problem.cod_forms,
        &problem.batteries,
        &problem.market,
    );
    let s = profits.len() as f64;
    let recomputed = sol.var_usd
        + profits.iter().map(|&p| (p - sol.var_usd).min(0.0)).sum::<f64>()
            / ((1.0 - problem.alpha) * s);
    assert!(sol.objective_usd <= recomputed + 1e-4 * recomputed.abs().max(1.0));
    assert_relative_eq!(sol.objective_usd, recomputed, max_relative = 1e-4);
}

#[test]
fn relaxation_dominates_integer_optimum() {
    // A tight SoC band makes splitting charge and discharge strictly
    // better than any exclusive pattern in a capacity market.
    let mut spec = battery(0.0);
    spec.soc_min = 0.45;
    spec.soc_max = 0.55;
    let market = MarketSpec {
        settlements: vec![SettlementMode::Capacity],
        trading_limits_kw: vec![1000.0],
        dt_hours: 0.25,
        horizon: 2,
    };
    let problem = build_problem(
        vec![spec],
        vec![diag_form(2, 0.0)],
        market,
        PriceScenarioSet { samples: vec![PriceMatrix::new(vec![vec![0.2, 0.2]]).unwrap()] },
        0.5,
        None,
        SolverOptions::default(),
    )
    .unwrap();
    let relaxed = solve_continuous_relaxation(&problem).unwrap();
    let sol = solve(&problem).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    assert!(relaxed >= sol.objective_usd - 1e-6);
    assert!(
        relaxed > sol.objective_usd + 1.0,
        "expected strict dominance, relaxed {relaxed} vs integer {}",
        sol.objective_usd
    );
    let oracle = solve_enumerated(&problem).unwrap();
    assert_relative_eq!(sol.objective_usd, oracle.objective_usd, max_relative = 1e-6);
    // The exclusive optimum is power-limited by the 0.05 SoC headroom.
    let d = &sol.dispatch[0];
    assert!(d.get(0, 0).abs() <= 100.0 + 1e-4);
}

#[test]
fn risk_neutral_single_sample_equals_deterministic() {
    let problem = arbitrage_problem(350.0, None);
    let direct = solve(&problem).unwrap();
    let baseline = solve_risk_neutral(&problem).unwrap();
    for (a, b) in direct.dispatch.iter().zip(&baseline.dispatch) {
        for m in 0..a.markets() {
            for h in 0..a.intervals() {
                assert_relative_eq!(a.get(m, h), b.get(m, h), epsilon = 1e-5);
            }
        }
    }
}

#[test]
fn risk_neutral_averages_per_sample_optima() {
    // Mirror-image price scenarios: under a symmetric SoC band the
    // per-sample optima are time reversals of each other, so the averaged
    // dispatch must be a palindrome, and it must equal the elementwise
    // mean of the individually solved dispatches.
    let mut spec = battery(350.0);
    spec.soc_min = 0.25;
    spec.soc_max = 0.75;
    let sample_a = PriceMatrix::new(vec![vec![0.1, 0.4]]).unwrap();
    let sample_b = PriceMatrix::new(vec![vec![0.4, 0.1]]).unwrap();
    let scenarios = PriceScenarioSet { samples: vec![sample_a.clone(), sample_b.clone()] };
    let problem = build_problem(
        vec![spec],
        vec![diag_form(2, 1e-8)],
        single_market(2),
        scenarios,
        0.5,
        None,
        SolverOptions::default(),
    )
    .unwrap();
    let baseline = solve_risk_neutral(&problem).unwrap();

    let mut manual = [0.0; 2];
    for sample in [sample_a, sample_b] {
        let sub = EpaProblem {
            scenarios: PriceScenarioSet { samples: vec![sample] },
            profit_floor: None,
            ..problem.clone()
        };
        let sol = solve(&sub).unwrap();
        for h in 0..2 {
            manual[h] += sol.dispatch[0].get(0, h) / 2.0;
        }
    }
    for h in 0..2 {
        assert_relative_eq!(baseline.dispatch[0].get(0, h), manual[h], epsilon = 1e-5);
    }
    assert_relative_eq!(
        baseline.dispatch[0].get(0, 0),
        baseline.dispatch[0].get(0, 1),
        epsilon = 1e-3
    );
}

#[test]
fn risk_neutral_is_deterministic() {
    let problem = arbitrage_problem(350.0, None);
    let a = solve_risk_neutral(&problem).unwrap();
    let b = solve_risk_neutral(&problem).unwrap();
    assert_eq!(a.dispatch, b.dispatch);
    assert_eq!(a.expected_profit_usd, b.expected_profit_usd);
}

#[test]
fn solve_is_deterministic() {
    let problem = arbitrage_problem(350.0, Some(1.0));
    let a = solve(&problem).unwrap();
    let b = solve(&problem).unwrap();
    // Bit-identical apart from wall time.
    assert_eq!(a.dispatch, b.dispatch);
    assert_eq!(a.var_usd, b.var_usd);
    assert_eq!(a.objective_usd, b.objective_usd);
    assert_eq!(a.tail_shortfalls_usd, b.tail_shortfalls_usd);
    assert_eq!(a.cod_costs_usd, b.cod_costs_usd);
    assert_eq!(a.expected_profit_usd, b.expected_profit_usd);
    assert_eq!(a.stats.nodes, b.stats.nodes);
    assert_eq!(a.stats.gap, b.stats.gap);
}

#[test]
fn restricted_problem_keeps_selected_batteries() {
    let market = single_market(2);
    let scenarios =
        PriceScenarioSet { samples: vec![PriceMatrix::new(vec![vec![0.1, 0.4]]).unwrap()] };
    let problem = build_problem(
        vec![battery(350.0), battery(450.0), battery(550.0)],
        vec![diag_form(2, 1e-8); 3],
        market,
        scenarios,
        0.5,
        None,
        SolverOptions::default(),
    )
    .unwrap();
    let sub = problem.restricted_to(0b101);
    assert_eq!(sub.batteries.len(), 2);
    assert_eq!(sub.batteries[0].cod_coeff_usd_per_kwh, 350.0);
    assert_eq!(sub.batteries[1].cod_coeff_usd_per_kwh, 550.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Coherence ordering on arbitrary profit vectors.
    #[test]
    fn cvar_never_exceeds_var(
        profits in proptest::collection::vec(-1e3..1e3f64, 1..60),
        alpha in 0.05..0.99f64,
    ) {
        let (var, cvar) = var_cvar(&profits, alpha).unwrap();
        prop_assert!(cvar <= var + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    // The continuous relaxation bounds the integer optimum from above.
    #[test]
    fn relaxation_never_below_integer_optimum(
        price_a in 0.05..0.5f64,
        price_b in 0.05..0.5f64,
        capacity_market in any::<bool>(),
        cod in 0.0..500.0f64,
    ) {
        let market = MarketSpec {
            settlements: vec![if capacity_market {
                SettlementMode::Capacity
            } else {
                SettlementMode::NetEnergy
            }],
            trading_limits_kw: vec![800.0],
            dt_hours: 0.25,
            horizon: 2,
        };
        let scenarios = PriceScenarioSet {
            samples: vec![PriceMatrix::new(vec![vec![price_a, price_b]]).unwrap()],
        };
        let problem = build_problem(
            vec![battery(cod)],
            vec![diag_form(2, 1e-8)],
            market,
            scenarios,
            0.5,
            None,
            SolverOptions::default(),
        )
        .unwrap();
        let relaxed = solve_continuous_relaxation(&problem).unwrap();
        let sol = solve(&problem).unwrap();
        prop_assert!(sol.status != SolveStatus::Infeasible);
        prop_assert!(relaxed >= sol.objective_usd - 1e-5 * sol.objective_usd.abs().max(1.0));
    }
}
