//! Best-first branch-and-bound over the charge/discharge exclusivity
//! decisions, with one conic relaxation per node.
//!
//! A relaxation solution whose cells never carry both directions at once
//! is feasible for the integer problem, so it closes its node exactly.
//! Branching picks the free cell with the largest overlap
//! `min(P_c / P_c_max, P_d / P_d_max)` and forbids one direction per
//! child. Ties in the node bound break toward deeper, more recently
//! created nodes, which makes the search dive.

use std::collections::BinaryHeap;
use std::time::Instant;

use crate::battery::DispatchSchedule;

use super::subproblem::{Assembler, CellFix, NodeFix, NodeOutcome, NodeSolution};
use super::{EpaError, EpaProblem, EpaSolution, SolveStatus, SolverStats};

/// Cell-pattern enumeration cap for [`super::solve_enumerated`].
pub const ENUMERATION_CELL_LIMIT: usize = 12;

struct OpenNode {
    bound: f64,
    depth: u32,
    id: u64,
    fix: NodeFix,
    branch_cell: usize,
}

impl PartialEq for OpenNode {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound && self.depth == other.depth && self.id == other.id
    }
}
impl Eq for OpenNode {}
impl PartialOrd for OpenNode {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OpenNode {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.bound
            .total_cmp(&other.bound)
            .then(self.depth.cmp(&other.depth))
            .then(self.id.cmp(&other.id))
    }
}

fn gap_closed(upper: f64, incumbent: f64, rel_target: f64) -> bool {
    let diff = upper - incumbent;
    diff <= 1e-9 * upper.abs().max(1.0) || diff <= rel_target * incumbent.abs().max(1e-6)
}

fn relative_gap(upper: f64, incumbent: f64) -> f64 {
    ((upper - incumbent).max(0.0)) / incumbent.abs().max(1e-6)
}

/// One-sided fix of every free cell toward its dominant direction in the
/// given relaxation solution; used as a dive heuristic for an incumbent.
fn rounded_fix(fix: &NodeFix, sol: &NodeSolution) -> NodeFix {
    let mut out = fix.clone();
    for cell in 0..out.0.len() {
        if out.0[cell].charge_off || out.0[cell].discharge_off {
            continue;
        }
        if sol.pd[cell] >= sol.pc[cell] {
            out.0[cell] = CellFix { charge_off: true, discharge_off: false };
        } else {
            out.0[cell] = CellFix { charge_off: false, discharge_off: true };
        }
    }
    out
}

pub(super) fn branch_and_bound(problem: &EpaProblem) -> Result<EpaSolution, EpaError> {
    let start = Instant::now();
    let asm = Assembler::new(problem)?;
    let cells = problem.num_cells();
    let mut nodes: u64 = 0;

    let root_fix = NodeFix::free(cells);
    nodes += 1;
    let root = match asm.solve_node(problem, &root_fix)? {
        NodeOutcome::Infeasible => {
            let diagnostic = diagnose_infeasibility(problem, &asm, &root_fix, &mut nodes)?;
            let stats =
                SolverStats { nodes, gap: f64::INFINITY, wall_time_s: start.elapsed().as_secs_f64() };
            return Ok(EpaSolution::infeasible(problem, diagnostic, stats));
        }
        NodeOutcome::Solved(sol) => sol,
    };

    let mut incumbent: Option<NodeSolution> = None;
    let mut heap: BinaryHeap<OpenNode> = BinaryHeap::new();
    let mut next_id: u64 = 0;
    let mut status = SolveStatus::Optimal;
    let mut upper = root.objective;

    match root.most_fractional {
        None => incumbent = Some(root),
        Some((cell, _)) => {
            // Dive once for an initial incumbent; the fully fixed pattern
            // cannot be fractional.
            let dive = rounded_fix(&root_fix, &root);
            nodes += 1;
            if let NodeOutcome::Solved(sol) = asm.solve_node(problem, &dive)? {
                incumbent = Some(sol);
            }
            heap.push(OpenNode {
                bound: root.objective,
                depth: 0,
                id: next_id,
                fix: root_fix,
                branch_cell: cell,
            });
            next_id += 1;
        }
    }

    while let Some(top) = heap.pop() {
        upper = top.bound;
        let inc_val = incumbent.as_ref().map(|s| s.objective).unwrap_or(f64::NEG_INFINITY);
        if gap_closed(upper, inc_val, problem.options.mip_gap) {
            break;
        }
        if nodes >= problem.options.node_limit {
            status = SolveStatus::GapReached;
            break;
        }
        if let Some(limit) = problem.options.time_limit_s {
            if start.elapsed().as_secs_f64() > limit {
                status = SolveStatus::GapReached;
                break;
            }
        }

        for side in [
            CellFix { charge_off: true, discharge_off: false },
            CellFix { charge_off: false, discharge_off: true },
        ] {
            let mut child_fix = top.fix.clone();
            child_fix.0[top.branch_cell] = side;
            nodes += 1;
            match asm.solve_node(problem, &child_fix)? {
                NodeOutcome::Infeasible => {}
                NodeOutcome::Solved(sol) => {
                    // Solver round-off must not lift a child above its parent.
                    let bound = sol.objective.min(top.bound);
                    let inc_val =
                        incumbent.as_ref().map(|s| s.objective).unwrap_or(f64::NEG_INFINITY);
                    match sol.most_fractional {
                        None => {
                            if sol.objective > inc_val {
                                incumbent = Some(sol);
                            }
                        }
                        Some((cell, _)) => {
                            if !gap_closed(bound, inc_val, problem.options.mip_gap) {
                                heap.push(OpenNode {
                                    bound,
                                    depth: top.depth + 1,
                                    id: next_id,
                                    fix: child_fix,
                                    branch_cell: cell,
                                });
                                next_id += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    let wall = start.elapsed().as_secs_f64();
    match incumbent {
        Some(sol) => {
            let gap = if status == SolveStatus::Optimal && heap.is_empty() {
                0.0
            } else {
                relative_gap(upper, sol.objective)
            };
            Ok(finish(problem, sol, status, gap, SolverStats { nodes, gap: 0.0, wall_time_s: wall }))
        }
        None => {
            let diagnostic = if status == SolveStatus::GapReached {
                "search limit reached before any feasible exclusive dispatch pattern was found"
                    .to_string()
            } else {
                match problem.profit_floor {
                    Some(floor) => format!(
                        "profit floor {floor} is unattainable by every exclusive charge/discharge pattern"
                    ),
                    None => "no feasible exclusive dispatch pattern exists".to_string(),
                }
            };
            let stats = SolverStats { nodes, gap: f64::INFINITY, wall_time_s: wall };
            Ok(EpaSolution::infeasible(problem, diagnostic, stats))
        }
    }
}

fn diagnose_infeasibility(
    problem: &EpaProblem,
    asm: &Assembler,
    root_fix: &NodeFix,
    nodes: &mut u64,
) -> Result<String, EpaError> {
    if let Some(floor) = problem.profit_floor {
        let unfloored = EpaProblem { profit_floor: None, ..problem.clone() };
        *nodes += 1;
        if let NodeOutcome::Solved(sol) = asm.solve_node(&unfloored, root_fix)? {
            return Ok(format!(
                "profit floor {floor} exceeds what the coalition can guarantee; without the floor the co-optimal guaranteed level is about {:.4}",
                sol.zeta
            ));
        }
        return Ok(
            "operational or market constraints are mutually infeasible (independent of the profit floor)"
                .to_string(),
        );
    }
    Ok("operational or market constraints are mutually infeasible".to_string())
}

/// Builds the public solution from an incumbent node solution.
fn finish(
    problem: &EpaProblem,
    sol: NodeSolution,
    status: SolveStatus,
    gap: f64,
    mut stats: SolverStats,
) -> EpaSolution {
    stats.gap = gap;
    let b = problem.batteries.len();
    let m = problem.market.markets();
    let h = problem.market.horizon;
    let mut dispatch = vec![DispatchSchedule::zeros(m, h); b];
    for j in 0..b {
        let spec = &problem.batteries[j];
        for mm in 0..m {
            for hh in 0..h {
                let cell = (j * m + mm) * h + hh;
                let (mut pc, mut pd) = (sol.pc[cell], sol.pd[cell]);
                // Exclusivity holds up to solver tolerance; drop the dust
                // on the smaller side.
                if pc <= pd {
                    pc = 0.0;
                } else {
                    pd = 0.0;
                }
                let mut d = pd - pc;
                if d.abs() < 1e-9 * spec.p_charge_max_kw.max(spec.p_discharge_max_kw) {
                    d = 0.0;
                }
                d = d.clamp(-spec.p_charge_max_kw, spec.p_discharge_max_kw);
                dispatch[j].set(mm, hh, d);
            }
        }
    }
    let mut zeta = sol.zeta;
    if let Some(floor) = problem.profit_floor {
        // Solver tolerance can leave zeta a hair under the floor.
        if zeta >= floor - 1e-6 {
            zeta = zeta.max(floor);
        }
    }
    let tail: Vec<f64> = sol.ell.iter().map(|&l| l.min(0.0)).collect();
    let profits = super::scenario_profits_with_forms(
        &dispatch,
        &problem.scenarios,
        &problem.cod_forms,
        &problem.batteries,
        &problem.market,
    );
    let expected = profits.iter().sum::<f64>() / profits.len().max(1) as f64;
    // The tail variables absorb any floor, so the conic model itself never
    // rejects one. The floor is a guarantee, though: the probability of
    // profit below the guaranteed level must stay within 1 - alpha, and a
    // floor above what the coalition can earn breaks that for every
    // dispatch.
    if let Some(floor) = problem.profit_floor {
        let s = profits.len();
        let tol = 1e-6 * zeta.abs().max(1.0);
        let below = profits.iter().filter(|&&p| p < zeta - tol).count();
        let allowance = (1.0 - problem.alpha) * s as f64 + 1e-9;
        if below as f64 > allowance {
            let diagnostic = format!(
                "profit floor {floor} cannot be guaranteed at confidence {}: {below} of {s} scenario profits fall below the guaranteed level {zeta:.4} (allowance {:.2})",
                problem.alpha,
                (1.0 - problem.alpha) * s as f64
            );
            return EpaSolution::infeasible(problem, diagnostic, stats);
        }
    }
    EpaSolution {
        status,
        dispatch,
        var_usd: zeta,
        objective_usd: sol.objective,
        tail_shortfalls_usd: tail,
        cod_costs_usd: sol.gamma.clone(),
        expected_profit_usd: expected,
        stats,
        diagnostic: None,
    }
}

/// Objective of the continuous relaxation (exclusivity dropped), the bound
/// the search starts from.
pub fn solve_continuous_relaxation(problem: &EpaProblem) -> Result<f64, EpaError> {
    let asm = Assembler::new(problem)?;
    match asm.solve_node(problem, &NodeFix::free(problem.num_cells()))? {
        NodeOutcome::Infeasible => {
            Err(EpaError::Solver("continuous relaxation infeasible".into()))
        }
        NodeOutcome::Solved(sol) => Ok(sol.objective),
    }
}

pub(super) fn solve_enumerated(problem: &EpaProblem) -> Result<EpaSolution, EpaError> {
    let start = Instant::now();
    let cells = problem.num_cells();
    if cells > ENUMERATION_CELL_LIMIT {
        return Err(EpaError::TooManyCells { cells, limit: ENUMERATION_CELL_LIMIT });
    }
    let asm = Assembler::new(problem)?;
    let mut best: Option<NodeSolution> = None;
    let mut nodes = 0u64;
    // Every integer point allows at most one direction per cell, so the
    // 2^cells one-sided patterns cover the whole integer feasible set.
    for pattern in 0u64..(1 << cells) {
        let fix = NodeFix(
            (0..cells)
                .map(|c| {
                    if pattern & (1 << c) != 0 {
                        CellFix { charge_off: true, discharge_off: false }
                    } else {
                        CellFix { charge_off: false, discharge_off: true }
                    }
                })
                .collect(),
        );
        nodes += 1;
        if let NodeOutcome::Solved(sol) = asm.solve_node(problem, &fix)? {
            if best.as_ref().map(|b| sol.objective > b.objective).unwrap_or(true) {
                best = Some(sol);
            }
        }
    }
    let wall = start.elapsed().as_secs_f64();
    match best {
        Some(sol) => Ok(finish(
            problem,
            sol,
            SolveStatus::Optimal,
            0.0,
            SolverStats { nodes, gap: 0.0, wall_time_s: wall },
        )),
        None => Ok(EpaSolution::infeasible(
            problem,
            "every exclusive charge/discharge pattern is infeasible".to_string(),
            SolverStats { nodes, gap: f64::INFINITY, wall_time_s: wall },
        )),
    }
}
