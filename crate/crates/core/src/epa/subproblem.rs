//! Conic (second-order cone) relaxation solved at every search node.
//!
//! The exclusivity binaries are projected out: over the continuous
//! relaxation they are equivalent to the per-cell constraint
//! `P_c / P_c_max + P_d / P_d_max <= 1`, and a node fixes a cell by
//! forbidding one direction. The objective and the bound are unchanged by
//! this projection.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;

use super::{EpaError, EpaProblem, SettlementMode};

/// Cells where both directions carry at least this fraction of their power
/// limit are treated as fractional and branched on.
pub(crate) const OVERLAP_TOL: f64 = 1e-7;

/// Per-cell branching state. Both flags set never occurs; that cell would
/// simply be forced to zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct CellFix {
    pub charge_off: bool,
    pub discharge_off: bool,
}

/// Branching state of one node: one fix per (battery, market, interval)
/// cell, indexed by `Assembler::cell`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct NodeFix(pub Vec<CellFix>);

impl NodeFix {
    pub fn free(cells: usize) -> Self {
        NodeFix(vec![CellFix::default(); cells])
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NodeSolution {
    /// Maximization objective value (the relaxation bound).
    pub objective: f64,
    pub pc: Vec<f64>,
    pub pd: Vec<f64>,
    pub zeta: f64,
    pub ell: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Free cell with the largest charge/discharge overlap, if any.
    pub most_fractional: Option<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub(crate) enum NodeOutcome {
    Infeasible,
    Solved(NodeSolution),
}

/// Static problem data shared by all node solves.
pub(crate) struct Assembler {
    b: usize,
    m: usize,
    h: usize,
    s: usize,
    cells: usize,
    n_vars: usize,
    /// Square-root factors `U_j` with `c_j d'Q_j d = |U_j d|^2`; `None`
    /// when the scaled quadratic term vanishes.
    cone_factors: Vec<Option<DMatrix<f64>>>,
}

impl Assembler {
    pub fn new(problem: &EpaProblem) -> Result<Self, EpaError> {
        let b = problem.batteries.len();
        let m = problem.market.markets();
        let h = problem.market.horizon;
        let s = problem.scenarios.len();
        let cells = b * m * h;
        let n_vars = 2 * cells + 1 + s + b;

        let mut cone_factors = Vec::with_capacity(b);
        for (j, form) in problem.cod_forms.iter().enumerate() {
            let c = problem.batteries[j].cod_coeff_usd_per_kwh;
            if c == 0.0 {
                cone_factors.push(None);
                continue;
            }
            let scaled = &form.quadratic * c;
            let eig = nalgebra::SymmetricEigen::new(scaled);
            let max_eig = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            let cut = 1e-12 * max_eig.max(1e-300);
            if eig.eigenvalues.iter().any(|&v| v < -1e-7 * max_eig.max(1.0)) {
                return Err(EpaError::NonPsdCodForm { battery: j });
            }
            let kept: Vec<usize> =
                (0..h).filter(|&i| eig.eigenvalues[i] > cut).collect();
            if kept.is_empty() {
                cone_factors.push(None);
                continue;
            }
            let mut u = DMatrix::zeros(kept.len(), h);
            for (row, &i) in kept.iter().enumerate() {
                let scale = eig.eigenvalues[i].sqrt();
                for col in 0..h {
                    u[(row, col)] = scale * eig.eigenvectors[(col, i)];
                }
            }
            cone_factors.push(Some(u));
        }
        Ok(Self { b, m, h, s, cells, n_vars, cone_factors })
    }

    #[inline]
    pub fn cell(&self, battery: usize, market: usize, interval: usize) -> usize {
        (battery * self.m + market) * self.h + interval
    }

    /// Inverse of [`Assembler::cell`].
    pub fn cell_coords(&self, cell: usize) -> (usize, usize, usize) {
        let interval = cell % self.h;
        let rest = cell / self.h;
        (rest / self.m, rest % self.m, interval)
    }

    #[inline]
    fn var_pc(&self, cell: usize) -> usize {
        cell
    }

    #[inline]
    fn var_pd(&self, cell: usize) -> usize {
        self.cells + cell
    }

    #[inline]
    fn var_zeta(&self) -> usize {
        2 * self.cells
    }

    #[inline]
    fn var_ell(&self, scenario: usize) -> usize {
        2 * self.cells + 1 + scenario
    }

    #[inline]
    fn var_gamma(&self, battery: usize) -> usize {
        2 * self.cells + 1 + self.s + battery
    }

    /// Solves the node relaxation with the given cell fixes.
    pub fn solve_node(
        &self,
        problem: &EpaProblem,
        fix: &NodeFix,
    ) -> Result<NodeOutcome, EpaError> {
        let dt = problem.market.dt_hours;
        let mut rows: Vec<(usize, f64)> = Vec::new(); // (col, val) per constraint row
        let mut a_triplets: Vec<(usize, usize, f64)> = Vec::new();
        let mut b_vec: Vec<f64> = Vec::new();
        let mut row_count = 0usize;
        let mut push_row = |entries: &mut Vec<(usize, f64)>,
                            rhs: f64,
                            triplets: &mut Vec<(usize, usize, f64)>,
                            count: &mut usize,
                            b_out: &mut Vec<f64>| {
            for &(col, val) in entries.iter() {
                if val != 0.0 {
                    triplets.push((*count, col, val));
                }
            }
            entries.clear();
            b_out.push(rhs);
            *count += 1;
        };

        // Nonnegative cone: rows encode `A x <= b`.
        for j in 0..self.b {
            let spec = &problem.batteries[j];
            for mm in 0..self.m {
                for hh in 0..self.h {
                    let cell = self.cell(j, mm, hh);
                    let f = fix.0[cell];
                    let ub_c = if f.charge_off { 0.0 } else { spec.p_charge_max_kw };
                    let ub_d = if f.discharge_off { 0.0 } else { spec.p_discharge_max_kw };
                    rows.push((self.var_pc(cell), -1.0));
                    push_row(&mut rows, 0.0, &mut a_triplets, &mut row_count, &mut b_vec);
                    rows.push((self.var_pc(cell), 1.0));
                    push_row(&mut rows, ub_c, &mut a_triplets, &mut row_count, &mut b_vec);
                    rows.push((self.var_pd(cell), -1.0));
                    push_row(&mut rows, 0.0, &mut a_triplets, &mut row_count, &mut b_vec);
                    rows.push((self.var_pd(cell), 1.0));
                    push_row(&mut rows, ub_d, &mut a_triplets, &mut row_count, &mut b_vec);
                    if !f.charge_off && !f.discharge_off {
                        rows.push((self.var_pc(cell), 1.0 / spec.p_charge_max_kw));
                        rows.push((self.var_pd(cell), 1.0 / spec.p_discharge_max_kw));
                        push_row(&mut rows, 1.0, &mut a_triplets, &mut row_count, &mut b_vec);
                    }
                }
            }
        }

        // Coalition trading limits per market and interval.
        for mm in 0..self.m {
            let tl = problem.market.trading_limits_kw[mm];
            for hh in 0..self.h {
                for j in 0..self.b {
                    rows.push((self.var_pd(self.cell(j, mm, hh)), 1.0));
                }
                push_row(&mut rows, tl, &mut a_triplets, &mut row_count, &mut b_vec);
                for j in 0..self.b {
                    rows.push((self.var_pc(self.cell(j, mm, hh)), 1.0));
                }
                push_row(&mut rows, tl, &mut a_triplets, &mut row_count, &mut b_vec);
            }
        }

        // State-of-charge band. soc[h] is affine in the dispatch:
        // soc[h] = soc_init - sum_{t<=h} (pd_t/eff_d - eff_c pc_t) dt / E.
        for j in 0..self.b {
            let spec = &problem.batteries[j];
            let k_d = dt / (spec.capacity_kwh * spec.eff_discharge);
            let k_c = spec.eff_charge * dt / spec.capacity_kwh;
            for hh in 0..self.h {
                // soc <= soc_max: sum_t (k_c pc_t - k_d pd_t) <= soc_max - soc_init
                for t in 0..=hh {
                    for mm in 0..self.m {
                        let cell = self.cell(j, mm, t);
                        rows.push((self.var_pc(cell), k_c));
                        rows.push((self.var_pd(cell), -k_d));
                    }
                }
                push_row(
                    &mut rows,
                    spec.soc_max - spec.soc_init,
                    &mut a_triplets,
                    &mut row_count,
                    &mut b_vec,
                );
                // soc >= soc_min
                for t in 0..=hh {
                    for mm in 0..self.m {
                        let cell = self.cell(j, mm, t);
                        rows.push((self.var_pc(cell), -k_c));
                        rows.push((self.var_pd(cell), k_d));
                    }
                }
                push_row(
                    &mut rows,
                    spec.soc_init - spec.soc_min,
                    &mut a_triplets,
                    &mut row_count,
                    &mut b_vec,
                );
            }
        }

        // Tail constraints: ell_s <= revenue_s - sum_j gamma_j - zeta.
        for (sc, sample) in problem.scenarios.samples.iter().enumerate() {
            rows.push((self.var_ell(sc), 1.0));
            rows.push((self.var_zeta(), 1.0));
            for j in 0..self.b {
                rows.push((self.var_gamma(j), 1.0));
                for mm in 0..self.m {
                    let sign_c = match problem.market.settlements[mm] {
                        SettlementMode::NetEnergy => 1.0,
                        SettlementMode::Capacity => -1.0,
                    };
                    for hh in 0..self.h {
                        let w = sample.get(mm, hh) * dt;
                        let cell = self.cell(j, mm, hh);
                        rows.push((self.var_pd(cell), -w));
                        rows.push((self.var_pc(cell), sign_c * w));
                    }
                }
            }
            push_row(&mut rows, 0.0, &mut a_triplets, &mut row_count, &mut b_vec);
            rows.push((self.var_ell(sc), 1.0));
            push_row(&mut rows, 0.0, &mut a_triplets, &mut row_count, &mut b_vec);
        }

        // Profit floor on the guaranteed level.
        if let Some(floor) = problem.profit_floor {
            rows.push((self.var_zeta(), -1.0));
            push_row(&mut rows, -floor, &mut a_triplets, &mut row_count, &mut b_vec);
        }

        // Linear part of the degradation bound when the quadratic term
        // vanishes: gamma_j >= c_j (c0 + q.d).
        for j in 0..self.b {
            if self.cone_factors[j].is_some() {
                continue;
            }
            let c = problem.batteries[j].cod_coeff_usd_per_kwh;
            let form = &problem.cod_forms[j];
            rows.push((self.var_gamma(j), -1.0));
            if c != 0.0 {
                for hh in 0..self.h {
                    let w = c * form.linear[hh];
                    for mm in 0..self.m {
                        let cell = self.cell(j, mm, hh);
                        rows.push((self.var_pd(cell), w));
                        rows.push((self.var_pc(cell), -w));
                    }
                }
            }
            let rhs = -c * form.constant;
            push_row(&mut rows, rhs, &mut a_triplets, &mut row_count, &mut b_vec);
        }

        let nonneg_rows = row_count;

        // Second-order cones: gamma_j - c(c0 + q.d) >= |U_j d|^2 as
        // ||(t - 1/2, sqrt(2) U d)|| <= t + 1/2.
        let mut cones: Vec<SupportedConeT<f64>> =
            vec![SupportedConeT::NonnegativeConeT(nonneg_rows)];
        let sqrt2 = 2.0f64.sqrt();
        for j in 0..self.b {
            let Some(u) = &self.cone_factors[j] else { continue };
            let c = problem.batteries[j].cod_coeff_usd_per_kwh;
            let form = &problem.cod_forms[j];
            // s0 = t + 1/2 with t = gamma - c*c0 - c*q.d
            for offset in 0..2 {
                rows.push((self.var_gamma(j), -1.0));
                for hh in 0..self.h {
                    let w = c * form.linear[hh];
                    for mm in 0..self.m {
                        let cell = self.cell(j, mm, hh);
                        rows.push((self.var_pd(cell), w));
                        rows.push((self.var_pc(cell), -w));
                    }
                }
                let rhs = if offset == 0 { 0.5 - c * form.constant } else { -0.5 - c * form.constant };
                push_row(&mut rows, rhs, &mut a_triplets, &mut row_count, &mut b_vec);
            }
            for r in 0..u.nrows() {
                for hh in 0..self.h {
                    let w = -sqrt2 * u[(r, hh)];
                    if w != 0.0 {
                        for mm in 0..self.m {
                            let cell = self.cell(j, mm, hh);
                            rows.push((self.var_pd(cell), w));
                            rows.push((self.var_pc(cell), -w));
                        }
                    }
                }
                push_row(&mut rows, 0.0, &mut a_triplets, &mut row_count, &mut b_vec);
            }
            cones.push(SupportedConeT::SecondOrderConeT(u.nrows() + 2));
        }

        // Objective: maximize zeta + sum_s ell_s / ((1-alpha) S).
        let mut q = vec![0.0; self.n_vars];
        q[self.var_zeta()] = -1.0;
        let tail_weight = 1.0 / ((1.0 - problem.alpha) * self.s as f64);
        for sc in 0..self.s {
            q[self.var_ell(sc)] = -tail_weight;
        }

        let a = csc_from_triplets(row_count, self.n_vars, &mut a_triplets);
        let p = CscMatrix::<f64>::zeros((self.n_vars, self.n_vars));
        let settings = DefaultSettings {
            verbose: false,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p, &q, &a, &b_vec, &cones, settings);
        solver.solve();

        match solver.solution.status {
            SolverStatus::Solved
            | SolverStatus::AlmostSolved
            | SolverStatus::MaxIterations
            | SolverStatus::InsufficientProgress => {
                let x = &solver.solution.x;
                let pc: Vec<f64> = (0..self.cells).map(|c| x[self.var_pc(c)].max(0.0)).collect();
                let pd: Vec<f64> = (0..self.cells).map(|c| x[self.var_pd(c)].max(0.0)).collect();
                let mut most_fractional = None;
                for cell in 0..self.cells {
                    let f = fix.0[cell];
                    if f.charge_off || f.discharge_off {
                        continue;
                    }
                    let (j, _, _) = self.cell_coords(cell);
                    let spec = &problem.batteries[j];
                    let overlap =
                        (pc[cell] / spec.p_charge_max_kw).min(pd[cell] / spec.p_discharge_max_kw);
                    if overlap > OVERLAP_TOL {
                        match most_fractional {
                            Some((_, best)) if overlap <= best => {}
                            _ => most_fractional = Some((cell, overlap)),
                        }
                    }
                }
                Ok(NodeOutcome::Solved(NodeSolution {
                    objective: -solver.solution.obj_val,
                    pc,
                    pd,
                    zeta: x[self.var_zeta()],
                    ell: (0..self.s).map(|sc| x[self.var_ell(sc)]).collect(),
                    gamma: (0..self.b).map(|j| x[self.var_gamma(j)]).collect(),
                    most_fractional,
                }))
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                Ok(NodeOutcome::Infeasible)
            }
            other => Err(EpaError::Solver(format!("node relaxation ended with status {other:?}"))),
        }
    }
}

/// Builds a compressed sparse column matrix from (row, col, value)
/// triplets, summing duplicates.
fn csc_from_triplets(
    nrows: usize,
    ncols: usize,
    triplets: &mut Vec<(usize, usize, f64)>,
) -> CscMatrix<f64> {
    triplets.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = Vec::with_capacity(ncols + 1);
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(triplets.len());
    let mut col = 0usize;
    let mut last: Option<(usize, usize)> = None;
    colptr.push(0);
    for &(r, c, v) in triplets.iter() {
        while col < c {
            colptr.push(rowval.len());
            col += 1;
        }
        if last == Some((c, r)) {
            *nzval.last_mut().unwrap() += v;
            continue;
        }
        rowval.push(r);
        nzval.push(v);
        last = Some((c, r));
    }
    while col < ncols {
        colptr.push(rowval.len());
        col += 1;
    }
    CscMatrix::new(nrows, ncols, colptr, rowval, nzval)
}
