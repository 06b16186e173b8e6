//! Rainflow cycle counting over state-of-charge profiles.
//!
//! Three-point counting in the style of ASTM E1049-85: plateaus are
//! collapsed, turning points extracted, matched ranges counted as full
//! cycles and the residual as half cycles. Depths are absolute SoC ranges.

use serde::{Deserialize, Serialize};

/// Cycle depths below this are treated as numerical noise and dropped.
pub const MIN_CYCLE_DEPTH: f64 = 1e-9;

/// One equivalent cycle: an SoC range traversed twice (weight 1.0) or once
/// (weight 0.5). Indices refer to the input trajectory; a collapsed plateau
/// keeps the index of its first sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cycle {
    pub depth: f64,
    pub weight: f64,
    pub start_index: usize,
    pub end_index: usize,
}

/// The set of equivalent cycles extracted from one trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleSet {
    pub cycles: Vec<Cycle>,
}

impl CycleSet {
    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }

    /// `sum_i 2 * n_i * depth_i`: equals the total variation of the turning
    /// point sequence (full cycles traverse their depth twice, halves once).
    pub fn total_weighted_range(&self) -> f64 {
        self.cycles.iter().map(|c| 2.0 * c.weight * c.depth).sum()
    }
}

/// Turning points of a trajectory: strict local extrema plus both
/// endpoints, with plateaus of repeated values collapsed to their first
/// sample. Returns `(index, value)` pairs.
pub fn turning_points(values: &[f64]) -> Vec<(usize, f64)> {
    let mut dedup: Vec<(usize, f64)> = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        match dedup.last() {
            Some(&(_, last)) if last == v => {}
            _ => dedup.push((i, v)),
        }
    }
    if dedup.len() <= 2 {
        return dedup;
    }
    let mut points = Vec::with_capacity(dedup.len());
    points.push(dedup[0]);
    for w in dedup.windows(3) {
        let (prev, cur, next) = (w[0].1, w[1].1, w[2].1);
        if (cur > prev && cur > next) || (cur < prev && cur < next) {
            points.push(w[1]);
        }
    }
    points.push(*dedup.last().unwrap());
    points
}

/// Extracts equivalent full and half cycles from an SoC trajectory.
///
/// Matched three-point ranges emit full cycles (weight 1.0); a range that
/// still contains the running start point, and every residual range left at
/// the end of the data, emits a half cycle (weight 0.5). A constant
/// trajectory yields an empty set.
pub fn count_cycles(soc: &[f64]) -> CycleSet {
    let mut cycles = Vec::new();
    let mut emit = |weight: f64, a: (usize, f64), b: (usize, f64)| {
        let depth = (b.1 - a.1).abs();
        if depth >= MIN_CYCLE_DEPTH {
            cycles.push(Cycle { depth, weight, start_index: a.0, end_index: b.0 });
        }
    };

    // Stack of not-yet-closed turning points; stack[0] is the running start
    // point, so a range touching it is counted as a half cycle.
    let mut stack: Vec<(usize, f64)> = Vec::new();
    for point in turning_points(soc) {
        stack.push(point);
        loop {
            let n = stack.len();
            if n < 3 {
                break;
            }
            let x = (stack[n - 1].1 - stack[n - 2].1).abs();
            let y = (stack[n - 2].1 - stack[n - 3].1).abs();
            if x < y {
                break;
            }
            if n == 3 {
                emit(0.5, stack[0], stack[1]);
                stack.remove(0);
            } else {
                emit(1.0, stack[n - 3], stack[n - 2]);
                stack.drain(n - 3..n - 1);
            }
        }
    }
    for w in stack.windows(2) {
        emit(0.5, w[0], w[1]);
    }
    CycleSet { cycles }
}
