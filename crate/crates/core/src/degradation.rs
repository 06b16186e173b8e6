//! Ground-truth degradation: cycle stress, cumulative capacity loss, the
//! dispatch-to-degradation pipeline and training-dataset generation.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::battery::{soc_trajectory, BatterySpec};
use crate::rainflow::{count_cycles, CycleSet};

/// Attempts allowed per dataset sample before generation is declared
/// stalled; exhausting it means a rejection rate above 99.9%.
pub const MAX_ATTEMPTS_PER_SAMPLE: usize = 1000;

#[derive(Debug, Error)]
pub enum DegradationError {
    #[error("cycle depth {0} outside [0, 1]")]
    DepthOutOfRange(f64),
    #[error("dispatch infeasible: state of charge {soc:.6} outside [{soc_min}, {soc_max}] after interval {interval}")]
    SocInfeasible { interval: usize, soc: f64, soc_min: f64, soc_max: f64 },
    #[error("dataset generation stalled at sample {sample}: no feasible dispatch in {attempts} attempts (rejection rate above 99.9%); widen the SoC band or reduce power limits")]
    SamplingStalled { sample: usize, attempts: usize },
    #[error("dataset file: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset CSV is malformed: {0}")]
    MalformedCsv(String),
    #[error("dataset metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

/// Cycle stress `a1 * depth^a2` as a function of depth of discharge.
pub fn stress(depth: f64, a1: f64, a2: f64) -> Result<f64, DegradationError> {
    if !(0.0..=1.0).contains(&depth) {
        return Err(DegradationError::DepthOutOfRange(depth));
    }
    Ok(a1 * depth.powf(a2))
}

/// Cumulative capacity loss in kWh: rated capacity times the weighted sum
/// of per-cycle stresses.
pub fn empirical_degradation(spec: &BatterySpec, cycles: &CycleSet) -> f64 {
    spec.rated_capacity_kwh
        * cycles
            .cycles
            .iter()
            .map(|c| c.weight * spec.stress_a1 * c.depth.powf(spec.stress_a2))
            .sum::<f64>()
}

/// Full pipeline: dispatch -> SoC -> rainflow -> cumulative degradation.
///
/// Fails if the SoC trajectory leaves the permitted band, naming the first
/// violating interval; such a dispatch has no defined degradation sample.
pub fn degradation_of_dispatch(
    spec: &BatterySpec,
    net_kw: &[f64],
    dt_hours: f64,
) -> Result<f64, DegradationError> {
    let soc = soc_trajectory(spec, net_kw, dt_hours);
    for (h, &s) in soc.values().iter().enumerate().skip(1) {
        if s < spec.soc_min - crate::battery::SOC_EPS || s > spec.soc_max + crate::battery::SOC_EPS
        {
            return Err(DegradationError::SocInfeasible {
                interval: h,
                soc: s,
                soc_min: spec.soc_min,
                soc_max: spec.soc_max,
            });
        }
    }
    Ok(empirical_degradation(spec, &count_cycles(soc.values())))
}

/// Provenance of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub seed: u64,
    pub dt_hours: f64,
    pub spec: BatterySpec,
    pub spec_sha256: String,
}

/// Training data for the degradation estimation function: one aggregated
/// signed dispatch row per sample together with its degradation in kWh.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationDataset {
    /// N rows of length H, signed kW.
    pub rows: Vec<Vec<f64>>,
    /// N degradation targets (kWh).
    pub targets_kwh: Vec<f64>,
    pub meta: DatasetMeta,
}

impl DegradationDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.rows.first().map(|r| r.len()).unwrap_or(0)
    }

    /// Writes the data as CSV with header `h1..hH,psi`.
    pub fn write_csv(&self, path: &Path) -> Result<(), DegradationError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (1..=self.horizon())
            .map(|h| format!("h{h}"))
            .chain(std::iter::once("psi".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (row, psi) in self.rows.iter().zip(&self.targets_kwh) {
            let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            fields.push(psi.to_string());
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }

    /// Writes the sidecar JSON with seed, battery spec and interval length.
    pub fn write_meta(&self, path: &Path) -> Result<(), DegradationError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut out, &self.meta)?;
        writeln!(out)?;
        Ok(())
    }

    /// Reads a dataset from its CSV and sidecar JSON files.
    pub fn read(csv_path: &Path, meta_path: &Path) -> Result<Self, DegradationError> {
        let meta: DatasetMeta = serde_json::from_reader(std::fs::File::open(meta_path)?)?;
        let reader = BufReader::new(std::fs::File::open(csv_path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| DegradationError::MalformedCsv("empty file".into()))??;
        let cols = header.split(',').count();
        if cols < 2 || !header.ends_with("psi") {
            return Err(DegradationError::MalformedCsv(format!(
                "expected header h1..hH,psi, got {header}"
            )));
        }
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(DegradationError::MalformedCsv(format!(
                    "row {} has {} fields, expected {cols}",
                    i + 1,
                    fields.len()
                )));
            }
            let mut parsed = Vec::with_capacity(cols);
            for f in &fields {
                parsed.push(f.parse::<f64>().map_err(|e| {
                    DegradationError::MalformedCsv(format!("row {}: {e}", i + 1))
                })?);
            }
            let psi = parsed.pop().unwrap();
            rows.push(parsed);
            targets.push(psi);
        }
        Ok(Self { rows, targets_kwh: targets, meta })
    }
}

/// Stable content hash of a battery spec (SHA-256 of its canonical JSON).
pub fn spec_sha256(spec: &BatterySpec) -> String {
    let json = serde_json::to_string(spec).expect("spec serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Generates `n` SoC-feasible aggregated dispatch samples and their
/// degradation targets.
///
/// Candidates mix two schemes 50/50 by sample index: even samples draw each
/// coordinate uniformly in `[-p_charge_max, p_discharge_max]`, odd samples
/// draw a uniform direction scaled to a uniform fraction of the distance to
/// the box boundary, which concentrates mass near the boundary. Every
/// sample has its own counter-based RNG stream, so output is deterministic
/// for a given seed regardless of worker count.
pub fn generate_dataset(
    spec: &BatterySpec,
    horizon: usize,
    n: usize,
    dt_hours: f64,
    seed: u64,
) -> Result<DegradationDataset, DegradationError> {
    assert!(horizon >= 1, "horizon must be >= 1");
    assert!(n >= 1, "sample count must be >= 1");
    let results: Vec<Result<(Vec<f64>, f64), DegradationError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            for _ in 0..MAX_ATTEMPTS_PER_SAMPLE {
                let candidate = if i % 2 == 0 {
                    sample_uniform(spec, horizon, &mut rng)
                } else {
                    sample_directional(spec, horizon, &mut rng)
                };
                match degradation_of_dispatch(spec, &candidate, dt_hours) {
                    Ok(psi) => return Ok((candidate, psi)),
                    Err(DegradationError::SocInfeasible { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(DegradationError::SamplingStalled { sample: i, attempts: MAX_ATTEMPTS_PER_SAMPLE })
        })
        .collect();

    let mut rows = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for r in results {
        let (row, psi) = r?;
        rows.push(row);
        targets.push(psi);
    }
    let meta = DatasetMeta {
        format_version: 1,
        seed,
        dt_hours,
        spec: spec.clone(),
        spec_sha256: spec_sha256(spec),
    };
    Ok(DegradationDataset { rows, targets_kwh: targets, meta })
}

fn sample_uniform(spec: &BatterySpec, horizon: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..horizon)
        .map(|_| rng.gen_range(-spec.p_charge_max_kw..=spec.p_discharge_max_kw))
        .collect()
}

fn sample_directional(spec: &BatterySpec, horizon: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        // Standard normal direction via Box-Muller.
        let mut dir: Vec<f64> = Vec::with_capacity(horizon);
        while dir.len() < horizon {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            dir.push(r * theta.cos());
            if dir.len() < horizon {
                dir.push(r * theta.sin());
            }
        }
        // Largest step keeping every coordinate inside the asymmetric box;
        // scaling by s_max puts the ray exactly on the boundary.
        let mut s_max = f64::INFINITY;
        for &v in &dir {
            if v > 0.0 {
                s_max = s_max.min(spec.p_discharge_max_kw / v);
            } else if v < 0.0 {
                s_max = s_max.min(spec.p_charge_max_kw / -v);
            }
        }
        if !s_max.is_finite() {
            continue;
        }
        let t: f64 = rng.gen();
        return dir.iter().map(|&v| t * s_max * v).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::{check_feasible, DispatchSchedule};
    use approx::assert_relative_eq;

    fn spec_500() -> BatterySpec {
        BatterySpec::new(500.0)
    }

    #[test]
    fn stress_at_zero_depth() {
        assert_eq!(stress(0.0, 5.24e-4, 2.03).unwrap(), 0.0);
    }

    #[test]
    fn stress_at_full_depth_is_a1() {
        assert_relative_eq!(stress(1.0, 5.24e-4, 2.03).unwrap(), 5.24e-4, max_relative = 1e-15);
    }

    #[test]
    fn stress_at_half_depth() {
        // Direct evaluation of a1 * 0.5^a2.
        let expected = 5.24e-4 * 0.5f64.powf(2.03);
        assert_relative_eq!(stress(0.5, 5.24e-4, 2.03).unwrap(), expected, max_relative = 1e-15);
        assert_relative_eq!(expected, 1.2830405898388745e-4, max_relative = 1e-12);
    }

    #[test]
    fn stress_rejects_out_of_range_depth() {
        assert!(stress(-0.1, 5.24e-4, 2.03).is_err());
        assert!(stress(1.1, 5.24e-4, 2.03).is_err());
    }

    #[test]
    fn empirical_degradation_empty_set_is_zero() {
        assert_eq!(empirical_degradation(&spec_500(), &CycleSet::default()), 0.0);
    }

    #[test]
    fn empirical_degradation_one_full_cycle() {
        let cycles = count_cycles(&[1.0, 0.0, 1.0]);
        assert_relative_eq!(
            empirical_degradation(&spec_500(), &cycles),
            0.262,
            max_relative = 1e-12
        );
    }

    #[test]
    fn empirical_degradation_two_half_cycles() {
        let cycles = count_cycles(&[0.2, 0.8, 0.2]);
        let expected = 500.0 * (0.5 + 0.5) * 5.24e-4 * 0.6f64.powf(2.03);
        assert_relative_eq!(
            empirical_degradation(&spec_500(), &cycles),
            expected,
            max_relative = 1e-12
        );
        assert!((expected - 0.0929).abs() < 1e-4);
    }

    #[test]
    fn pipeline_zero_dispatch_is_zero() {
        assert_eq!(degradation_of_dispatch(&spec_500(), &[0.0, 0.0, 0.0], 0.25).unwrap(), 0.0);
    }

    #[test]
    fn pipeline_full_swing_example() {
        let mut spec = spec_500();
        spec.soc_init = 0.8;
        spec.p_charge_max_kw = 1200.0;
        spec.p_discharge_max_kw = 1200.0;
        let psi = degradation_of_dispatch(&spec, &[1200.0, -1200.0], 0.25).unwrap();
        let expected = 500.0 * 5.24e-4 * 0.6f64.powf(2.03);
        assert_relative_eq!(psi, expected, max_relative = 1e-12);
    }

    #[test]
    fn pipeline_rejects_charging_at_full_soc() {
        let mut spec = spec_500();
        spec.soc_init = spec.soc_max;
        let err = degradation_of_dispatch(&spec, &[-400.0], 0.25).unwrap_err();
        match err {
            DegradationError::SocInfeasible { interval, .. } => assert_eq!(interval, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn dataset_rows_are_feasible_and_bounded() {
        let spec = spec_500();
        let ds = generate_dataset(&spec, 4, 100, 0.25, 7).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.horizon(), 4);
        for (row, psi) in ds.rows.iter().zip(&ds.targets_kwh) {
            assert!(*psi >= 0.0);
            for &v in row {
                assert!(v >= -spec.p_charge_max_kw - 1e-12);
                assert!(v <= spec.p_discharge_max_kw + 1e-12);
            }
            let schedule = DispatchSchedule::new(vec![row.clone()]).unwrap();
            assert!(check_feasible(&spec, &schedule, 0.25, true).is_feasible());
        }
    }

    #[test]
    fn dataset_is_seed_deterministic() {
        let spec = spec_500();
        let a = generate_dataset(&spec, 3, 40, 0.25, 11).unwrap();
        let b = generate_dataset(&spec, 3, 40, 0.25, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec, 3, 40, 0.25, 12).unwrap();
        assert_ne!(a.rows, c.rows);
    }

    #[test]
    fn dataset_generation_stalls_on_impossible_band() {
        // A power limit far above what the SoC band allows in one interval
        // makes nearly every draw infeasible.
        let mut spec = spec_500();
        spec.p_charge_max_kw = 4.0e6;
        spec.p_discharge_max_kw = 4.0e6;
        let err = generate_dataset(&spec, 6, 4, 0.25, 5).unwrap_err();
        assert!(matches!(err, DegradationError::SamplingStalled { .. }));
    }

    #[test]
    fn psi_invariant_to_appended_zeros() {
        let spec = spec_500();
        let d = [300.0, -150.0, 80.0];
        let base = degradation_of_dispatch(&spec, &d, 0.25).unwrap();
        let padded = degradation_of_dispatch(&spec, &[300.0, -150.0, 80.0, 0.0, 0.0], 0.25).unwrap();
        assert_relative_eq!(base, padded, max_relative = 1e-12);
    }

    #[test]
    fn scaling_a_single_excursion_is_monotone() {
        let spec = spec_500();
        let d = [400.0, -400.0];
        let full = degradation_of_dispatch(&spec, &d, 0.25).unwrap();
        let mut prev = 0.0;
        for k in 1..=10 {
            let s = k as f64 / 10.0;
            let scaled: Vec<f64> = d.iter().map(|v| v * s).collect();
            let psi = degradation_of_dispatch(&spec, &scaled, 0.25).unwrap();
            assert!(psi + 1e-15 >= prev, "psi not monotone at s={s}");
            prev = psi;
        }
        assert_relative_eq!(prev, full, max_relative = 1e-12);
    }

    #[test]
    fn stress_is_increasing_and_convex_for_a2_above_one() {
        let (a1, a2) = (5.24e-4, 2.03);
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let vals: Vec<f64> = grid.iter().map(|&d| stress(d, a1, a2).unwrap()).collect();
        for w in vals.windows(2) {
            assert!(w[1] >= w[0]);
        }
        for w in vals.windows(3) {
            assert!(w[2] - w[1] >= w[1] - w[0] - 1e-15);
        }
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let spec = spec_500();
        let ds = generate_dataset(&spec, 3, 25, 0.25, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("data.csv");
        let meta = dir.path().join("data.meta.json");
        ds.write_csv(&csv).unwrap();
        ds.write_meta(&meta).unwrap();
        let back = DegradationDataset::read(&csv, &meta).unwrap();
        assert_eq!(ds, back);
    }
}
