//! Pairs bootstrap bands for quantile contrasts and a coverage evaluator.

use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::estimator::{fit_curve, EstimatorError, FitConfig, QuantileCurveFit, QuantileGrid};
use crate::rng::{stream, StreamRole};
use crate::simulation::{generate_replicate, DgpSpec, GroundTruth, SimulationError};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("bootstrap needs at least 2 draws, got {0}")]
    TooFewDraws(usize),
    #[error("confidence level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("reporting threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("contrast ({a}, {b}) out of range for {levels} levels")]
    Contrast { a: usize, b: usize, levels: usize },
    #[error("coverage study needs at least one replication")]
    NoReplications,
    #[error("full-sample fit failed: {0}")]
    Fit(#[from] EstimatorError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMethod {
    #[default]
    Percentile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub draws: usize,
    pub seed: u64,
    pub level: f64,
    pub method: IntervalMethod,
    /// Minimum share of replicates that must report a grid point for the band
    /// to be valid there.
    pub threshold: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            draws: 200,
            seed: 0,
            level: 0.95,
            method: IntervalMethod::Percentile,
            threshold: 0.5,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.draws < 2 {
            return Err(InferenceError::TooFewDraws(self.draws));
        }
        check_level(self.level)?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(InferenceError::Threshold(self.threshold));
        }
        Ok(())
    }
}

fn check_level(level: f64) -> Result<(), InferenceError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(InferenceError::Level(level))
    }
}

/// `φ_a(u) - φ_b(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contrast {
    pub a: usize,
    pub b: usize,
}

impl Default for Contrast {
    fn default() -> Self {
        Self { a: 1, b: 0 }
    }
}

impl Contrast {
    fn check(self, levels: usize) -> Result<(), InferenceError> {
        if self.a < levels && self.b < levels {
            Ok(())
        } else {
            Err(InferenceError::Contrast {
                a: self.a,
                b: self.b,
                levels,
            })
        }
    }

    pub fn of(self, fit: &QuantileCurveFit, m: usize) -> Option<f64> {
        fit.contrast(m, self.a, self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub u: f64,
    pub lower: Option<f64>,
    pub point: Option<f64>,
    pub upper: Option<f64>,
    pub n_reported: usize,
    pub valid: bool,
}

impl BandRow {
    pub fn contains(&self, x: f64) -> bool {
        match (self.valid, self.lower, self.upper) {
            (true, Some(lo), Some(hi)) => lo <= x && x <= hi,
            _ => false,
        }
    }

    /// Whether the full-sample estimate lies inside the interval; `None` when
    /// either is undefined.
    pub fn point_inside(&self) -> Option<bool> {
        match (self.valid, self.lower, self.point, self.upper) {
            (true, Some(lo), Some(p), Some(hi)) => Some(lo <= p && p <= hi),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub contrast: Contrast,
    pub level: f64,
    pub draws: usize,
    pub rows: Vec<BandRow>,
}

impl ConfidenceBand {
    /// Columns `u, lower, point, upper, n_reported`; undefined cells are
    /// left empty and masked rows have empty bounds.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "u,lower,point,upper,n_reported")?;
        for r in &self.rows {
            let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let (lo, hi) = if r.valid { (r.lower, r.upper) } else { (None, None) };
            writeln!(out, "{},{},{},{},{}", r.u, cell(lo), cell(r.point), cell(hi), r.n_reported)?;
        }
        Ok(())
    }

    /// Share of valid rows whose interval holds the full-sample estimate.
    pub fn point_inside_share(&self) -> Option<f64> {
        let flags: Vec<bool> = self.rows.iter().filter_map(BandRow::point_inside).collect();
        (!flags.is_empty()).then(|| flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
    }
}

/// Replicate contrasts at every grid point, kept so that bands at several
/// levels come from the same draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDistribution {
    pub grid: QuantileGrid,
    pub contrast: Contrast,
    /// Full-sample contrast per grid point.
    pub point: Vec<Option<f64>>,
    /// `values[b][m]`: replicate `b` at grid point `m`, `None` where not
    /// reported or where the replicate fit failed.
    pub values: Vec<Vec<Option<f64>>>,
    /// Replicates whose resample could not be fitted.
    pub failures: usize,
}

/// 1-based ranks of the percentile interval among `n` sorted values.
pub fn percentile_ranks(n: usize, level: f64) -> (usize, usize) {
    let alpha = 1.0 - level;
    let rank = |q: f64| ((q * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    (rank(alpha / 2.0), rank(1.0 - alpha / 2.0))
}

/// Percentile interval of `values` (unsorted), or `None` if empty.
pub fn percentile_interval(values: &[f64], level: f64) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (lo, hi) = percentile_ranks(v.len(), level);
    Some((v[lo - 1], v[hi - 1]))
}

impl BootstrapDistribution {
    pub fn draws(&self) -> usize {
        self.values.len()
    }

    pub fn band(&self, level: f64, threshold: f64) -> Result<ConfidenceBand, InferenceError> {
        check_level(level)?;
        let b = self.draws();
        let rows = self
            .grid
            .points()
            .iter()
            .enumerate()
            .map(|(m, &u)| {
                let reported: Vec<f64> = self.values.iter().filter_map(|row| row[m]).collect();
                let n_reported = reported.len();
                let valid = n_reported > 0 && n_reported as f64 >= threshold * b as f64;
                let (lower, upper) = match percentile_interval(&reported, level) {
                    Some((lo, hi)) if valid => (Some(lo), Some(hi)),
                    _ => (None, None),
                };
                BandRow {
                    u,
                    lower,
                    point: self.point[m],
                    upper,
                    n_reported,
                    valid,
                }
            })
            .collect();
        Ok(ConfidenceBand {
            contrast: self.contrast,
            level,
            draws: b,
            rows,
        })
    }
}

fn resample_indices(n: usize, seed: u64, replicate: u64, sub: u64) -> Vec<usize> {
    let mut rng = stream(seed, replicate, sub, StreamRole::Resample);
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

fn distribution_inner(
    data: &Dataset,
    full: &QuantileCurveFit,
    fit_cfg: &FitConfig,
    boot: &BootstrapConfig,
    contrast: Contrast,
    sub: u64,
) -> BootstrapDistribution {
    let grid_len = fit_cfg.grid.len();
    let values: Vec<Option<Vec<Option<f64>>>> = (0..boot.draws as u64)
        .into_par_iter()
        .map(|b| {
            let idx = resample_indices(data.len(), boot.seed, b, sub);
            let sample = data.resample(&idx).ok()?;
            let fit = fit_curve(&sample, fit_cfg).ok()?;
            Some((0..grid_len).map(|m| contrast.of(&fit, m)).collect())
        })
        .collect();
    let failures = values.iter().filter(|v| v.is_none()).count();
    BootstrapDistribution {
        grid: fit_cfg.grid.clone(),
        contrast,
        point: (0..grid_len).map(|m| contrast.of(full, m)).collect(),
        values: values
            .into_iter()
            .map(|v| v.unwrap_or_else(|| vec![None; grid_len]))
            .collect(),
        failures,
    }
}

/// Refits `boot.draws` resamples of whole records and keeps the contrast at
/// every grid point each replicate reports.
pub fn bootstrap_distribution(
    data: &Dataset,
    fit_cfg: &FitConfig,
    boot: &BootstrapConfig,
    contrast: Contrast,
) -> Result<BootstrapDistribution, InferenceError> {
    boot.validate()?;
    contrast.check(data.num_treatments())?;
    let full = fit_curve(data, fit_cfg)?;
    Ok(distribution_inner(data, &full, fit_cfg, boot, contrast, 0))
}

pub fn bootstrap_band(
    data: &Dataset,
    fit_cfg: &FitConfig,
    boot: &BootstrapConfig,
    contrast: Contrast,
) -> Result<ConfidenceBand, InferenceError> {
    bootstrap_distribution(data, fit_cfg, boot, contrast)?.band(boot.level, boot.threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub u: f64,
    pub truth: f64,
    /// Replications with a valid band at `u`.
    pub evaluated: usize,
    pub covered: usize,
}

impl CoverageRow {
    pub fn rate(&self) -> Option<f64> {
        (self.evaluated > 0).then(|| self.covered as f64 / self.evaluated as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub replications: usize,
    pub rows: Vec<CoverageRow>,
}

impl CoverageTable {
    pub fn at(&self, u: f64) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| (r.u - u).abs() < 1e-9)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "u,truth,evaluated,covered,coverage")?;
        for r in &self.rows {
            let rate = r.rate().map(|x| x.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{}", r.u, r.truth, r.evaluated, r.covered, rate)?;
        }
        Ok(())
    }
}

/// Coverage of `truth` by a collection of bands on a common grid. Points
/// where the truth is infinite are skipped.
pub fn coverage_from_bands(bands: &[ConfidenceBand], truth: impl Fn(f64) -> f64) -> Result<CoverageTable, InferenceError> {
    let first = bands.first().ok_or(InferenceError::NoReplications)?;
    let rows = first
        .rows
        .iter()
        .enumerate()
        .filter_map(|(m, r)| {
            let t = truth(r.u);
            t.is_finite().then(|| {
                let valid: Vec<&BandRow> = bands.iter().map(|b| &b.rows[m]).filter(|row| row.valid).collect();
                CoverageRow {
                    u: r.u,
                    truth: t,
                    evaluated: valid.len(),
                    covered: valid.iter().filter(|row| row.contains(t)).count(),
                }
            })
        })
        .collect();
    Ok(CoverageTable {
        replications: bands.len(),
        rows,
    })
}

/// Bands from `reps` fresh draws of the design; replicate `r` is generated
/// from stream `r` and bootstrapped on sub-stream `r + 1`.
pub fn replicate_bands(
    spec: &DgpSpec,
    reps: usize,
    fit_cfg: &FitConfig,
    boot: &BootstrapConfig,
) -> Result<Vec<Option<ConfidenceBand>>, InferenceError> {
    if reps == 0 {
        return Err(InferenceError::NoReplications);
    }
    boot.validate()?;
    (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let data = generate_replicate(spec, r)?.to_dataset()?;
            let Ok(full) = fit_curve(&data, fit_cfg) else {
                return Ok(None);
            };
            let dist = distribution_inner(&data, &full, fit_cfg, boot, Contrast::default(), r + 1);
            dist.band(boot.level, boot.threshold).map(Some)
        })
        .collect()
}

/// Pointwise coverage of the true treatment effect over `reps` replications.
/// Replications whose full-sample fit fails count as not evaluated.
pub fn coverage_study(
    spec: &DgpSpec,
    reps: usize,
    fit_cfg: &FitConfig,
    boot: &BootstrapConfig,
) -> Result<CoverageTable, InferenceError> {
    let bands: Vec<ConfidenceBand> = replicate_bands(spec, reps, fit_cfg, boot)?.into_iter().flatten().collect();
    if bands.is_empty() {
        return Ok(CoverageTable {
            replications: reps,
            rows: vec![],
        });
    }
    let truth = GroundTruth::for_design(spec.design);
    let mut table = coverage_from_bands(&bands, |u| truth.qte(u))?;
    table.replications = reps;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(values: Vec<Vec<Option<f64>>>, point: Vec<Option<f64>>) -> BootstrapDistribution {
        BootstrapDistribution {
            grid: QuantileGrid::new((1..=point.len()).map(|m| m as f64 / 10.0).collect()).unwrap(),
            contrast: Contrast::default(),
            point,
            values,
            failures: 0,
        }
    }

    #[test]
    fn percentile_ranks_follow_ceiling_convention() {
        assert_eq!(percentile_ranks(200, 0.95), (5, 195));
        assert_eq!(percentile_ranks(100, 0.95), (3, 98));
        assert_eq!(percentile_ranks(200, 0.99), (1, 199));
        let v: Vec<f64> = (1..=200).rev().map(|i| i as f64 / 200.0).collect();
        assert_eq!(percentile_interval(&v, 0.95), Some((0.025, 0.975)));
    }

    #[test]
    fn identical_replicates_give_zero_width() {
        let d = dist(vec![vec![Some(-0.3), None]; 50], vec![Some(-0.3), None]);
        let band = d.band(0.95, 0.5).unwrap();
        let r = &band.rows[0];
        assert_eq!((r.lower, r.upper), (Some(-0.3), Some(-0.3)));
        assert_eq!(r.point_inside(), Some(true));
    }

    #[test]
    fn sparse_points_are_masked() {
        let mut values = vec![vec![Some(1.0), None]; 10];
        values[0][1] = Some(2.0);
        values[1][1] = Some(2.0);
        let band = dist(values, vec![Some(1.0), None]).band(0.95, 0.5).unwrap();
        assert!(band.rows[0].valid);
        assert!(!band.rows[1].valid);
        assert_eq!(band.rows[1].n_reported, 2);
        let mut csv = Vec::new();
        band.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().nth(2), Some("0.2,,,,2"));
    }

    #[test]
    fn wider_level_contains_narrower() {
        let values: Vec<Vec<Option<f64>>> = (0..57).map(|b| vec![Some(((b * 37) % 57) as f64), None]).collect();
        let d = dist(values, vec![Some(28.0), None]);
        let b95 = &d.band(0.95, 0.5).unwrap().rows[0];
        let b99 = &d.band(0.99, 0.5).unwrap().rows[0];
        assert!(b99.lower <= b95.lower && b95.upper <= b99.upper);
    }

    #[test]
    fn injected_truth_is_always_covered() {
        let truth = |u: f64| if u <= 0.5 { -u } else { f64::INFINITY };
        let bands: Vec<ConfidenceBand> = (0..5)
            .map(|_| {
                let grid: Vec<f64> = (1..=10).map(|m| m as f64 / 10.0).collect();
                ConfidenceBand {
                    contrast: Contrast::default(),
                    level: 0.95,
                    draws: 1,
                    rows: grid
                        .iter()
                        .map(|&u| BandRow {
                            u,
                            lower: Some(truth(u)),
                            point: Some(truth(u)),
                            upper: Some(truth(u)),
                            n_reported: 1,
                            valid: true,
                        })
                        .collect(),
                }
            })
            .collect();
        let table = coverage_from_bands(&bands, truth).unwrap();
        assert_eq!(table.rows.len(), 5);
        for r in &table.rows {
            assert_eq!(r.rate(), Some(1.0));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = BootstrapConfig {
            draws: 1,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(InferenceError::TooFewDraws(1))));
        let bad = BootstrapConfig {
            level: 1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(InferenceError::Level(_))));
        assert!(matches!(coverage_from_bands(&[], |u| u), Err(InferenceError::NoReplications)));
    }
}
