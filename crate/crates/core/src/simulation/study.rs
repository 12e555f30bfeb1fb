//! Monte Carlo replication studies.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_replicate, DgpSpec, GroundTruth, SimulationError};
use crate::estimator::{fit_curve, naive_curve, FitConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub fit: FitConfig,
    /// Number of equal-width bins on `[0, 1]` for the frontier histogram.
    pub histogram_bins: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            histogram_bins: 100,
        }
    }
}

/// What one replication contributes to the summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub replicate: u64,
    pub u_hat: f64,
    /// Grid value just before the first frontier hit.
    pub u_before: f64,
    pub triggered: bool,
    pub y_hat: Vec<f64>,
    /// `theta[m][ℓ]`, `None` where not reported.
    pub theta: Vec<Vec<Option<f64>>>,
    /// Solver output at every grid point, reported or not.
    pub theta_all: Vec<Vec<f64>>,
    /// Naive quantiles, `None` where above the attained incidence.
    pub naive: Vec<Vec<Option<f64>>>,
    pub fit_error: Option<String>,
}

impl ReplicationResult {
    pub fn qte(&self, m: usize) -> Option<f64> {
        Some(self.theta[m].get(1).copied()?? - self.theta[m][0]?)
    }

    /// Treatment effect from the solver output whether or not `u_m` is
    /// below the estimated frontier.
    pub fn qte_unmasked(&self, m: usize) -> Option<f64> {
        let row = self.theta_all.get(m)?;
        let q = row.get(1)? - row[0];
        q.is_finite().then_some(q)
    }

    pub fn naive_qte(&self, m: usize) -> Option<f64> {
        Some(self.naive[m].get(1).copied()?? - self.naive[m][0]?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummaryRow {
    pub u: f64,
    pub truth_qte: f64,
    pub n_reported: usize,
    pub mean_theta: Vec<Option<f64>>,
    pub mean_qte: Option<f64>,
    pub mean_abs_error: Option<f64>,
    pub n_naive: usize,
    pub mean_naive: Vec<Option<f64>>,
    pub mean_naive_qte: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub spec: DgpSpec,
    pub replications: Vec<ReplicationResult>,
    pub curve: Vec<CurveSummaryRow>,
    /// `(lower edge, count)` over `[0, 1]`.
    pub histogram: Vec<(f64, usize)>,
    pub mean_u_hat: f64,
    /// Share of replications with `ŷ_ℓ <= y_ℓ` for every level.
    pub frontier_conservative_share: f64,
    /// Share of replications whose grid value before the frontier hit is at
    /// most the true frontier.
    pub u_before_conservative_share: f64,
    pub failed: usize,
}

impl McSummary {
    pub fn row(&self, u: f64) -> Option<&CurveSummaryRow> {
        self.curve.iter().find(|r| (r.u - u).abs() < 1e-9)
    }

    pub fn write_curve_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let l = self.curve.first().map_or(0, |r| r.mean_theta.len());
        let mut header = vec!["u".to_string(), "truth_qte".into(), "n_reported".into()];
        header.extend((0..l).map(|i| format!("mean_theta_{i}")));
        header.extend(["mean_qte".into(), "mean_abs_error".into(), "n_naive".into()]);
        header.extend((0..l).map(|i| format!("mean_naive_{i}")));
        header.push("mean_naive_qte".into());
        writeln!(out, "{}", header.join(","))?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.curve {
            let mut cols = vec![r.u.to_string(), cell(r.truth_qte.is_finite().then_some(r.truth_qte)), r.n_reported.to_string()];
            cols.extend(r.mean_theta.iter().map(|&v| cell(v)));
            cols.extend([cell(r.mean_qte), cell(r.mean_abs_error), r.n_naive.to_string()]);
            cols.extend(r.mean_naive.iter().map(|&v| cell(v)));
            cols.push(cell(r.mean_naive_qte));
            writeln!(out, "{}", cols.join(","))?;
        }
        Ok(())
    }

    pub fn write_histogram_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "bin,count")?;
        for (edge, count) in &self.histogram {
            writeln!(out, "{edge},{count}")?;
        }
        Ok(())
    }

    pub fn write_replications_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let l = self.replications.iter().map(|r| r.y_hat.len()).max().unwrap_or(0);
        let y_cols: Vec<String> = (0..l).map(|i| format!("y_hat_{i}")).collect();
        writeln!(out, "replicate,u_hat,u_before,triggered,{},error", y_cols.join(","))?;
        for r in &self.replications {
            let ys: Vec<String> = (0..l).map(|i| r.y_hat.get(i).map(f64::to_string).unwrap_or_default()).collect();
            let err = r.fit_error.as_deref().unwrap_or("").replace([',', '\n'], " ");
            writeln!(out, "{},{},{},{},{},{}", r.replicate, r.u_hat, r.u_before, r.triggered, ys.join(","), err)?;
        }
        Ok(())
    }
}

fn run_one(spec: &DgpSpec, replicate: u64, cfg: &FitConfig) -> Result<ReplicationResult, SimulationError> {
    let data = generate_replicate(spec, replicate)?.to_dataset()?;
    let naive = naive_curve(&data, &cfg.grid);
    let naive: Vec<Vec<Option<f64>>> = naive
        .theta
        .iter()
        .map(|row| row.iter().map(|&t| t.is_finite().then_some(t)).collect())
        .collect();
    Ok(match fit_curve(&data, cfg) {
        Ok(fit) => ReplicationResult {
            replicate,
            u_hat: fit.frontiers.u_hat,
            u_before: fit.frontiers.previous_u(&fit.grid),
            triggered: fit.frontiers.triggered,
            y_hat: fit.frontiers.y_hat.clone(),
            theta: fit
                .theta
                .iter()
                .zip(&fit.reported_mask)
                .map(|(row, &ok)| row.iter().map(|&t| ok.then_some(t)).collect())
                .collect(),
            theta_all: fit.theta.clone(),
            naive,
            fit_error: None,
        },
        Err(e) => ReplicationResult {
            replicate,
            u_hat: f64::NAN,
            u_before: f64::NAN,
            triggered: false,
            y_hat: vec![],
            theta: vec![vec![]; cfg.grid.len()],
            theta_all: vec![],
            naive,
            fit_error: Some(e.to_string()),
        },
    })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Runs `reps` independent replications of `spec` and aggregates them.
/// Replications run in parallel; results depend only on `(spec, replicate)`.
pub fn mc_study(spec: &DgpSpec, reps: usize, cfg: &StudyConfig) -> Result<McSummary, SimulationError> {
    if reps == 0 {
        return Err(SimulationError::NoReplications);
    }
    let replications = (0..reps as u64)
        .into_par_iter()
        .map(|r| run_one(spec, r, &cfg.fit))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize(*spec, replications, &cfg.fit, cfg.histogram_bins))
}

pub fn summarize(spec: DgpSpec, replications: Vec<ReplicationResult>, fit: &FitConfig, bins: usize) -> McSummary {
    let truth = GroundTruth::for_design(spec.design);
    let ok: Vec<&ReplicationResult> = replications.iter().filter(|r| r.fit_error.is_none()).collect();
    let levels = ok.iter().map(|r| r.y_hat.len()).max().unwrap_or(2);
    let curve = fit
        .grid
        .points()
        .iter()
        .enumerate()
        .map(|(m, &u)| {
            let truth_qte = truth.qte(u);
            let qtes: Vec<f64> = ok.iter().filter_map(|r| r.qte(m)).collect();
            let naive_qtes: Vec<f64> = replications.iter().filter_map(|r| r.naive_qte(m)).collect();
            CurveSummaryRow {
                u,
                truth_qte,
                n_reported: qtes.len(),
                mean_theta: (0..levels)
                    .map(|l| mean(ok.iter().filter_map(|r| r.theta[m].get(l).copied().flatten())))
                    .collect(),
                mean_qte: mean(qtes.iter().copied()),
                mean_abs_error: if truth_qte.is_finite() {
                    mean(qtes.iter().map(|q| (q - truth_qte).abs()))
                } else {
                    None
                },
                n_naive: naive_qtes.len(),
                mean_naive: (0..levels)
                    .map(|l| mean(replications.iter().filter_map(|r| r.naive[m].get(l).copied().flatten())))
                    .collect(),
                mean_naive_qte: mean(naive_qtes.iter().copied()),
            }
        })
        .collect();
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for r in &ok {
        let b = ((r.u_hat * bins as f64 - 1e-9).ceil() as isize - 1).clamp(0, bins as isize - 1);
        counts[b as usize] += 1;
    }
    let histogram = counts.into_iter().enumerate().map(|(i, c)| (i as f64 / bins as f64, c)).collect();
    let share = |pred: &dyn Fn(&ReplicationResult) -> bool| {
        if ok.is_empty() {
            0.0
        } else {
            ok.iter().filter(|r| pred(r)).count() as f64 / ok.len() as f64
        }
    };
    McSummary {
        spec,
        curve,
        histogram,
        mean_u_hat: mean(ok.iter().map(|r| r.u_hat)).unwrap_or(f64::NAN),
        frontier_conservative_share: share(&|r| r.y_hat.iter().zip(&truth.y1).all(|(a, b)| a <= b)),
        u_before_conservative_share: share(&|r| r.u_before <= truth.u_y + 1e-12),
        failed: replications.len() - ok.len(),
        replications,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::QuantileGrid;
    use crate::simulation::Design;

    fn small() -> (DgpSpec, StudyConfig) {
        let spec = DgpSpec {
            design: Design::Two,
            n: 1500,
            seed: 11,
        };
        let cfg = StudyConfig {
            fit: FitConfig {
                grid: QuantileGrid::uniform(20).unwrap(),
                ..Default::default()
            },
            histogram_bins: 20,
        };
        (spec, cfg)
    }

    #[test]
    fn zero_replications_is_an_error() {
        let (spec, cfg) = small();
        assert_eq!(mc_study(&spec, 0, &cfg), Err(SimulationError::NoReplications));
    }

    #[test]
    fn study_is_deterministic_and_summaries_are_consistent() {
        let (spec, cfg) = small();
        let a = mc_study(&spec, 4, &cfg).unwrap();
        let b = mc_study(&spec, 4, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.histogram.iter().map(|h| h.1).sum::<usize>(), 4 - a.failed);
        let manual = mean(a.replications.iter().map(|r| r.u_hat)).unwrap();
        assert!((a.mean_u_hat - manual).abs() < 1e-15);
        let mut csv = Vec::new();
        a.write_curve_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 21);
    }
}
