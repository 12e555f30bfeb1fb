//! The instrumental system `Σ_ℓ S^1(θ_ℓ, z_ℓ | w_k) = 1 - u` solved over a
//! quantile grid, frontier estimation, derived hazard curves, the naive
//! comparator and the rank diagnostic for binary treatment and instrument.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, EventCode};
use crate::optim::{multi_start, SolverConfig};
use crate::smoothing::{default_bandwidth, SmootherKind, SmoothingError};
use crate::surface::{assemble_surface, BandwidthPolicy, Surface, SurfaceError};
use crate::survival::{aalen_johansen, CellProcess};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("treatment level `{level}` has no uncensored cause-1 events; its frontier is undefined")]
    NoCause1Events { level: String },
    #[error("frontier margin for treatment level `{level}`: {source}")]
    Delta {
        level: String,
        #[source]
        source: SmoothingError,
    },
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error("invalid quantile grid: {0}")]
    Grid(String),
    #[error("invalid weighting matrix: {0}")]
    Weighting(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileGrid {
    points: Vec<f64>,
}

impl QuantileGrid {
    pub fn new(points: Vec<f64>) -> Result<Self, EstimatorError> {
        if points.len() < 2 {
            return Err(EstimatorError::Grid(format!("need at least 2 points, got {}", points.len())));
        }
        for (i, &u) in points.iter().enumerate() {
            if !(u > 0.0 && u <= 1.0) {
                return Err(EstimatorError::Grid(format!("point {u} outside (0, 1]")));
            }
            if i > 0 && u <= points[i - 1] {
                return Err(EstimatorError::Grid("points must be strictly increasing".into()));
            }
        }
        Ok(Self { points })
    }

    /// `{m / M : m = 1..M}`.
    pub fn uniform(m: usize) -> Result<Self, EstimatorError> {
        Self::new((1..=m).map(|i| i as f64 / m as f64).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the grid point within `1e-9` of `u`.
    pub fn index_of(&self, u: f64) -> Option<usize> {
        self.points.iter().position(|&p| (p - u).abs() < 1e-9)
    }
}

impl TryFrom<Vec<f64>> for QuantileGrid {
    type Error = EstimatorError;

    fn try_from(points: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(points)
    }
}

impl From<QuantileGrid> for Vec<f64> {
    fn from(g: QuantileGrid) -> Vec<f64> {
        g.points
    }
}

/// `V(u)` in the quadratic objective `r' V(u) r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingPolicy {
    #[default]
    Identity,
    /// The same `K x K` matrix at every grid point.
    Constant(Vec<Vec<f64>>),
    /// One matrix per grid point.
    PerPoint(Vec<Vec<Vec<f64>>>),
}

fn check_spd(v: &[Vec<f64>], k: usize) -> Result<(), EstimatorError> {
    if v.len() != k || v.iter().any(|row| row.len() != k) {
        return Err(EstimatorError::Weighting(format!("expected a {k}x{k} matrix")));
    }
    for i in 0..k {
        for j in 0..i {
            let (a, b) = (v[i][j], v[j][i]);
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(EstimatorError::Weighting("matrix is not symmetric".into()));
            }
        }
    }
    let m = DMatrix::from_fn(k, k, |i, j| v[i][j]);
    if m.cholesky().is_none() {
        return Err(EstimatorError::Weighting("matrix is not positive definite".into()));
    }
    Ok(())
}

impl WeightingPolicy {
    /// Checks shape, symmetry and positive definiteness.
    pub fn validate(&self, k: usize, grid_len: usize) -> Result<(), EstimatorError> {
        match self {
            Self::Identity => Ok(()),
            Self::Constant(v) => check_spd(v, k),
            Self::PerPoint(vs) => {
                if vs.len() != grid_len {
                    return Err(EstimatorError::Weighting(format!(
                        "{} matrices for {grid_len} grid points",
                        vs.len()
                    )));
                }
                vs.iter().try_for_each(|v| check_spd(v, k))
            }
        }
    }

    /// Matrix at grid index `m`; `None` stands for the identity.
    pub fn at(&self, m: usize) -> Option<&[Vec<f64>]> {
        match self {
            Self::Identity => None,
            Self::Constant(v) => Some(v),
            Self::PerPoint(vs) => Some(&vs[m]),
        }
    }
}

/// `r_k = Σ_ℓ S^1(θ_ℓ, z_ℓ | w_k) - (1 - u)`.
pub fn residual_vector<S: Surface + ?Sized>(theta: &[f64], u: f64, surface: &S) -> Vec<f64> {
    (0..surface.num_instruments())
        .map(|k| {
            let s: f64 = theta.iter().enumerate().map(|(l, &t)| surface.value(t, l, k)).sum();
            s - (1.0 - u)
        })
        .collect()
}

/// `r' V r`; `None` for the identity.
pub fn quadratic_form(r: &[f64], v: Option<&[Vec<f64>]>) -> f64 {
    match v {
        None => r.iter().map(|x| x * x).sum(),
        Some(v) => {
            let mut acc = 0.0;
            for i in 0..r.len() {
                for j in 0..r.len() {
                    acc += r[i] * v[i][j] * r[j];
                }
            }
            acc
        }
    }
}

pub fn objective<S: Surface + ?Sized>(theta: &[f64], u: f64, surface: &S, v: Option<&[Vec<f64>]>) -> f64 {
    quadratic_form(&residual_vector(theta, u, surface), v).max(0.0)
}

/// `ŷ^1_z`: the largest uncensored cause-1 time at each treatment level.
pub fn estimate_y1(data: &Dataset) -> Result<Vec<f64>, EstimatorError> {
    let mut best = vec![f64::NEG_INFINITY; data.num_treatments()];
    for r in data.records() {
        if r.event == EventCode::Cause1 {
            best[r.z] = best[r.z].max(r.y);
        }
    }
    best.iter()
        .enumerate()
        .map(|(z, &y)| {
            if y.is_finite() {
                Ok(y)
            } else {
                Err(EstimatorError::NoCause1Events {
                    level: data.treatment_levels()[z].clone(),
                })
            }
        })
        .collect()
}

/// Rule-of-thumb margin `Δ_ℓ` on the uncensored cause-1 times of `level`.
pub fn default_delta(data: &Dataset, level: usize) -> Result<f64, EstimatorError> {
    let sample: Vec<f64> = data
        .records()
        .iter()
        .filter(|r| r.z == level && r.event == EventCode::Cause1)
        .map(|r| r.y)
        .collect();
    default_bandwidth(&sample).map_err(|source| EstimatorError::Delta {
        level: data.treatment_levels()[level].clone(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaPolicy {
    #[default]
    RuleOfThumb,
    /// The same margin for every level.
    Uniform(f64),
    PerLevel(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub grid: QuantileGrid,
    pub weighting: WeightingPolicy,
    pub solver: SolverConfig,
    pub bandwidth: BandwidthPolicy,
    pub smoother: SmootherKind,
    pub delta: DeltaPolicy,
    /// Report only `u_m < û_Y - report_margin`.
    pub report_margin: f64,
    /// Skip grid points after the frontier has been detected; they are never
    /// reported, and their `theta` entries are left as NaN.
    pub stop_at_frontier: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            grid: QuantileGrid::uniform(100).expect("valid grid"),
            weighting: WeightingPolicy::Identity,
            solver: SolverConfig::default(),
            bandwidth: BandwidthPolicy::RuleOfThumb,
            smoother: SmootherKind::LocalLinear,
            delta: DeltaPolicy::RuleOfThumb,
            report_margin: 0.0,
            stop_at_frontier: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierEstimates {
    pub y_hat: Vec<f64>,
    pub delta: Vec<f64>,
    pub u_hat: f64,
    /// Zero-based grid index of `û_Y`.
    pub m_hat: usize,
    /// False when no grid point met the frontier condition.
    pub triggered: bool,
}

impl FrontierEstimates {
    /// `u_{m̂-1}`, the last grid point strictly below `û_Y` (0 if none).
    pub fn previous_u(&self, grid: &QuantileGrid) -> f64 {
        if self.m_hat == 0 {
            0.0
        } else {
            grid.points()[self.m_hat - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCurveFit {
    pub grid: QuantileGrid,
    /// `theta[m][ℓ] = φ̂^1_{z_ℓ}(u_m)`.
    pub theta: Vec<Vec<f64>>,
    pub objective: Vec<f64>,
    pub converged: Vec<bool>,
    pub frontiers: FrontierEstimates,
    pub reported_mask: Vec<bool>,
    pub warnings: Vec<String>,
}

impl QuantileCurveFit {
    pub fn num_levels(&self) -> usize {
        self.frontiers.y_hat.len()
    }

    /// `φ̂^1_a(u_m) - φ̂^1_b(u_m)` where reported.
    pub fn contrast(&self, m: usize, a: usize, b: usize) -> Option<f64> {
        self.reported_mask[m].then(|| self.theta[m][a] - self.theta[m][b])
    }

    /// Treatment effect of level 1 against level 0.
    pub fn qte(&self, m: usize) -> Option<f64> {
        self.contrast(m, 1, 0)
    }
}

fn resolve_delta(data: &Dataset, policy: &DeltaPolicy) -> Result<Vec<f64>, EstimatorError> {
    let l = data.num_treatments();
    match policy {
        DeltaPolicy::RuleOfThumb => (0..l).map(|z| default_delta(data, z)).collect(),
        DeltaPolicy::Uniform(d) => Ok(vec![*d; l]),
        DeltaPolicy::PerLevel(d) if d.len() == l => Ok(d.clone()),
        DeltaPolicy::PerLevel(d) => Err(EstimatorError::Shape(format!("{} margins for {l} levels", d.len()))),
    }
}

pub fn fit_curve(data: &Dataset, cfg: &FitConfig) -> Result<QuantileCurveFit, EstimatorError> {
    let y_hat = estimate_y1(data)?;
    let delta = resolve_delta(data, &cfg.delta)?;
    let surface = assemble_surface(data, &cfg.bandwidth, cfg.smoother)?;
    fit_curve_on_surface(&surface, &y_hat, &delta, cfg)
}

/// Solves the system on a given surface with given frontiers, so that true
/// frontiers or population surfaces can be injected.
pub fn fit_curve_on_surface<S: Surface + ?Sized>(
    surface: &S,
    y_hat: &[f64],
    delta: &[f64],
    cfg: &FitConfig,
) -> Result<QuantileCurveFit, EstimatorError> {
    let l = surface.num_treatments();
    if y_hat.len() != l || delta.len() != l {
        return Err(EstimatorError::Shape(format!(
            "{} frontiers and {} margins for {l} levels",
            y_hat.len(),
            delta.len()
        )));
    }
    if let Some(d) = delta.iter().find(|d| !(**d > 0.0)) {
        return Err(EstimatorError::Shape(format!("margins must be positive, got {d}")));
    }
    let grid = &cfg.grid;
    cfg.weighting.validate(surface.num_instruments(), grid.len())?;

    let lo = vec![0.0; l];
    let hi: Vec<f64> = y_hat.iter().map(|y| (y - 1e-9 * y).max(0.0)).collect();
    let m_total = grid.len();
    let mut theta = vec![vec![f64::NAN; l]; m_total];
    let mut objective = vec![f64::NAN; m_total];
    let mut converged = vec![false; m_total];
    let mut m_hat = None;
    let mut warm: Option<Vec<f64>> = None;

    for (m, &u) in grid.points().iter().enumerate() {
        let v = cfg.weighting.at(m);
        let f = |x: &[f64]| self::objective(x, u, surface, v);
        let best = multi_start(&f, warm.as_deref(), &lo, &hi, &cfg.solver, m as u64);
        converged[m] = best.converged;
        objective[m] = best.f;
        if m_hat.is_none() && (0..l).any(|i| best.x[i] >= y_hat[i] - delta[i]) {
            m_hat = Some(m);
        }
        warm = Some(best.x.clone());
        theta[m] = best.x;
        if cfg.stop_at_frontier && m_hat.is_some() {
            break;
        }
    }

    let mut warnings = Vec::new();
    let (m_hat, triggered) = match m_hat {
        Some(m) => (m, true),
        None => {
            warnings.push("frontier condition never met on the grid; reporting every converged point".to_string());
            (m_total - 1, false)
        }
    };
    let u_hat = grid.points()[m_hat];
    let reported_mask: Vec<bool> = (0..m_total)
        .map(|m| converged[m] && (!triggered || grid.points()[m] < u_hat - cfg.report_margin))
        .collect();
    let unconverged = (0..m_total).filter(|&m| !converged[m] && !theta[m][0].is_nan()).count();
    if unconverged > 0 {
        warnings.push(format!("solver did not converge at {unconverged} grid points; they are not reported"));
    }

    Ok(QuantileCurveFit {
        grid: grid.clone(),
        theta,
        objective,
        converged,
        frontiers: FrontierEstimates {
            y_hat: y_hat.to_vec(),
            delta: delta.to_vec(),
            u_hat,
            m_hat,
            triggered,
        },
        reported_mask,
        warnings,
    })
}

/// Quantiles obtained by inverting the cause-1 incidence conditional on the
/// treatment level alone. `f64::INFINITY` marks quantiles above the attained
/// incidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveCurve {
    pub grid: QuantileGrid,
    /// `theta[m][ℓ]`.
    pub theta: Vec<Vec<f64>>,
}

impl NaiveCurve {
    pub fn contrast(&self, m: usize, a: usize, b: usize) -> Option<f64> {
        let (x, y) = (self.theta[m][a], self.theta[m][b]);
        (x.is_finite() && y.is_finite()).then_some(x - y)
    }
}

/// `inf{t : F(t) >= u}` for the incidence `F = 1 - S` of an Aalen-Johansen
/// step function.
pub fn incidence_quantile(survival: &crate::step::StepFunction, u: f64) -> f64 {
    let target = u - 1e-12;
    if 1.0 - survival.value_at_zero() >= target {
        return 0.0;
    }
    survival
        .jump_times()
        .iter()
        .zip(survival.values())
        .find(|(_, &v)| 1.0 - v >= target)
        .map_or(f64::INFINITY, |(&t, _)| t)
}

pub fn naive_curve(data: &Dataset, grid: &QuantileGrid) -> NaiveCurve {
    let steps: Vec<_> = (0..data.num_treatments())
        .map(|z| {
            let cp = CellProcess::from_records(data.records().iter().filter(|r| r.z == z));
            aalen_johansen(&cp, EventCode::Cause1)
        })
        .collect();
    let theta = grid
        .points()
        .iter()
        .map(|&u| steps.iter().map(|s| incidence_quantile(s, u)).collect())
        .collect();
    NaiveCurve {
        grid: grid.clone(),
        theta,
    }
}

/// Pool-adjacent-violators projection onto non-decreasing sequences.
pub fn isotonic_non_decreasing(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s2, n2) = blocks[blocks.len() - 1];
            let (s1, n1) = blocks[blocks.len() - 2];
            if s1 / n1 as f64 > s2 / n2 as f64 {
                blocks.pop();
                let last = blocks.len() - 1;
                blocks[last] = (s1 + s2, n1 + n2);
            } else {
                break;
            }
        }
    }
    blocks
        .into_iter()
        .flat_map(|(s, n)| std::iter::repeat(s / n as f64).take(n))
        .collect()
}

/// Monotone interpolant `u ↦ φ(u)` through reported points, with its
/// left-continuous inverse on the covered range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneQuantileCurve {
    pub u: Vec<f64>,
    pub t: Vec<f64>,
    /// True when the input was not monotone and was projected.
    pub isotonic_applied: bool,
}

impl MonotoneQuantileCurve {
    pub fn new(u: Vec<f64>, t: Vec<f64>) -> Self {
        let monotone = t.windows(2).all(|w| w[0] <= w[1]);
        let t = if monotone { t } else { isotonic_non_decreasing(&t) };
        Self {
            u,
            t,
            isotonic_applied: !monotone,
        }
    }

    /// `φ(u)` by linear interpolation on `[u_1, u_n]`.
    pub fn quantile(&self, u: f64) -> Option<f64> {
        let n = self.u.len();
        if n == 0 || u < self.u[0] || u > self.u[n - 1] {
            return None;
        }
        let i = self.u.partition_point(|&x| x < u);
        if i == 0 {
            return Some(self.t[0]);
        }
        let frac = (u - self.u[i - 1]) / (self.u[i] - self.u[i - 1]);
        Some(self.t[i - 1] + frac * (self.t[i] - self.t[i - 1]))
    }

    /// `F(t) = inf{u : φ(u) >= t}` on `[t_1, t_n]`.
    pub fn incidence(&self, t: f64) -> Option<f64> {
        let n = self.t.len();
        if n == 0 || t < self.t[0] || t > self.t[n - 1] {
            return None;
        }
        let i = self.t.partition_point(|&x| x < t);
        if i == 0 {
            return Some(self.u[0]);
        }
        let frac = (t - self.t[i - 1]) / (self.t[i] - self.t[i - 1]);
        Some(self.u[i - 1] + frac * (self.u[i] - self.u[i - 1]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDerived {
    pub curve: MonotoneQuantileCurve,
    /// `F^1(t_m) = u_m` at `t_m = φ̂(u_m)`.
    pub density: Vec<Option<f64>>,
    pub subdistribution_hazard: Vec<Option<f64>>,
    pub cause_specific_hazard: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedQuantities {
    pub levels: Vec<LevelDerived>,
}

/// Reported points of level `l` as a monotone curve.
pub fn reported_curve(fit: &QuantileCurveFit, l: usize) -> MonotoneQuantileCurve {
    let (mut u, mut t) = (Vec::new(), Vec::new());
    for m in 0..fit.grid.len() {
        if fit.reported_mask[m] {
            u.push(fit.grid.points()[m]);
            t.push(fit.theta[m][l]);
        }
    }
    MonotoneQuantileCurve::new(u, t)
}

/// Incidence, density and hazards at the fitted points. `swapped` is a fit of
/// the same data with causes exchanged; without it the cause-specific hazard
/// is left undefined.
pub fn derived_quantities(fit: &QuantileCurveFit, swapped: Option<&QuantileCurveFit>) -> DerivedQuantities {
    let levels = (0..fit.num_levels())
        .map(|l| {
            let curve = reported_curve(fit, l);
            let other = swapped.map(|s| reported_curve(s, l));
            let n = curve.u.len();
            let mut density = Vec::with_capacity(n);
            let mut sub = Vec::with_capacity(n);
            let mut cause = Vec::with_capacity(n);
            for i in 0..n {
                let (a, b) = (i.saturating_sub(1), (i + 1).min(n.saturating_sub(1)));
                let slope = if b > a {
                    (curve.t[b] - curve.t[a]) / (curve.u[b] - curve.u[a])
                } else {
                    f64::NAN
                };
                let f = (slope > 0.0).then(|| 1.0 / slope);
                let u = curve.u[i];
                density.push(f);
                sub.push(f.map(|f| f / (1.0 - u)).filter(|h| h.is_finite()));
                let f2 = other.as_ref().and_then(|o| o.incidence(curve.t[i]));
                cause.push(match (f, f2) {
                    (Some(f), Some(f2)) if 1.0 - u - f2 > 0.0 => Some(f / (1.0 - u - f2)),
                    _ => None,
                });
            }
            LevelDerived {
                curve,
                density,
                subdistribution_hazard: sub,
                cause_specific_hazard: cause,
            }
        })
        .collect();
    DerivedQuantities { levels }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GprimeReport {
    pub applicable: bool,
    pub evaluated: usize,
    /// Points with a non-positive density in a reachable cell.
    pub skipped: usize,
    pub positive: usize,
    pub negative: usize,
    /// Numerically singular points; they count against agreement.
    pub singular: usize,
    /// Share of evaluated points whose determinant has the majority sign.
    pub agreement: f64,
    pub passes: bool,
}

impl GprimeReport {
    fn not_applicable() -> Self {
        Self {
            applicable: false,
            evaluated: 0,
            skipped: 0,
            positive: 0,
            negative: 0,
            singular: 0,
            agreement: 0.0,
            passes: false,
        }
    }
}

/// Evenly spaced interior points of `[0, y)`.
pub fn interior_grid(y: f64, points: usize) -> Vec<f64> {
    (1..=points).map(|i| y * i as f64 / (points + 1) as f64).collect()
}

/// Sign stability of `det G(t_1, t_2)` with
/// `G = [[f(t_1,0|0), f(t_2,1|0)], [f(t_1,0|1), f(t_2,1|1)]]` and
/// `f = -∂_t S^1` by central differences with half-width `step`.
pub fn gprime_diagnostic<S: Surface + ?Sized>(surface: &S, grid0: &[f64], grid1: &[f64], step: f64) -> GprimeReport {
    if surface.num_treatments() != 2 || surface.num_instruments() != 2 {
        return GprimeReport::not_applicable();
    }
    let density = |t: f64, z: usize, w: usize| -> Option<f64> {
        if surface.is_structural_zero(z, w) {
            return Some(0.0);
        }
        let a = (t - step).max(0.0);
        let d = (surface.value(a, z, w) - surface.value(t + step, z, w)) / (t + step - a);
        (d > 0.0).then_some(d)
    };
    let mut report = GprimeReport {
        applicable: true,
        ..GprimeReport::not_applicable()
    };
    for &t1 in grid0 {
        for &t2 in grid1 {
            let entries = (density(t1, 0, 0), density(t2, 1, 0), density(t1, 0, 1), density(t2, 1, 1));
            let (Some(a), Some(b), Some(c), Some(d)) = entries else {
                report.skipped += 1;
                continue;
            };
            report.evaluated += 1;
            let (ad, bc) = (a * d, b * c);
            let det = ad - bc;
            if det.abs() <= 1e-8 * (ad.abs() + bc.abs()) {
                report.singular += 1;
            } else if det > 0.0 {
                report.positive += 1;
            } else {
                report.negative += 1;
            }
        }
    }
    if report.evaluated > 0 {
        report.agreement = report.positive.max(report.negative) as f64 / report.evaluated as f64;
        report.passes = report.agreement == 1.0;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::FnSurface;

    /// Two-level surface where level ℓ at instrument k is
    /// `a_{ℓk} (1 - t / s_ℓ)^+`.
    fn linear_surface(a: [[f64; 2]; 2], s: [f64; 2]) -> impl Surface {
        FnSurface {
            num_treatments: 2,
            num_instruments: 2,
            f: move |t: f64, z: usize, w: usize| a[z][w] * (1.0 - t.max(0.0) / s[z]).max(0.0),
        }
    }

    #[test]
    fn residual_at_origin_is_u() {
        let s = linear_surface([[0.6, 0.3], [0.4, 0.7]], [1.0, 2.0]);
        for u in [0.0, 0.2, 0.9] {
            for r in residual_vector(&[0.0, 0.0], u, &s) {
                assert!((r - u).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn objective_arithmetic_and_scaling() {
        let r = [0.1, -0.2];
        assert!((quadratic_form(&r, None) - 0.05).abs() < 1e-15);
        let v = vec![vec![2.0, 0.5], vec![0.5, 1.0]];
        let scaled: Vec<Vec<f64>> = v.iter().map(|row| row.iter().map(|x| 3.0 * x).collect()).collect();
        assert!((quadratic_form(&r, Some(&scaled)) - 3.0 * quadratic_form(&r, Some(&v))).abs() < 1e-15);
        assert_eq!(quadratic_form(&[0.0, 0.0], Some(&v)), 0.0);
    }

    #[test]
    fn weighting_validation() {
        let ok = WeightingPolicy::Constant(vec![vec![2.0, 0.5], vec![0.5, 1.0]]);
        assert!(ok.validate(2, 10).is_ok());
        let asym = WeightingPolicy::Constant(vec![vec![2.0, 0.5], vec![0.4, 1.0]]);
        assert!(asym.validate(2, 10).is_err());
        let indefinite = WeightingPolicy::Constant(vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(indefinite.validate(2, 10).is_err());
        assert!(WeightingPolicy::PerPoint(vec![]).validate(2, 10).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(QuantileGrid::new(vec![0.5]).is_err());
        assert!(QuantileGrid::new(vec![0.5, 0.4]).is_err());
        assert!(QuantileGrid::new(vec![0.0, 0.4]).is_err());
        let g = QuantileGrid::uniform(100).unwrap();
        assert_eq!(g.len(), 100);
        assert_eq!(g.index_of(0.25), Some(24));
    }

    #[test]
    fn solves_a_linear_system_exactly() {
        // Level 0 ~ U[0, 1] rank mapped to t = u, level 1 to t = 2u, with
        // instrument-dependent shares; the system is solved by θ = (u, 2u).
        let s = linear_surface([[0.7, 0.2], [0.3, 0.8]], [1.0, 2.0]);
        let cfg = FitConfig {
            grid: QuantileGrid::uniform(20).unwrap(),
            ..FitConfig::default()
        };
        let fit = fit_curve_on_surface(&s, &[1.0, 2.0], &[0.05, 0.1], &cfg).unwrap();
        for m in 0..fit.grid.len() {
            let u = fit.grid.points()[m];
            if fit.reported_mask[m] {
                assert!((fit.theta[m][0] - u).abs() < 1e-6, "m={m}");
                assert!((fit.theta[m][1] - 2.0 * u).abs() < 1e-6, "m={m}");
                assert!(fit.objective[m] <= 1e-12);
            }
        }
        // Frontier triggers at the first u with u >= 1 - 0.05.
        assert_eq!(fit.frontiers.u_hat, 0.95);
        assert!(fit.frontiers.triggered);
        assert_eq!(fit.reported_mask.iter().filter(|&&b| b).count(), 18);
    }

    #[test]
    fn untriggered_frontier_reports_everything() {
        let s = linear_surface([[0.7, 0.2], [0.3, 0.8]], [1.0, 2.0]);
        let cfg = FitConfig {
            grid: QuantileGrid::new(vec![0.1, 0.2, 0.3]).unwrap(),
            ..FitConfig::default()
        };
        let fit = fit_curve_on_surface(&s, &[1.0, 2.0], &[0.05, 0.1], &cfg).unwrap();
        assert!(!fit.frontiers.triggered);
        assert_eq!(fit.frontiers.u_hat, 0.3);
        assert!(fit.reported_mask.iter().all(|&b| b));
        assert_eq!(fit.warnings.len(), 1);
    }

    #[test]
    fn isotonic_projection() {
        assert_eq!(isotonic_non_decreasing(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(isotonic_non_decreasing(&[3.0, 2.0, 1.0]), vec![2.0, 2.0, 2.0]);
        let c = MonotoneQuantileCurve::new(vec![0.1, 0.2, 0.3], vec![0.2, 0.1, 0.6]);
        assert!(c.isotonic_applied);
        assert!((c.t[0] - 0.15).abs() < 1e-15 && c.t[0] == c.t[1]);
        assert_eq!(c.incidence(c.t[0]), Some(0.1));
    }

    #[test]
    fn linear_quantile_inverts_to_half() {
        let u: Vec<f64> = (1..=40).map(|i| i as f64 / 100.0).collect();
        let t: Vec<f64> = u.iter().map(|u| 2.0 * u).collect();
        let c = MonotoneQuantileCurve::new(u, t);
        for t in [0.02, 0.3, 0.55, 0.8] {
            assert!((c.incidence(t).unwrap() - t / 2.0).abs() < 1e-12);
            assert!((c.quantile(c.incidence(t).unwrap()).unwrap() - t).abs() < 1e-12);
        }
        assert_eq!(c.incidence(0.9), None);
    }

    #[test]
    fn incidence_quantile_conventions() {
        let s = crate::step::StepFunction::new(vec![1.0, 2.0], vec![0.75, 0.5], 1.0).unwrap();
        assert_eq!(incidence_quantile(&s, 0.1), 1.0);
        assert_eq!(incidence_quantile(&s, 0.25), 1.0);
        assert_eq!(incidence_quantile(&s, 0.26), 2.0);
        assert_eq!(incidence_quantile(&s, 0.6), f64::INFINITY);
    }

    #[test]
    fn irrelevant_instrument_fails_diagnostic() {
        let s = FnSurface {
            num_treatments: 2,
            num_instruments: 2,
            f: |t: f64, z: usize, _w: usize| {
                let share = [0.6, 0.4][z];
                share * (-t * (1.0 + z as f64)).exp()
            },
        };
        let g = interior_grid(1.0, 10);
        let r = gprime_diagnostic(&s, &g, &g, 1e-3);
        assert_eq!(r.evaluated, 100);
        assert_eq!(r.singular, 100);
        assert!(!r.passes);
    }

    #[test]
    fn diagnostic_not_applicable_beyond_binary() {
        let s = FnSurface {
            num_treatments: 3,
            num_instruments: 2,
            f: |_t: f64, _z: usize, _w: usize| 1.0 / 3.0,
        };
        assert!(!gprime_diagnostic(&s, &[0.1], &[0.1], 1e-3).applicable);
    }
}
