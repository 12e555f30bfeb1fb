//! Kernel smoothing of survival-type step functions with the Epanechnikov
//! kernel `K(v) = 3/4 (1 - v^2)` on `[-1, 1]`.

use serde::{Deserialize, Serialize};
use statrs::statistics::Statistics;
use thiserror::Error;

use crate::step::StepFunction;

#[derive(Debug, Error, PartialEq)]
pub enum SmoothingError {
    #[error("bandwidth must be positive and finite, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("rule-of-thumb bandwidth needs at least two observations, got {0}")]
    TooFewObservations(usize),
    #[error("sample has zero spread; pass an explicit bandwidth")]
    DegenerateSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SmootherKind {
    /// Kernel convolution `∫ f(t - s h) K(s) ds`, evaluated exactly.
    Convolution,
    /// Local polynomial of degree one fitted to the step function.
    #[default]
    LocalLinear,
}

/// Number of tabulation nodes used for the local-linear kind.
pub const DEFAULT_NODES: usize = 512;

/// `∫_{-1}^{x} K`.
#[inline]
pub fn kernel_cdf(x: f64) -> f64 {
    if x <= -1.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        0.5 + 0.75 * (x - x * x * x / 3.0)
    }
}

/// Antiderivatives of `K(v) v^k` for `k = 0, 1, 2`.
#[inline]
fn kernel_moment_antiderivatives(v: f64) -> [f64; 3] {
    let v2 = v * v;
    let v3 = v2 * v;
    [
        0.75 * (v - v3 / 3.0),
        0.75 * (v2 / 2.0 - v2 * v2 / 4.0),
        0.75 * (v3 / 3.0 - v3 * v2 / 5.0),
    ]
}

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    Exact(StepFunction),
    Tabulated {
        dt: f64,
        raw: Vec<f64>,
        values: Vec<f64>,
    },
}

/// Continuous, non-increasing smooth version of a step function, clipped to
/// `[0, 1]` and held constant beyond the last jump of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedCurve {
    kind: SmootherKind,
    bandwidth: f64,
    repr: Repr,
}

impl SmoothedCurve {
    pub fn kind(&self) -> SmootherKind {
        self.kind
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn eval(&self, t: f64) -> f64 {
        match &self.repr {
            Repr::Exact(step) => {
                let last = step.jump_times().last().copied().unwrap_or(0.0);
                convolve_at(step, self.bandwidth, t.clamp(0.0, last)).clamp(0.0, 1.0)
            }
            Repr::Tabulated { dt, values, .. } => interpolate(values, *dt, t),
        }
    }

    /// Node spacing and the node values before and after monotone
    /// post-processing; `None` for the exact convolution representation.
    pub fn nodes(&self) -> Option<(f64, &[f64], &[f64])> {
        match &self.repr {
            Repr::Exact(_) => None,
            Repr::Tabulated { dt, raw, values } => Some((*dt, raw, values)),
        }
    }
}

fn interpolate(values: &[f64], dt: f64, t: f64) -> f64 {
    if t <= 0.0 || values.len() == 1 {
        return values[0];
    }
    let x = t / dt;
    let i = x.floor() as usize;
    if i + 1 >= values.len() {
        return values[values.len() - 1];
    }
    let frac = x - i as f64;
    values[i] + frac * (values[i + 1] - values[i])
}

/// Exact Epanechnikov convolution of `step` at `t`, extending `step` by its
/// value at zero to negative arguments.
pub fn convolve_at(step: &StepFunction, h: f64, t: f64) -> f64 {
    let times = step.jump_times();
    let values = step.values();
    let lo = times.partition_point(|&s| s <= t - h);
    let hi = times.partition_point(|&s| s < t + h);
    let mut acc = step.eval(t - h);
    for j in lo..hi {
        let before = if j == 0 { step.value_at_zero() } else { values[j - 1] };
        acc += (values[j] - before) * kernel_cdf((t - times[j]) / h);
    }
    acc
}

/// Local-linear fit of `step` at `t` using data on `[0, ∞)` only.
pub fn local_linear_at(step: &StepFunction, h: f64, t: f64) -> f64 {
    let lo = (-t / h).max(-1.0);
    let left = t + h * lo;
    let top = kernel_moment_antiderivatives(1.0);
    let bottom = kernel_moment_antiderivatives(lo);
    let mu = [top[0] - bottom[0], top[1] - bottom[1], top[2] - bottom[2]];

    let base = step.eval(left);
    let mut nu = [base * mu[0], base * mu[1], base * mu[2]];
    let times = step.jump_times();
    let values = step.values();
    let first = times.partition_point(|&s| s <= left);
    let last = times.partition_point(|&s| s <= t + h);
    for j in first..last {
        let before = if j == 0 { step.value_at_zero() } else { values[j - 1] };
        let jump = values[j] - before;
        let a = kernel_moment_antiderivatives((times[j] - t) / h);
        for k in 0..3 {
            nu[k] += jump * (top[k] - a[k]);
        }
    }
    (mu[2] * nu[0] - mu[1] * nu[1]) / (mu[0] * mu[2] - mu[1] * mu[1])
}

pub fn smooth(step: &StepFunction, bandwidth: f64, kind: SmootherKind) -> Result<SmoothedCurve, SmoothingError> {
    smooth_with_nodes(step, bandwidth, kind, DEFAULT_NODES)
}

pub fn smooth_with_nodes(
    step: &StepFunction,
    bandwidth: f64,
    kind: SmootherKind,
    nodes: usize,
) -> Result<SmoothedCurve, SmoothingError> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(SmoothingError::NonPositiveBandwidth(bandwidth));
    }
    if kind == SmootherKind::Convolution && step.is_non_increasing() {
        return Ok(SmoothedCurve {
            kind,
            bandwidth,
            repr: Repr::Exact(step.clone()),
        });
    }

    let last = match step.jump_times().last() {
        Some(&last) if last > 0.0 => last,
        _ => {
            let v = step.value_at_zero().clamp(0.0, 1.0);
            return Ok(SmoothedCurve {
                kind,
                bandwidth,
                repr: Repr::Tabulated {
                    dt: 1.0,
                    raw: vec![step.value_at_zero()],
                    values: vec![v],
                },
            });
        }
    };
    let nodes = nodes.max(2);
    let dt = last / (nodes - 1) as f64;
    let raw: Vec<f64> = (0..nodes)
        .map(|i| {
            let t = i as f64 * dt;
            match kind {
                SmootherKind::LocalLinear => local_linear_at(step, bandwidth, t),
                SmootherKind::Convolution => convolve_at(step, bandwidth, t),
            }
        })
        .collect();
    let mut values = Vec::with_capacity(nodes);
    let mut running = step.value_at_zero().clamp(0.0, 1.0);
    values.push(running);
    for &r in &raw[1..] {
        running = running.min(r.clamp(0.0, 1.0));
        values.push(running);
    }
    Ok(SmoothedCurve {
        kind,
        bandwidth,
        repr: Repr::Tabulated { dt, raw, values },
    })
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = ((h + 1e-9).floor() as usize).min(n - 1);
    let frac = (h - lo as f64).max(0.0);
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Epanechnikov normal-reference bandwidth `2.34 σ n^{-1/5}` with
/// `σ = min(sd, IQR / 1.349)`; the IQR term is dropped when it vanishes.
pub fn default_bandwidth(sample: &[f64]) -> Result<f64, SmoothingError> {
    let n = sample.len();
    if n < 2 {
        return Err(SmoothingError::TooFewObservations(n));
    }
    let sd = sample.iter().std_dev();
    if !(sd > 0.0) {
        return Err(SmoothingError::DegenerateSample);
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let sigma = if iqr > 0.0 { sd.min(iqr / 1.349) } else { sd };
    Ok(2.34 * sigma * (n as f64).powf(-0.2))
}
