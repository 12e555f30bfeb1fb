use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StepError {
    #[error("jump_times and values differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("jump times must be finite, nonnegative and strictly increasing (index {0})")]
    BadJumpTimes(usize),
}

/// Right-continuous piecewise-constant function on `[0, ∞)`.
///
/// `f(t)` is the value attached to the largest jump time `<= t`, or
/// `value_at_zero` before the first jump. Negative arguments evaluate to
/// `value_at_zero`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    jump_times: Vec<f64>,
    values: Vec<f64>,
    value_at_zero: f64,
}

impl StepFunction {
    pub fn new(jump_times: Vec<f64>, values: Vec<f64>, value_at_zero: f64) -> Result<Self, StepError> {
        if jump_times.len() != values.len() {
            return Err(StepError::LengthMismatch(jump_times.len(), values.len()));
        }
        for (i, &t) in jump_times.iter().enumerate() {
            if !t.is_finite() || t < 0.0 || (i > 0 && t <= jump_times[i - 1]) {
                return Err(StepError::BadJumpTimes(i));
            }
        }
        Ok(Self {
            jump_times,
            values,
            value_at_zero,
        })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            jump_times: Vec::new(),
            values: Vec::new(),
            value_at_zero: value,
        }
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at_zero(&self) -> f64 {
        self.value_at_zero
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.jump_times.partition_point(|&s| s <= t);
        if i == 0 {
            self.value_at_zero
        } else {
            self.values[i - 1]
        }
    }

    /// Value after the last jump.
    pub fn final_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(self.value_at_zero)
    }

    /// Signed jump sizes `f(t_j) - f(t_j-)`.
    pub fn jumps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.jump_times.iter().enumerate().map(move |(i, &t)| {
            let before = if i == 0 { self.value_at_zero } else { self.values[i - 1] };
            (t, self.values[i] - before)
        })
    }

    /// `sup_{|h| <= eps} |f(t + h) - f(t)|`, with `f` extended by
    /// `value_at_zero` to negative arguments.
    pub fn local_oscillation(&self, t: f64, eps: f64) -> f64 {
        let centre = self.eval(t);
        let (a, b) = (t - eps, t + eps);
        let mut worst = (self.eval(a) - centre).abs();
        let lo = self.jump_times.partition_point(|&s| s <= a);
        let hi = self.jump_times.partition_point(|&s| s <= b);
        for v in &self.values[lo..hi] {
            worst = worst.max((v - centre).abs());
        }
        worst
    }

    pub fn is_non_increasing(&self) -> bool {
        let mut prev = self.value_at_zero;
        self.values.iter().all(|&v| {
            let ok = v <= prev;
            prev = v;
            ok
        })
    }
}
