//! Derivative-free minimization over a box: Nelder-Mead with clamping and a
//! deterministic multi-start wrapper.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, StreamRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Iteration cap per start.
    pub max_iter: usize,
    /// Simplex diameter tolerance, relative to the box width per coordinate.
    pub tol_x: f64,
    /// Spread of objective values across the simplex.
    pub tol_f: f64,
    /// Any start reaching this value stops the search (objectives are >= 0).
    pub target: f64,
    /// Start from every point of the `{lo, mid, hi}^d` lattice.
    pub lattice: bool,
    /// Additional uniformly drawn starts.
    pub random_starts: usize,
    pub seed: u64,
    /// Initial simplex edge as a fraction of the box width.
    pub initial_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 4000,
            tol_x: 1e-9,
            tol_f: 1e-15,
            target: 1e-18,
            lattice: true,
            random_starts: 0,
            seed: 0,
            initial_step: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub converged: bool,
    pub evaluations: usize,
}

fn clamp_into(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Nelder-Mead from `x0`, with every trial point clamped into `[lo, hi]`.
pub fn nelder_mead<F>(f: &F, x0: &[f64], lo: &[f64], hi: &[f64], cfg: &SolverConfig) -> Minimum
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let d = x0.len();
    let width: Vec<f64> = (0..d).map(|i| (hi[i] - lo[i]).max(0.0)).collect();
    let mut evaluations = 0;
    let mut eval = |x: &[f64]| {
        evaluations += 1;
        f(x)
    };

    let mut start = x0.to_vec();
    clamp_into(&mut start, lo, hi);
    let mut simplex = vec![start.clone()];
    for i in 0..d {
        let mut v = start.clone();
        let step = cfg.initial_step * width[i];
        v[i] = if v[i] + step <= hi[i] { v[i] + step } else { v[i] - step };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();

    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        if values[0] <= cfg.target {
            converged = true;
            break;
        }
        let f_spread = values[d] - values[0];
        let x_small = (0..d).all(|i| {
            let spread = simplex.iter().map(|v| (v[i] - simplex[0][i]).abs()).fold(0.0, f64::max);
            spread <= cfg.tol_x * width[i].max(f64::MIN_POSITIVE)
        });
        if x_small && f_spread <= cfg.tol_f {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..d)
            .map(|i| simplex[..d].iter().map(|v| v[i]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| {
            let mut p: Vec<f64> = (0..d).map(|i| centroid[i] + t * (simplex[d][i] - centroid[i])).collect();
            clamp_into(&mut p, lo, hi);
            p
        };

        let reflected = along(-1.0);
        let fr = eval(&reflected);
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = eval(&expanded);
            if fe < fr {
                simplex[d] = expanded;
                values[d] = fe;
            } else {
                simplex[d] = reflected;
                values[d] = fr;
            }
            continue;
        }
        if fr < values[d - 1] {
            simplex[d] = reflected;
            values[d] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[d] {
            let c = along(-0.5);
            let fc = eval(&c);
            (c, fc)
        } else {
            let c = along(0.5);
            let fc = eval(&c);
            (c, fc)
        };
        if fc < values[d].min(fr) {
            simplex[d] = contracted;
            values[d] = fc;
            continue;
        }
        for j in 1..=d {
            for i in 0..d {
                simplex[j][i] = simplex[0][i] + 0.5 * (simplex[j][i] - simplex[0][i]);
            }
            values[j] = eval(&simplex[j]);
        }
    }

    let best = (0..=d).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    Minimum {
        x: simplex[best].clone(),
        f: values[best],
        converged,
        evaluations,
    }
}

/// Start points in the order they are tried: warm start, lattice, random.
pub fn start_points(warm: Option<&[f64]>, lo: &[f64], hi: &[f64], cfg: &SolverConfig, stream_id: u64) -> Vec<Vec<f64>> {
    let d = lo.len();
    let mut starts = Vec::new();
    if let Some(w) = warm {
        starts.push(w.to_vec());
    }
    if cfg.lattice {
        let total = 3usize.pow(d as u32);
        for mut code in 0..total {
            let mut p = Vec::with_capacity(d);
            for i in 0..d {
                let frac = (code % 3) as f64 / 2.0;
                code /= 3;
                p.push(lo[i] + frac * (hi[i] - lo[i]));
            }
            starts.push(p);
        }
    }
    if cfg.random_starts > 0 {
        let mut rng = stream(cfg.seed, stream_id, 0, StreamRole::SolverStarts);
        for _ in 0..cfg.random_starts {
            starts.push((0..d).map(|i| lo[i] + rng.gen::<f64>() * (hi[i] - lo[i])).collect());
        }
    }
    if starts.is_empty() {
        starts.push((0..d).map(|i| 0.5 * (lo[i] + hi[i])).collect());
    }
    starts
}

/// Runs [`nelder_mead`] from each start and keeps the lowest objective,
/// stopping early once `cfg.target` is reached. `stream_id` keys the random
/// starts so that repeated calls stay reproducible.
pub fn multi_start<F>(f: &F, warm: Option<&[f64]>, lo: &[f64], hi: &[f64], cfg: &SolverConfig, stream_id: u64) -> Minimum
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let mut best: Option<Minimum> = None;
    let mut evaluations = 0;
    for start in start_points(warm, lo, hi, cfg, stream_id) {
        let m = nelder_mead(f, &start, lo, hi, cfg);
        evaluations += m.evaluations;
        let done = m.f <= cfg.target;
        if best.as_ref().map_or(true, |b| m.f < b.f) {
            best = Some(m);
        }
        if done {
            break;
        }
    }
    let mut best = best.expect("at least one start");
    best.evaluations = evaluations;
    best
}
