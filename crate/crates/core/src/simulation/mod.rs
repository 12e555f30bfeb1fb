//! The two benchmark designs: data generation, analytic ground truth and
//! population surfaces.
//!
//! `U ~ U[0,1)`, `W ~ Bernoulli(2/3)`, `Z = 1{4U + ε - 1 >= 0} W` with
//! `ε ~ N(0,1)`, `E = 1` when `U < p_Z` (`p_0 = 1/2`, `p_1 = 3/4`) and 2
//! otherwise. Cause-1 durations are `2U` (z = 0) and `U` (z = 1); cause-2
//! durations are `U - 1/2` and `2(U - 3/4)`. Censoring is uniform on
//! `[1/3, 2/3]` (design 1) or `[1/3, 3/2]` (design 2).

mod study;

pub use study::*;

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::data::{CellIndex, DataError, Dataset, EventCode, ObservationRecord};
use crate::rng::{stream, StreamRole};
use crate::surface::Surface;

#[derive(Debug, Error, PartialEq)]
pub enum SimulationError {
    #[error("unknown design {0}; expected 1 or 2")]
    UnknownDesign(u32),
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error("number of replications must be at least 1")]
    NoReplications,
    #[error("generated sample is not a valid dataset: {0}")]
    Data(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Design {
    One,
    Two,
}

impl Design {
    pub fn number(self) -> u32 {
        match self {
            Design::One => 1,
            Design::Two => 2,
        }
    }

    /// Support of the censoring variable.
    pub fn censoring_range(self) -> (f64, f64) {
        match self {
            Design::One => (1.0 / 3.0, 2.0 / 3.0),
            Design::Two => (1.0 / 3.0, 1.5),
        }
    }
}

impl TryFrom<u32> for Design {
    type Error = SimulationError;

    fn try_from(value: u32) -> Result<Self, Self::Error> {
        match value {
            1 => Ok(Design::One),
            2 => Ok(Design::Two),
            other => Err(SimulationError::UnknownDesign(other)),
        }
    }
}

impl From<Design> for u32 {
    fn from(d: Design) -> u32 {
        d.number()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub design: Design,
    pub n: usize,
    pub seed: u64,
}

/// Cause-1 probabilities `p_z`.
pub const P_CAUSE1: [f64; 2] = [0.5, 0.75];

/// Unobserved draws behind one record; for tests only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentDraw {
    pub u: f64,
    pub epsilon: f64,
    pub t: f64,
    pub c: f64,
    pub e: EventCode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSample {
    pub records: Vec<ObservationRecord>,
    pub latent: Vec<LatentDraw>,
}

impl SimulatedSample {
    /// Validated dataset with the unreachable cell `(z=1, w=0)` declared.
    pub fn dataset(&self) -> Result<Dataset, DataError> {
        self.dataset_inner()
    }

    /// [`Self::dataset`] with the error folded into [`SimulationError`].
    pub fn to_dataset(&self) -> Result<Dataset, SimulationError> {
        self.dataset_inner().map_err(|e| SimulationError::Data(e.to_string()))
    }

    fn dataset_inner(&self) -> Result<Dataset, DataError> {
        Dataset::new(
            self.records.clone(),
            vec!["0".into(), "1".into()],
            vec!["0".into(), "1".into()],
            BTreeSet::from([CellIndex::new(1, 0)]),
        )
    }
}

/// Duration under treatment `z` at rank `u` (either cause).
pub fn structural_duration(z: usize, u: f64) -> (f64, EventCode) {
    if u < P_CAUSE1[z] {
        let t = if z == 0 { 2.0 * u } else { u };
        (t, EventCode::Cause1)
    } else {
        let t = if z == 0 { u - P_CAUSE1[0] } else { 2.0 * (u - P_CAUSE1[1]) };
        (t, EventCode::Cause2)
    }
}

/// Inverts [`structural_duration`]: the rank that produced `(t, e)` at `z`.
pub fn reconstruct_rank(z: usize, t: f64, e: EventCode) -> f64 {
    match (e, z) {
        (EventCode::Cause1, 0) => t / 2.0,
        (EventCode::Cause1, _) => t,
        (_, 0) => t + P_CAUSE1[0],
        (_, _) => t / 2.0 + P_CAUSE1[1],
    }
}

pub fn generate(spec: &DgpSpec) -> Result<SimulatedSample, SimulationError> {
    generate_replicate(spec, 0)
}

/// Draws replicate `replicate` of `spec`; each variable has its own stream.
pub fn generate_replicate(spec: &DgpSpec, replicate: u64) -> Result<SimulatedSample, SimulationError> {
    if spec.n == 0 {
        return Err(SimulationError::EmptySample);
    }
    let key = |role| stream(spec.seed, replicate, spec.design.number() as u64, role);
    let (mut rw, mut ru, mut re, mut rc) = (
        key(StreamRole::Instrument),
        key(StreamRole::Rank),
        key(StreamRole::Selection),
        key(StreamRole::Censoring),
    );
    let (c_lo, c_hi) = spec.design.censoring_range();
    let mut records = Vec::with_capacity(spec.n);
    let mut latent = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let w = usize::from(rw.gen::<f64>() < 2.0 / 3.0);
        let u: f64 = ru.gen();
        let epsilon: f64 = re.sample(StandardNormal);
        let c = rc.gen_range(c_lo..c_hi);
        let z = usize::from(4.0 * u + epsilon - 1.0 >= 0.0) * w;
        let (t, e) = structural_duration(z, u);
        let (y, event) = if t <= c { (t, e) } else { (c, EventCode::Censored) };
        records.push(ObservationRecord { y, event, z, w });
        latent.push(LatentDraw { u, epsilon, t, c, e });
    }
    Ok(SimulatedSample { records, latent })
}

/// `φ^1_z(u)`: `2u` up to 1/2 for z = 0, `u` up to 3/4 for z = 1, infinite
/// beyond. Identical in both designs.
pub fn true_phi(_design: Design, z: usize, u: f64) -> f64 {
    if u <= P_CAUSE1[z] {
        if z == 0 {
            2.0 * u
        } else {
            u
        }
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub design: Design,
    pub p: [f64; 2],
    /// `t^1_z`, the supremum of the cause-1 support.
    pub t1: [f64; 2],
    pub u_e: f64,
    pub u_c: f64,
    pub u_y: f64,
    /// Upper end of the censoring support.
    pub c_upper: f64,
    /// `y^1_z = min(t^1_z, c_z)`.
    pub y1: [f64; 2],
}

impl GroundTruth {
    pub fn for_design(design: Design) -> Self {
        let t1 = [1.0, 0.75];
        let c_upper = design.censoring_range().1;
        let u_c = match design {
            Design::One => 1.0 / 3.0,
            Design::Two => 1.0,
        };
        let u_e = 0.5;
        Self {
            design,
            p: P_CAUSE1,
            t1,
            u_e,
            u_c,
            u_y: u_e.min(u_c),
            c_upper,
            y1: [t1[0].min(c_upper), t1[1].min(c_upper)],
        }
    }

    pub fn phi(&self, z: usize, u: f64) -> f64 {
        true_phi(self.design, z, u)
    }

    /// `φ^1_1(u) - φ^1_0(u) = -u` for `u <= 1/2`.
    pub fn qte(&self, u: f64) -> f64 {
        self.phi(1, u) - self.phi(0, u)
    }
}

#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[inline]
fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `∫_a^1 Φ(4u - 1) du`.
fn tail_treated(a: f64) -> f64 {
    let g = |x: f64| x * std_normal_cdf(x) + std_normal_pdf(x);
    (g(3.0) - g(4.0 * a - 1.0)) / 4.0
}

/// Analytic `S^1(t, z | w)` of the benchmark designs (censoring-free, hence
/// the same for both designs).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PopulationSurface;

impl PopulationSurface {
    /// `P(Z = 1 | W = 1)`.
    pub fn treated_share() -> f64 {
        tail_treated(0.0)
    }
}

impl Surface for PopulationSurface {
    fn num_treatments(&self) -> usize {
        2
    }

    fn num_instruments(&self) -> usize {
        2
    }

    fn value(&self, t: f64, z: usize, w: usize) -> f64 {
        let t = t.max(0.0);
        match (z, w) {
            (0, 0) => 1.0 - (t / 2.0).min(0.5),
            (1, 0) => 0.0,
            (1, _) => tail_treated(t.min(0.75)),
            (_, _) => {
                let a = (t / 2.0).min(0.5);
                (1.0 - a) - tail_treated(a)
            }
        }
    }

    fn is_structural_zero(&self, z: usize, w: usize) -> bool {
        (z, w) == (1, 0)
    }
}

/// Mean and standard error of a Monte Carlo average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub draws: usize,
}

impl McEstimate {
    fn from_indicators(hits: usize, draws: usize) -> Self {
        let mean = hits as f64 / draws as f64;
        let se = (mean * (1.0 - mean) / (draws as f64 - 1.0).max(1.0)).sqrt();
        Self { mean, se, draws }
    }
}

/// Monte Carlo estimate of `P(T^1 >= t, Z = z | W = w)` from the latent
/// draws of `draws` simulated subjects.
pub fn mc_surface_value(design: Design, t: f64, z: usize, w: usize, draws: usize, seed: u64) -> McEstimate {
    let sample = generate(&DgpSpec { design, n: draws, seed }).expect("positive draws");
    let (mut hits, mut total) = (0, 0);
    for (r, lat) in sample.records.iter().zip(&sample.latent) {
        if r.w != w {
            continue;
        }
        total += 1;
        let t1 = if lat.e == EventCode::Cause1 { lat.t } else { f64::INFINITY };
        if r.z == z && t1 >= t {
            hits += 1;
        }
    }
    McEstimate::from_indicators(hits, total)
}

/// Monte Carlo estimate of `Σ_z S^1(φ^1_z(u), z | w)` per instrument level.
pub fn mc_population_residual(design: Design, u: f64, draws: usize, seed: u64) -> [McEstimate; 2] {
    let sample = generate(&DgpSpec { design, n: draws, seed }).expect("positive draws");
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (r, lat) in sample.records.iter().zip(&sample.latent) {
        totals[r.w] += 1;
        let t1 = if lat.e == EventCode::Cause1 { lat.t } else { f64::INFINITY };
        if t1 >= true_phi(design, r.z, u) {
            hits[r.w] += 1;
        }
    }
    [
        McEstimate::from_indicators(hits[0], totals[0]),
        McEstimate::from_indicators(hits[1], totals[1]),
    ]
}

/// One-sample Kolmogorov-Smirnov test against `U[0, 1]`: statistic and
/// asymptotic p-value.
pub fn ks_uniform(sample: &[f64]) -> (f64, f64) {
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - v).max(v - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    (d, kolmogorov_survival(lambda))
}

/// `P(K > λ)` for the Kolmogorov distribution.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn design_parsing() {
        assert_eq!(Design::try_from(1), Ok(Design::One));
        assert_eq!(Design::try_from(3), Err(SimulationError::UnknownDesign(3)));
    }

    #[test]
    fn truth_values() {
        assert_eq!(true_phi(Design::One, 0, 0.3), 0.6);
        assert_eq!(true_phi(Design::Two, 0, 0.6), f64::INFINITY);
        assert_eq!(true_phi(Design::Two, 1, 0.7), 0.7);
        let g = GroundTruth::for_design(Design::Two);
        assert!((g.qte(0.25) + 0.25).abs() < 1e-15);
        assert_eq!(g.u_y, 0.5);
        assert_eq!(GroundTruth::for_design(Design::One).u_y, 1.0 / 3.0);
        assert_eq!(GroundTruth::for_design(Design::One).y1, [2.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn latent_trace_is_structurally_consistent() {
        let s = generate(&DgpSpec {
            design: Design::Two,
            n: 5000,
            seed: 3,
        })
        .unwrap();
        for (r, lat) in s.records.iter().zip(&s.latent) {
            assert_eq!(lat.e == EventCode::Cause1, lat.u < P_CAUSE1[r.z]);
            assert_eq!(structural_duration(r.z, lat.u), (lat.t, lat.e));
            assert!((reconstruct_rank(r.z, lat.t, lat.e) - lat.u).abs() < 1e-12);
            if r.w == 0 {
                assert_eq!(r.z, 0);
            }
            assert_eq!(r.y, lat.t.min(lat.c));
        }
        assert!(s.dataset().is_ok());
    }

    #[test]
    fn population_surface_boundaries() {
        let s = PopulationSurface;
        for w in 0..2 {
            let total = s.value(0.0, 0, w) + s.value(0.0, 1, w);
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!((PopulationSurface::treated_share() - 0.7293).abs() < 1e-4);
        // Flat beyond t^1_z.
        assert_eq!(s.value(0.75, 1, 1), s.value(5.0, 1, 1));
        assert_eq!(s.value(1.0, 0, 1), s.value(5.0, 0, 1));
        // Population residual at the truth equals 1 - u.
        for u in [0.1, 0.25, 0.4] {
            for w in 0..2 {
                let r = s.value(2.0 * u, 0, w) + s.value(u, 1, w);
                assert!((r - (1.0 - u)).abs() < 1e-12, "u={u} w={w}");
            }
        }
    }

    #[test]
    fn ks_detects_non_uniformity() {
        let grid: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_uniform(&grid).1 > 0.99);
        let squashed: Vec<f64> = grid.iter().map(|x| x * x).collect();
        assert!(ks_uniform(&squashed).1 < 1e-6);
    }
}
