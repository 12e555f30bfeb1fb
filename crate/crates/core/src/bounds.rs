//! Outer sets for quantiles beyond the identification frontier.
//!
//! For `u > u_Y` the structural vector is only known to satisfy
//! `θ ∉ ∏[0, y^1_ℓ)` and `min_k R_k(θ) >= 0`, with
//! `R_k(θ) = Σ_ℓ S^1(θ_ℓ ∧ c_ℓ, z_ℓ | w_k) - (1 - u)`. Because `S^1` is
//! non-increasing and flat past `y^1_ℓ`, the feasible region is a down-set
//! that only needs to be explored along the frontier faces.
//!
//! With two levels the set is an exact union of at most two boxes. With three
//! or more levels each face carries a curved down-set in its interior, which
//! a finite union of boxes can only cover from outside; this module uses a
//! staircase of configurable resolution for that part.

use std::io::{self, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::data::Dataset;
use crate::surface::Surface;

#[derive(Debug, Error, PartialEq)]
pub enum BoundsError {
    #[error("u = {u} is not above the estimated frontier {u_hat}; use point estimation there")]
    BelowFrontier { u: f64, u_hat: f64 },
    #[error("u must lie in (0, 1], got {0}")]
    InvalidQuantile(f64),
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

fn ser_bounds<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let mapped: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
    mapped.serialize(s)
}

fn de_bounds<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
    Ok(raw.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
}

/// `∏_ℓ [lower_ℓ, upper_ℓ]`; an infinite upper end is written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalProduct {
    pub lower: Vec<f64>,
    #[serde(serialize_with = "ser_bounds", deserialize_with = "de_bounds")]
    pub upper: Vec<f64>,
}

impl IntervalProduct {
    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&t, (&a, &b))| a <= t && t <= b)
    }

    /// True if the piece meets the open box `∏[0, y_ℓ)`.
    pub fn meets_open_box(&self, y: &[f64]) -> bool {
        self.lower.iter().zip(y).all(|(&a, &y)| a < y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseTag {
    /// The frontier corner itself is feasible.
    I,
    /// Both boundary segments have a feasible initial part.
    Ii,
    /// Only the segment `{y_0} x [0, y_1]` is feasible.
    Iii,
    /// Only the segment `[0, y_0] x {y_1}` is feasible.
    Iv,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterSet {
    pub u: f64,
    pub pieces: Vec<IntervalProduct>,
    /// Geometry tag for two levels.
    pub case: Option<CaseTag>,
}

impl OuterSet {
    pub fn contains(&self, theta: &[f64]) -> bool {
        self.pieces.iter().any(|p| p.contains(theta))
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

/// Frontiers `y^1_ℓ`, caps `c_ℓ` and the estimated `û_Y` below which outer
/// sets are refused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsFrontiers {
    pub y1: Vec<f64>,
    pub caps: Vec<f64>,
    pub u_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsConfig {
    /// Bisection tolerance relative to each frontier.
    pub rel_tol: f64,
    /// Slabs per staircase (three or more levels only).
    pub staircase_slabs: usize,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            staircase_slabs: 64,
        }
    }
}

/// Largest observed time at each treatment level, whatever the event.
pub fn estimate_caps(data: &Dataset) -> Vec<f64> {
    let mut caps = vec![0.0f64; data.num_treatments()];
    for r in data.records() {
        caps[r.z] = caps[r.z].max(r.y);
    }
    caps
}

/// `R_k(θ)` with every coordinate capped at `caps_ℓ`.
pub fn capped_residual<S: Surface + ?Sized>(theta: &[f64], u: f64, surface: &S, caps: &[f64]) -> Vec<f64> {
    (0..surface.num_instruments())
        .map(|k| {
            let s: f64 = theta
                .iter()
                .zip(caps)
                .enumerate()
                .map(|(l, (&t, &c))| surface.value(t.min(c), l, k))
                .sum();
            s - (1.0 - u)
        })
        .collect()
}

fn min_residual<S: Surface + ?Sized>(theta: &[f64], u: f64, surface: &S, caps: &[f64]) -> f64 {
    capped_residual(theta, u, surface, caps).into_iter().fold(f64::INFINITY, f64::min)
}

/// Direct evaluation of the two defining conditions.
pub fn verify_membership<S: Surface + ?Sized>(theta: &[f64], u: f64, surface: &S, frontiers: &BoundsFrontiers) -> bool {
    let outside_box = theta.iter().zip(&frontiers.y1).any(|(t, y)| t >= y);
    outside_box && min_residual(theta, u, surface, &frontiers.caps) >= 0.0
}

struct Ctx<'a, S: ?Sized> {
    surface: &'a S,
    u: f64,
    y1: &'a [f64],
    caps: &'a [f64],
    cfg: BoundsConfig,
}

impl<S: Surface + ?Sized> Ctx<'_, S> {
    fn feasible(&self, theta: &[f64]) -> bool {
        min_residual(theta, self.u, self.surface, self.caps) >= 0.0
    }

    /// Largest `x` in `[0, y_j]` with `theta[j] = x` feasible, given that 0
    /// is feasible and `y_j` is not; returns the lower bracket end.
    fn bisect(&self, theta: &mut [f64], j: usize) -> f64 {
        let (mut lo, mut hi) = (0.0, self.y1[j]);
        let tol = self.cfg.rel_tol * self.y1[j].max(f64::MIN_POSITIVE);
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            theta[j] = mid;
            if self.feasible(theta) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Boxes covering `{free θ : R(fixed, free) >= 0}`, exact when at most
    /// one coordinate is free. Coordinates in `fixed` are reported as the
    /// degenerate interval at their value.
    fn region(&self, fixed: &mut Vec<Option<f64>>) -> Vec<IntervalProduct> {
        let free: Vec<usize> = (0..fixed.len()).filter(|&j| fixed[j].is_none()).collect();
        let point = |fixed: &[Option<f64>], fill: f64| -> Vec<f64> { fixed.iter().map(|v| v.unwrap_or(fill)).collect() };
        let degenerate = |fixed: &[Option<f64>]| IntervalProduct {
            lower: fixed.iter().map(|v| v.unwrap_or(0.0)).collect(),
            upper: fixed.iter().map(|v| v.unwrap_or(0.0)).collect(),
        };
        match free.len() {
            0 => {
                if self.feasible(&point(fixed, 0.0)) {
                    vec![degenerate(fixed)]
                } else {
                    vec![]
                }
            }
            1 => {
                let j = free[0];
                let mut theta = point(fixed, 0.0);
                if !self.feasible(&theta) {
                    return vec![];
                }
                theta[j] = self.y1[j];
                let top = if self.feasible(&theta) {
                    f64::INFINITY
                } else {
                    self.bisect(&mut theta, j)
                };
                let mut piece = degenerate(fixed);
                piece.lower[j] = 0.0;
                piece.upper[j] = top;
                vec![piece]
            }
            _ => {
                let mut out = Vec::new();
                for &j in &free {
                    fixed[j] = Some(self.y1[j]);
                    for mut p in self.region(fixed) {
                        p.lower[j] = self.y1[j];
                        p.upper[j] = f64::INFINITY;
                        out.push(p);
                    }
                    fixed[j] = None;
                }
                // Outer staircase over the face interior along the first free
                // coordinate: a slab starting at a_i inherits the cross-section
                // at a_i, which contains every later cross-section.
                let j = free[0];
                let n = self.cfg.staircase_slabs.max(1);
                for i in 0..n {
                    let a0 = self.y1[j] * i as f64 / n as f64;
                    let a1 = self.y1[j] * (i + 1) as f64 / n as f64;
                    fixed[j] = Some(a0);
                    for mut p in self.region(fixed) {
                        p.lower[j] = a0;
                        p.upper[j] = a1;
                        for &k in &free[1..] {
                            p.upper[k] = p.upper[k].min(self.y1[k]);
                        }
                        if p.lower.iter().zip(&p.upper).all(|(a, b)| a <= b) {
                            out.push(p);
                        }
                    }
                    fixed[j] = None;
                }
                out
            }
        }
    }
}

fn check<S: Surface + ?Sized>(u: f64, surface: &S, frontiers: &BoundsFrontiers) -> Result<(), BoundsError> {
    if !(u > 0.0 && u <= 1.0) {
        return Err(BoundsError::InvalidQuantile(u));
    }
    if u <= frontiers.u_hat {
        return Err(BoundsError::BelowFrontier { u, u_hat: frontiers.u_hat });
    }
    let l = surface.num_treatments();
    if frontiers.y1.len() != l || frontiers.caps.len() != l {
        return Err(BoundsError::Shape(format!(
            "{} frontiers and {} caps for {l} levels",
            frontiers.y1.len(),
            frontiers.caps.len()
        )));
    }
    Ok(())
}

/// Two-level outer set from the two frontier segments and the corner.
pub fn outer_set_2d<S: Surface + ?Sized>(
    u: f64,
    surface: &S,
    frontiers: &BoundsFrontiers,
    cfg: &BoundsConfig,
) -> Result<OuterSet, BoundsError> {
    check(u, surface, frontiers)?;
    if surface.num_treatments() != 2 {
        return Err(BoundsError::Shape("outer_set_2d needs exactly two levels".into()));
    }
    let ctx = Ctx {
        surface,
        u,
        y1: &frontiers.y1,
        caps: &frontiers.caps,
        cfg: *cfg,
    };
    let y = &frontiers.y1;
    let corner = ctx.feasible(y);
    let first_segment = ctx.feasible(&[0.0, y[1]]);
    let second_segment = ctx.feasible(&[y[0], 0.0]);
    let mut pieces = Vec::new();
    for (j, open) in [(0usize, second_segment), (1, first_segment)] {
        if !open {
            continue;
        }
        let mut fixed = vec![None, None];
        fixed[j] = Some(y[j]);
        for mut p in ctx.region(&mut fixed) {
            p.lower[j] = y[j];
            p.upper[j] = f64::INFINITY;
            pieces.push(p);
        }
    }
    let case = match (corner, first_segment, second_segment) {
        (true, _, _) => CaseTag::I,
        (false, true, true) => CaseTag::Ii,
        (false, false, true) => CaseTag::Iii,
        (false, true, false) => CaseTag::Iv,
        (false, false, false) => CaseTag::Empty,
    };
    Ok(OuterSet {
        u,
        pieces,
        case: Some(case),
    })
}

/// Outer set for any number of levels: the union over `ℓ` of the face
/// `θ_ℓ >= y^1_ℓ` times the feasible region of the remaining coordinates
/// with `θ_ℓ` held at its frontier.
pub fn outer_set_recursive<S: Surface + ?Sized>(
    u: f64,
    surface: &S,
    frontiers: &BoundsFrontiers,
    cfg: &BoundsConfig,
) -> Result<OuterSet, BoundsError> {
    check(u, surface, frontiers)?;
    let l = surface.num_treatments();
    if l == 2 {
        return outer_set_2d(u, surface, frontiers, cfg);
    }
    let ctx = Ctx {
        surface,
        u,
        y1: &frontiers.y1,
        caps: &frontiers.caps,
        cfg: *cfg,
    };
    let mut pieces = Vec::new();
    let mut fixed = vec![None; l];
    for j in 0..l {
        fixed[j] = Some(frontiers.y1[j]);
        for mut p in ctx.region(&mut fixed) {
            p.lower[j] = frontiers.y1[j];
            p.upper[j] = f64::INFINITY;
            pieces.push(p);
        }
        fixed[j] = None;
    }
    Ok(OuterSet { u, pieces, case: None })
}

/// Dispatches on the number of levels.
pub fn outer_set<S: Surface + ?Sized>(
    u: f64,
    surface: &S,
    frontiers: &BoundsFrontiers,
    cfg: &BoundsConfig,
) -> Result<OuterSet, BoundsError> {
    if surface.num_treatments() == 2 {
        outer_set_2d(u, surface, frontiers, cfg)
    } else {
        outer_set_recursive(u, surface, frontiers, cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LatticeComparison {
    pub points: usize,
    pub agree: usize,
    /// Disagreements that vanish when the point is moved by the bisection
    /// tolerance.
    pub within_tolerance: usize,
    /// Points in the constructed set that fail the direct check.
    pub false_inclusions: usize,
    /// Points that pass the direct check but are missing from the set.
    pub false_exclusions: usize,
}

impl LatticeComparison {
    pub fn disagreements(&self) -> usize {
        self.false_inclusions + self.false_exclusions
    }
}

/// Evenly spaced lattice with `per_dim` points on `[0, upper_ℓ]` per
/// coordinate.
pub fn lattice(upper: &[f64], per_dim: usize) -> Vec<Vec<f64>> {
    let mut points = vec![vec![]];
    for &hi in upper {
        let mut next = Vec::with_capacity(points.len() * per_dim);
        for p in &points {
            for i in 0..per_dim {
                let mut q = p.clone();
                q.push(hi * i as f64 / (per_dim - 1).max(1) as f64);
                next.push(q);
            }
        }
        points = next;
    }
    points
}

/// Compares set membership against [`verify_membership`] on `points`.
pub fn compare_on_lattice<S: Surface + ?Sized>(
    set: &OuterSet,
    surface: &S,
    frontiers: &BoundsFrontiers,
    points: &[Vec<f64>],
    abs_tol: &[f64],
) -> LatticeComparison {
    let mut out = LatticeComparison::default();
    for theta in points {
        out.points += 1;
        let built = set.contains(theta);
        let direct = verify_membership(theta, set.u, surface, frontiers);
        if built == direct {
            out.agree += 1;
            continue;
        }
        if flips_nearby(theta, set.u, surface, frontiers, abs_tol) {
            out.within_tolerance += 1;
        } else if built {
            out.false_inclusions += 1;
        } else {
            out.false_exclusions += 1;
        }
    }
    out
}

/// Lattice dump with columns `theta_0..theta_{L-1}, in_set, verified`.
pub fn write_lattice_csv<S: Surface + ?Sized, W: Write>(
    mut out: W,
    set: &OuterSet,
    surface: &S,
    frontiers: &BoundsFrontiers,
    points: &[Vec<f64>],
) -> io::Result<()> {
    let l = frontiers.y1.len();
    let header: Vec<String> = (0..l).map(|i| format!("theta_{i}")).collect();
    writeln!(out, "{},in_set,verified", header.join(","))?;
    for theta in points {
        let coords: Vec<String> = theta.iter().map(f64::to_string).collect();
        writeln!(
            out,
            "{},{},{}",
            coords.join(","),
            u8::from(set.contains(theta)),
            u8::from(verify_membership(theta, set.u, surface, frontiers))
        )?;
    }
    Ok(())
}

fn flips_nearby<S: Surface + ?Sized>(theta: &[f64], u: f64, surface: &S, frontiers: &BoundsFrontiers, tol: &[f64]) -> bool {
    let base = verify_membership(theta, u, surface, frontiers);
    let d = theta.len();
    let total = 3usize.pow(d as u32);
    (0..total).any(|mut code| {
        let moved: Vec<f64> = (0..d)
            .map(|i| {
                let shift = (code % 3) as f64 - 1.0;
                code /= 3;
                (theta[i] + shift * tol[i]).max(0.0)
            })
            .collect();
        verify_membership(&moved, u, surface, frontiers) != base
    })
}
