//! Evaluable surfaces `S^1(t, z | w) = P(T^1 >= t, Z = z | W = w)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{cell_counts, CellIndex, Dataset, EventCode};
use crate::smoothing::{default_bandwidth, smooth_with_nodes, SmoothedCurve, SmootherKind, SmoothingError, DEFAULT_NODES};
use crate::step::StepFunction;
use crate::survival::{aalen_johansen, build_counting_processes};

/// Anything the instrumental system can be evaluated against: estimated
/// surfaces, analytic population surfaces and synthetic test surfaces.
pub trait Surface: Sync {
    fn num_treatments(&self) -> usize;
    fn num_instruments(&self) -> usize;
    /// `S^1(t, z | w)`; non-increasing in `t`, equal to `P(Z = z | W = w)` at 0.
    fn value(&self, t: f64, z: usize, w: usize) -> f64;
    /// Cells declared unreachable; their surface is identically zero.
    fn is_structural_zero(&self, _z: usize, _w: usize) -> bool {
        false
    }
}

#[derive(Debug, Error)]
pub enum SurfaceError {
    #[error("cell (z={z}, w={w}): {source}")]
    Smoothing {
        z: usize,
        w: usize,
        #[source]
        source: SmoothingError,
    },
    #[error("bandwidth policy lists {got} bandwidths for {expected} cells")]
    PolicyShape { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthPolicy {
    /// Rule of thumb on the cell's cause-1 times, falling back to all of the
    /// cell's times when those are too few or tied.
    #[default]
    RuleOfThumb,
    Fixed(f64),
    /// One bandwidth per cell in `z`-major order (`z * K + w`).
    PerCell(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceCell {
    /// Aalen-Johansen cause-1 survival before smoothing.
    pub step: StepFunction,
    /// Smoothed `S~^1(t | z, w)`; `None` for structural zeros.
    pub curve: Option<SmoothedCurve>,
    /// `p_{z,w} = Y_{z,w} / Y_w`.
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedSurvivalSurface {
    num_instruments: usize,
    cells: Vec<SurfaceCell>,
    kind: SmootherKind,
}

impl SmoothedSurvivalSurface {
    pub fn cell(&self, cell: CellIndex) -> &SurfaceCell {
        &self.cells[cell.z * self.num_instruments + cell.w]
    }

    pub fn kind(&self) -> SmootherKind {
        self.kind
    }

    pub fn bandwidth(&self, cell: CellIndex) -> Option<f64> {
        self.cell(cell).curve.as_ref().map(SmoothedCurve::bandwidth)
    }
}

impl Surface for SmoothedSurvivalSurface {
    fn num_treatments(&self) -> usize {
        self.cells.len() / self.num_instruments
    }

    fn num_instruments(&self) -> usize {
        self.num_instruments
    }

    #[inline]
    fn value(&self, t: f64, z: usize, w: usize) -> f64 {
        let cell = &self.cells[z * self.num_instruments + w];
        match &cell.curve {
            Some(curve) => curve.eval(t) * cell.p,
            None => 0.0,
        }
    }

    fn is_structural_zero(&self, z: usize, w: usize) -> bool {
        self.cells[z * self.num_instruments + w].curve.is_none()
    }
}

fn rule_of_thumb(data: &Dataset, cell: CellIndex, step: &StepFunction) -> Result<f64, SmoothingError> {
    let in_cell = || data.records().iter().filter(|r| r.z == cell.z && r.w == cell.w);
    let cause1: Vec<f64> = in_cell().filter(|r| r.event == EventCode::Cause1).map(|r| r.y).collect();
    if let Ok(h) = default_bandwidth(&cause1) {
        return Ok(h);
    }
    let all: Vec<f64> = in_cell().map(|r| r.y).collect();
    match default_bandwidth(&all) {
        Ok(h) => Ok(h),
        // A flat step is left unchanged by any bandwidth.
        Err(_) if step.jump_times().is_empty() => Ok(1.0),
        Err(e) => Err(e),
    }
}

pub fn assemble_surface(
    data: &Dataset,
    policy: &BandwidthPolicy,
    kind: SmootherKind,
) -> Result<SmoothedSurvivalSurface, SurfaceError> {
    assemble_surface_with_nodes(data, policy, kind, DEFAULT_NODES)
}

pub fn assemble_surface_with_nodes(
    data: &Dataset,
    policy: &BandwidthPolicy,
    kind: SmootherKind,
    nodes: usize,
) -> Result<SmoothedSurvivalSurface, SurfaceError> {
    let (l, k) = (data.num_treatments(), data.num_instruments());
    if let BandwidthPolicy::PerCell(h) = policy {
        if h.len() != l * k {
            return Err(SurfaceError::PolicyShape {
                expected: l * k,
                got: h.len(),
            });
        }
    }
    let cp = build_counting_processes(data);
    let counts = cell_counts(data);
    let mut cells = Vec::with_capacity(l * k);
    for z in 0..l {
        for w in 0..k {
            let index = CellIndex::new(z, w);
            let step = aalen_johansen(cp.cell(index), EventCode::Cause1);
            let p = counts.get(index) as f64 / counts.instrument_total(w) as f64;
            if data.is_structural_zero(index) {
                cells.push(SurfaceCell { step, curve: None, p: 0.0 });
                continue;
            }
            let wrap = |source| SurfaceError::Smoothing { z, w, source };
            let h = match policy {
                BandwidthPolicy::RuleOfThumb => rule_of_thumb(data, index, &step).map_err(wrap)?,
                BandwidthPolicy::Fixed(h) => *h,
                BandwidthPolicy::PerCell(hs) => hs[z * k + w],
            };
            let curve = smooth_with_nodes(&step, h, kind, nodes).map_err(wrap)?;
            cells.push(SurfaceCell {
                step,
                curve: Some(curve),
                p,
            });
        }
    }
    Ok(SmoothedSurvivalSurface {
        num_instruments: k,
        cells,
        kind,
    })
}

/// Surface given by arbitrary closures per cell; used for synthetic surfaces
/// in diagnostics and tests.
pub struct FnSurface<F> {
    pub num_treatments: usize,
    pub num_instruments: usize,
    pub f: F,
}

impl<F> Surface for FnSurface<F>
where
    F: Fn(f64, usize, usize) -> f64 + Sync,
{
    fn num_treatments(&self) -> usize {
        self.num_treatments
    }

    fn num_instruments(&self) -> usize {
        self.num_instruments
    }

    fn value(&self, t: f64, z: usize, w: usize) -> f64 {
        (self.f)(t, z, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ObservationRecord;
    use std::collections::BTreeSet;

    fn toy() -> Dataset {
        let mut records = Vec::new();
        let mut push = |y: f64, e: u8, z: usize, w: usize| {
            records.push(ObservationRecord {
                y,
                event: EventCode::from_code(e).unwrap(),
                z,
                w,
            })
        };
        for i in 0..30 {
            let y = 0.05 + i as f64 * 0.03;
            push(y, (i % 3) as u8, 0, 0);
            push(y * 0.9, ((i + 1) % 3) as u8, 0, 1);
            if i % 2 == 0 {
                push(y * 1.1, ((i + 2) % 3) as u8, 1, 1);
            }
        }
        let zeros = BTreeSet::from([CellIndex::new(1, 0)]);
        Dataset::new(records, vec!["0".into(), "1".into()], vec!["0".into(), "1".into()], zeros).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one_at_origin() {
        let data = toy();
        for kind in [SmootherKind::LocalLinear, SmootherKind::Convolution] {
            let s = assemble_surface(&data, &BandwidthPolicy::RuleOfThumb, kind).unwrap();
            for w in 0..2 {
                let total: f64 = (0..2).map(|z| s.cell(CellIndex::new(z, w)).p).sum();
                assert!((total - 1.0).abs() < 1e-15);
            }
            assert_eq!(s.value(0.3, 1, 0), 0.0);
            assert_eq!(s.cell(CellIndex::new(1, 0)).p, 0.0);
        }
        let s = assemble_surface(&data, &BandwidthPolicy::RuleOfThumb, SmootherKind::LocalLinear).unwrap();
        for w in 0..2 {
            let at_zero: f64 = (0..2).map(|z| s.value(0.0, z, w)).sum();
            assert!((at_zero - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn values_stay_within_cell_probability() {
        let data = toy();
        let s = assemble_surface(&data, &BandwidthPolicy::Fixed(0.1), SmootherKind::LocalLinear).unwrap();
        for z in 0..2 {
            for w in 0..2 {
                let p = s.cell(CellIndex::new(z, w)).p;
                for i in 0..100 {
                    let v = s.value(i as f64 * 0.02, z, w);
                    assert!(v >= 0.0 && v <= p + 1e-15);
                }
                assert!(s.value(1e6, z, w) >= 0.0);
            }
        }
    }

    #[test]
    fn policy_shape_checked() {
        let err = assemble_surface(&toy(), &BandwidthPolicy::PerCell(vec![0.1; 3]), SmootherKind::LocalLinear);
        assert!(matches!(err, Err(SurfaceError::PolicyShape { expected: 4, got: 3 })));
        let err = assemble_surface(&toy(), &BandwidthPolicy::Fixed(-1.0), SmootherKind::LocalLinear);
        assert!(matches!(err, Err(SurfaceError::Smoothing { .. })));
    }
}
