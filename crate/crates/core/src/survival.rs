//! Counting processes per `(z, w)` cell, product-limit survival and
//! Aalen-Johansen subdistribution survival.

use serde::{Deserialize, Serialize};

use crate::data::{CellIndex, Dataset, EventCode, ObservationRecord};
use crate::step::StepFunction;

/// Counting-process summary of one sample at its distinct observed times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellProcess {
    /// Distinct observed times (failures and censorings), increasing.
    pub times: Vec<f64>,
    /// Cause-1 failures at each time (`dN^1`).
    pub d1: Vec<usize>,
    /// Cause-2 failures at each time.
    pub d2: Vec<usize>,
    /// Censorings at each time.
    pub censored: Vec<usize>,
    /// Number still under observation just before each time (`Y(t)`).
    pub at_risk: Vec<usize>,
    /// Sample size of the cell.
    pub size: usize,
}

impl CellProcess {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ObservationRecord>) -> Self {
        let mut obs: Vec<(f64, EventCode)> = records.into_iter().map(|r| (r.y, r.event)).collect();
        // Events before censorings at tied times.
        obs.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(&a.1)));
        let size = obs.len();
        let mut cp = CellProcess {
            times: Vec::new(),
            d1: Vec::new(),
            d2: Vec::new(),
            censored: Vec::new(),
            at_risk: Vec::new(),
            size,
        };
        let mut remaining = size;
        let mut i = 0;
        while i < obs.len() {
            let t = obs[i].0;
            let (mut d1, mut d2, mut c) = (0, 0, 0);
            while i < obs.len() && obs[i].0 == t {
                match obs[i].1 {
                    EventCode::Cause1 => d1 += 1,
                    EventCode::Cause2 => d2 += 1,
                    EventCode::Censored => c += 1,
                }
                i += 1;
            }
            cp.times.push(t);
            cp.d1.push(d1);
            cp.d2.push(d2);
            cp.censored.push(c);
            cp.at_risk.push(remaining);
            remaining -= d1 + d2 + c;
        }
        cp
    }

    /// All failures at index `i` (`dN`).
    #[inline]
    pub fn failures(&self, i: usize) -> usize {
        self.d1[i] + self.d2[i]
    }

    fn cause_counts(&self, cause: EventCode) -> &[usize] {
        match cause {
            EventCode::Cause1 => &self.d1,
            EventCode::Cause2 => &self.d2,
            EventCode::Censored => panic!("Aalen-Johansen requires a failure cause"),
        }
    }
}

/// Per-cell counting processes for a whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountingProcesses {
    num_instruments: usize,
    cells: Vec<CellProcess>,
    /// `Y_w`.
    pub instrument_sizes: Vec<usize>,
}

impl CountingProcesses {
    pub fn cell(&self, cell: CellIndex) -> &CellProcess {
        &self.cells[cell.z * self.num_instruments + cell.w]
    }

    pub fn num_instruments(&self) -> usize {
        self.num_instruments
    }

    pub fn num_treatments(&self) -> usize {
        self.cells.len() / self.num_instruments
    }
}

pub fn build_counting_processes(data: &Dataset) -> CountingProcesses {
    let (l, k) = (data.num_treatments(), data.num_instruments());
    let mut buckets: Vec<Vec<&ObservationRecord>> = vec![Vec::new(); l * k];
    for r in data.records() {
        buckets[r.z * k + r.w].push(r);
    }
    let cells: Vec<CellProcess> = buckets
        .into_iter()
        .map(|b| CellProcess::from_records(b))
        .collect();
    let instrument_sizes = (0..k)
        .map(|w| (0..l).map(|z| cells[z * k + w].size).sum())
        .collect();
    CountingProcesses {
        num_instruments: k,
        cells,
        instrument_sizes,
    }
}

/// Aalen-Johansen subdistribution survival `1 - F^j(t)` for `cause`.
///
/// The increment at a cause-`j` time `s` is `S(s-) dN^j(s) / Y(s)`, with the
/// overall product-limit survival taken as a left limit.
pub fn aalen_johansen(cp: &CellProcess, cause: EventCode) -> StepFunction {
    let counts = cp.cause_counts(cause);
    let mut surv = 1.0;
    let mut incidence = 0.0;
    let (mut times, mut values) = (Vec::new(), Vec::new());
    for i in 0..cp.times.len() {
        let d = cp.failures(i);
        if d == 0 {
            continue;
        }
        let y = cp.at_risk[i] as f64;
        if counts[i] > 0 {
            incidence += surv * counts[i] as f64 / y;
            times.push(cp.times[i]);
            values.push(1.0 - incidence);
        }
        surv *= 1.0 - d as f64 / y;
    }
    StepFunction::new(times, values, 1.0).expect("distinct sorted times")
}

pub fn aalen_johansen_cause1(cp: &CountingProcesses, cell: CellIndex) -> StepFunction {
    aalen_johansen(cp.cell(cell), EventCode::Cause1)
}

/// Product-limit estimate of overall survival, jumping at failure times.
pub fn product_limit(cp: &CellProcess) -> StepFunction {
    let mut surv = 1.0;
    let (mut times, mut values) = (Vec::new(), Vec::new());
    for i in 0..cp.times.len() {
        let d = cp.failures(i);
        if d == 0 {
            continue;
        }
        surv *= 1.0 - d as f64 / cp.at_risk[i] as f64;
        times.push(cp.times[i]);
        values.push(surv);
    }
    StepFunction::new(times, values, 1.0).expect("distinct sorted times")
}

pub fn product_limit_survival(cp: &CountingProcesses, cell: CellIndex) -> StepFunction {
    product_limit(cp.cell(cell))
}
