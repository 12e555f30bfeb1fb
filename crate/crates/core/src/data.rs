//! Observation records, categorical level registries, validation and CSV I/O.
//!
//! A [`Dataset`] is immutable once validated. Every `(treatment, instrument)`
//! cell must hold at least one record unless the cell was declared a
//! structural zero (one-sided noncompliance: a treatment level that cannot be
//! reached under an instrument level).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: time `{value}` is not a finite number")]
    InvalidTime { row: usize, value: String },
    #[error("row {row}: negative time {value}")]
    NegativeTime { row: usize, value: f64 },
    #[error("row {row}: event `{value}` is not one of 0 (censored), 1, 2")]
    InvalidEvent { row: usize, value: String },
    #[error("row {row}: {column} level `{label}` is not in the declared ordering")]
    UnknownLevel {
        row: usize,
        column: &'static str,
        label: String,
    },
    #[error("at least two instrument levels required (K >= 2), found {0}")]
    TooFewInstrumentLevels(usize),
    #[error("at least two treatment levels required (L >= 2), found {0}")]
    TooFewTreatmentLevels(usize),
    #[error("duplicate {column} level label `{label}`")]
    DuplicateLevel { column: &'static str, label: String },
    #[error("cell (treatment `{z}`, instrument `{w}`) has no records; declare it a structural zero if it is unreachable")]
    EmptyCell { z: String, w: String },
    #[error("cell (treatment `{z}`, instrument `{w}`) is declared a structural zero but holds {count} records")]
    StructuralZeroNotEmpty { z: String, w: String, count: usize },
    #[error("structural zero refers to unknown level pair (`{z}`, `{w}`)")]
    UnknownStructuralZero { z: String, w: String },
    #[error("record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("invalid level registry: {0}")]
    Registry(String),
}

/// Observed `δ·E`: 0 when censored, otherwise the failure cause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum EventCode {
    Censored = 0,
    Cause1 = 1,
    Cause2 = 2,
}

impl EventCode {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Censored),
            1 => Some(Self::Cause1),
            2 => Some(Self::Cause2),
            _ => None,
        }
    }

    #[inline]
    pub fn code(self) -> u8 {
        self as u8
    }

    #[inline]
    pub fn is_failure(self) -> bool {
        self != Self::Censored
    }

    /// Relabels cause 2 as cause 1 and vice versa.
    pub fn swapped(self) -> Self {
        match self {
            Self::Censored => Self::Censored,
            Self::Cause1 => Self::Cause2,
            Self::Cause2 => Self::Cause1,
        }
    }
}

impl fmt::Display for EventCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    /// Follow-up time `min(T, C)`.
    pub y: f64,
    pub event: EventCode,
    /// Treatment level index.
    pub z: usize,
    /// Instrument level index.
    pub w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub z: usize,
    pub w: usize,
}

impl CellIndex {
    pub fn new(z: usize, w: usize) -> Self {
        Self { z, w }
    }
}

/// Level labels and structural zeros; serialized as the JSON sidecar that
/// accompanies a CSV dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LevelRegistry {
    pub treatment_levels: Vec<String>,
    pub instrument_levels: Vec<String>,
    /// `(treatment label, instrument label)` pairs that are unreachable.
    #[serde(default)]
    pub structural_zeros: Vec<(String, String)>,
}

impl LevelRegistry {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_reader(file).map_err(|e| DataError::Registry(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<ObservationRecord>,
    treatment_levels: Vec<String>,
    instrument_levels: Vec<String>,
    structural_zeros: BTreeSet<CellIndex>,
}

impl Dataset {
    pub fn new(
        records: Vec<ObservationRecord>,
        treatment_levels: Vec<String>,
        instrument_levels: Vec<String>,
        structural_zeros: BTreeSet<CellIndex>,
    ) -> Result<Self, DataError> {
        if instrument_levels.len() < 2 {
            return Err(DataError::TooFewInstrumentLevels(instrument_levels.len()));
        }
        if treatment_levels.len() < 2 {
            return Err(DataError::TooFewTreatmentLevels(treatment_levels.len()));
        }
        check_distinct(&treatment_levels, "treatment")?;
        check_distinct(&instrument_levels, "instrument")?;
        let (l, k) = (treatment_levels.len(), instrument_levels.len());

        for (index, r) in records.iter().enumerate() {
            if !r.y.is_finite() || r.y < 0.0 {
                return Err(DataError::InvalidRecord {
                    index,
                    reason: format!("time {} must be finite and nonnegative", r.y),
                });
            }
            if r.z >= l || r.w >= k {
                return Err(DataError::InvalidRecord {
                    index,
                    reason: format!("cell ({}, {}) outside the {l}x{k} registry", r.z, r.w),
                });
            }
        }
        for cell in &structural_zeros {
            if cell.z >= l || cell.w >= k {
                return Err(DataError::UnknownStructuralZero {
                    z: cell.z.to_string(),
                    w: cell.w.to_string(),
                });
            }
        }

        let mut counts = vec![0usize; l * k];
        for r in &records {
            counts[r.z * k + r.w] += 1;
        }
        for z in 0..l {
            for w in 0..k {
                let count = counts[z * k + w];
                let declared = structural_zeros.contains(&CellIndex::new(z, w));
                if declared && count > 0 {
                    return Err(DataError::StructuralZeroNotEmpty {
                        z: treatment_levels[z].clone(),
                        w: instrument_levels[w].clone(),
                        count,
                    });
                }
                if !declared && count == 0 {
                    return Err(DataError::EmptyCell {
                        z: treatment_levels[z].clone(),
                        w: instrument_levels[w].clone(),
                    });
                }
            }
        }

        Ok(Self {
            records,
            treatment_levels,
            instrument_levels,
            structural_zeros,
        })
    }

    #[inline]
    pub fn records(&self) -> &[ObservationRecord] {
        &self.records
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.records.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn treatment_levels(&self) -> &[String] {
        &self.treatment_levels
    }

    pub fn instrument_levels(&self) -> &[String] {
        &self.instrument_levels
    }

    /// `L`.
    #[inline]
    pub fn num_treatments(&self) -> usize {
        self.treatment_levels.len()
    }

    /// `K`.
    #[inline]
    pub fn num_instruments(&self) -> usize {
        self.instrument_levels.len()
    }

    pub fn structural_zeros(&self) -> &BTreeSet<CellIndex> {
        &self.structural_zeros
    }

    pub fn is_structural_zero(&self, cell: CellIndex) -> bool {
        self.structural_zeros.contains(&cell)
    }

    pub fn registry(&self) -> LevelRegistry {
        LevelRegistry {
            treatment_levels: self.treatment_levels.clone(),
            instrument_levels: self.instrument_levels.clone(),
            structural_zeros: self
                .structural_zeros
                .iter()
                .map(|c| {
                    (
                        self.treatment_levels[c.z].clone(),
                        self.instrument_levels[c.w].clone(),
                    )
                })
                .collect(),
        }
    }

    /// Same records with causes 1 and 2 exchanged.
    pub fn with_swapped_causes(&self) -> Self {
        Self {
            records: self
                .records
                .iter()
                .map(|r| ObservationRecord {
                    event: r.event.swapped(),
                    ..*r
                })
                .collect(),
            ..self.clone()
        }
    }

    /// Builds a dataset from `indices` into this one (with repetition), keeping
    /// the registry. Fails if a non-structural cell ends up empty.
    pub fn resample(&self, indices: &[usize]) -> Result<Self, DataError> {
        let records = indices.iter().map(|&i| self.records[i]).collect();
        Self::new(
            records,
            self.treatment_levels.clone(),
            self.instrument_levels.clone(),
            self.structural_zeros.clone(),
        )
    }

    /// Record indices in the tie order used by the product-limit estimators:
    /// time ascending, then event code descending, then input order.
    pub fn sorted_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (&self.records[a], &self.records[b]);
            ra.y.total_cmp(&rb.y)
                .then_with(|| rb.event.cmp(&ra.event))
                .then_with(|| a.cmp(&b))
        });
        order
    }
}

fn check_distinct(labels: &[String], column: &'static str) -> Result<(), DataError> {
    let mut seen = BTreeSet::new();
    for label in labels {
        if !seen.insert(label.as_str()) {
            return Err(DataError::DuplicateLevel {
                column,
                label: label.clone(),
            });
        }
    }
    Ok(())
}

/// Record counts per `(z, w)` cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellCounts {
    num_instruments: usize,
    counts: Vec<usize>,
}

impl CellCounts {
    pub fn get(&self, cell: CellIndex) -> usize {
        self.counts[cell.z * self.num_instruments + cell.w]
    }

    /// `Y_w`, the number of records at instrument level `w`.
    pub fn instrument_total(&self, w: usize) -> usize {
        self.counts
            .chunks(self.num_instruments)
            .map(|row| row[w])
            .sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn cell_counts(data: &Dataset) -> CellCounts {
    let k = data.num_instruments();
    let mut counts = vec![0usize; data.num_treatments() * k];
    for r in data.records() {
        counts[r.z * k + r.w] += 1;
    }
    CellCounts {
        num_instruments: k,
        counts,
    }
}

/// Column mapping and level conventions for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub time: String,
    pub event: String,
    pub treatment: String,
    pub instrument: String,
    /// Explicit level orderings; when absent levels are numbered in order of
    /// first appearance.
    pub treatment_order: Option<Vec<String>>,
    pub instrument_order: Option<Vec<String>>,
    /// Maps raw event labels to codes 0/1/2. When absent the column must
    /// already hold 0, 1 or 2.
    pub event_labels: Option<BTreeMap<String, u8>>,
    /// `(treatment label, instrument label)` cells declared unreachable.
    pub structural_zeros: Vec<(String, String)>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            time: "time".into(),
            event: "event".into(),
            treatment: "treatment".into(),
            instrument: "instrument".into(),
            treatment_order: None,
            instrument_order: None,
            event_labels: None,
            structural_zeros: Vec::new(),
        }
    }
}

impl CsvSchema {
    /// Takes level orderings and structural zeros from a registry sidecar.
    pub fn with_registry(mut self, registry: &LevelRegistry) -> Self {
        self.treatment_order = Some(registry.treatment_levels.clone());
        self.instrument_order = Some(registry.instrument_levels.clone());
        self.structural_zeros = registry.structural_zeros.clone();
        self
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, schema)
}

struct LevelIndexer {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    fixed: bool,
}

impl LevelIndexer {
    fn new(order: Option<&Vec<String>>) -> Self {
        let labels = order.cloned().unwrap_or_default();
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Self {
            labels,
            index,
            fixed: order.is_some(),
        }
    }

    fn lookup(&mut self, label: &str) -> Option<usize> {
        if let Some(&i) = self.index.get(label) {
            return Some(i);
        }
        if self.fixed {
            return None;
        }
        let i = self.labels.len();
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), i);
        Some(i)
    }
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let (ci_time, ci_event, ci_z, ci_w) = (
        column(&schema.time)?,
        column(&schema.event)?,
        column(&schema.treatment)?,
        column(&schema.instrument)?,
    );

    let mut treatments = LevelIndexer::new(schema.treatment_order.as_ref());
    let mut instruments = LevelIndexer::new(schema.instrument_order.as_ref());
    let mut records = Vec::new();

    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 1;
        let field = |c: usize| row.get(c).unwrap_or("").trim();

        let raw_time = field(ci_time);
        let y: f64 = raw_time
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| DataError::InvalidTime {
                row: line,
                value: raw_time.to_string(),
            })?;
        if y < 0.0 {
            return Err(DataError::NegativeTime { row: line, value: y });
        }

        let raw_event = field(ci_event);
        let code = match &schema.event_labels {
            Some(map) => map.get(raw_event).copied(),
            None => raw_event.parse::<u8>().ok(),
        };
        let event = code
            .and_then(EventCode::from_code)
            .ok_or_else(|| DataError::InvalidEvent {
                row: line,
                value: raw_event.to_string(),
            })?;

        let z_label = field(ci_z);
        let z = treatments
            .lookup(z_label)
            .ok_or_else(|| DataError::UnknownLevel {
                row: line,
                column: "treatment",
                label: z_label.to_string(),
            })?;
        let w_label = field(ci_w);
        let w = instruments
            .lookup(w_label)
            .ok_or_else(|| DataError::UnknownLevel {
                row: line,
                column: "instrument",
                label: w_label.to_string(),
            })?;
        records.push(ObservationRecord { y, event, z, w });
    }

    let mut zeros = BTreeSet::new();
    for (zl, wl) in &schema.structural_zeros {
        match (treatments.index.get(zl), instruments.index.get(wl)) {
            (Some(&z), Some(&w)) => {
                zeros.insert(CellIndex::new(z, w));
            }
            _ => {
                return Err(DataError::UnknownStructuralZero {
                    z: zl.clone(),
                    w: wl.clone(),
                })
            }
        }
    }

    Dataset::new(records, treatments.labels, instruments.labels, zeros)
}

/// Writes the canonical four-column layout. Times use the shortest decimal
/// representation that parses back to the same `f64`.
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["time", "event", "treatment", "instrument"])?;
    for r in data.records() {
        wtr.write_record([
            r.y.to_string(),
            r.event.code().to_string(),
            data.treatment_levels[r.z].clone(),
            data.instrument_levels[r.w].clone(),
        ])?;
    }
    wtr.flush().map_err(|e| DataError::Csv(e.into()))?;
    Ok(())
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_csv(data, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset, DataError> {
        read_csv(text.as_bytes(), &CsvSchema::default())
    }

    #[test]
    fn single_instrument_level_is_rejected() {
        let text = "time,event,treatment,instrument\n1,1,a,x\n2,2,a,x\n3,0,a,x\n4,1,a,x\n";
        let err = parse(text).unwrap_err();
        assert!(matches!(err, DataError::TooFewInstrumentLevels(1)));
        assert!(err.to_string().contains("K >= 2"));
    }

    #[test]
    fn negative_time_names_its_row() {
        let text = "time,event,treatment,instrument\n1,1,0,0\n2,1,1,1\n-1,0,0,1\n";
        let err = parse(text).unwrap_err();
        assert!(matches!(err, DataError::NegativeTime { row: 3, .. }));
        assert!(err.to_string().contains("row 3"));
    }

    #[test]
    fn bad_fields_are_reported_with_rows() {
        let base = "time,event,treatment,instrument\n1,1,0,0\n";
        assert!(matches!(
            parse(&format!("{base}abc,1,0,0\n")),
            Err(DataError::InvalidTime { row: 2, .. })
        ));
        assert!(matches!(
            parse(&format!("{base}1,3,0,0\n")),
            Err(DataError::InvalidEvent { row: 2, .. })
        ));
        assert!(matches!(
            parse("time,event,arm,instrument\n1,1,0,0\n"),
            Err(DataError::MissingColumn(c)) if c == "treatment"
        ));
    }

    #[test]
    fn empty_cell_requires_declaration() {
        let text = "time,event,treatment,instrument\n1,1,0,0\n2,2,0,1\n3,0,1,1\n";
        assert!(matches!(parse(text), Err(DataError::EmptyCell { .. })));

        let schema = CsvSchema {
            structural_zeros: vec![("1".into(), "0".into())],
            ..CsvSchema::default()
        };
        let data = read_csv(text.as_bytes(), &schema).unwrap();
        assert!(data.is_structural_zero(CellIndex::new(1, 0)));
        assert_eq!(cell_counts(&data).get(CellIndex::new(1, 0)), 0);
    }

    #[test]
    fn declared_zero_cell_must_be_empty() {
        let text = "time,event,treatment,instrument\n1,1,0,0\n2,2,0,1\n3,0,1,1\n4,0,1,0\n";
        let schema = CsvSchema {
            structural_zeros: vec![("1".into(), "0".into())],
            ..CsvSchema::default()
        };
        assert!(matches!(
            read_csv(text.as_bytes(), &schema),
            Err(DataError::StructuralZeroNotEmpty { count: 1, .. })
        ));
    }

    #[test]
    fn balanced_toy_counts() {
        let mut text = String::from("time,event,treatment,instrument\n");
        for (z, w) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            for j in 0..2 {
                text.push_str(&format!("{}.5,1,{z},{w}\n", j + 1));
            }
        }
        let data = parse(&text).unwrap();
        let counts = cell_counts(&data);
        for z in 0..2 {
            for w in 0..2 {
                assert_eq!(counts.get(CellIndex::new(z, w)), 2);
            }
        }
        assert_eq!(counts.total(), data.len());
        assert_eq!(counts.instrument_total(1), 4);
    }

    #[test]
    fn explicit_orderings_and_event_labels() {
        let text = "t,status,arm,site\n1,bc,treated,B\n2,other,control,A\n3,cens,control,B\n4,bc,treated,A\n";
        let schema = CsvSchema {
            time: "t".into(),
            event: "status".into(),
            treatment: "arm".into(),
            instrument: "site".into(),
            treatment_order: Some(vec!["control".into(), "treated".into()]),
            instrument_order: Some(vec!["A".into(), "B".into()]),
            event_labels: Some(
                [("cens", 0u8), ("bc", 1), ("other", 2)]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect(),
            ),
            structural_zeros: vec![],
        };
        let data = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(data.records()[0].z, 1);
        assert_eq!(data.records()[0].w, 1);
        assert_eq!(data.records()[1].event, EventCode::Cause2);
        assert_eq!(data.records()[2].event, EventCode::Censored);
    }

    #[test]
    fn ties_sort_events_first() {
        let text = "time,event,treatment,instrument\n2,0,0,0\n2,1,0,1\n2,2,1,0\n1,0,1,1\n";
        let data = parse(text).unwrap();
        assert_eq!(data.sorted_order(), vec![3, 2, 1, 0]);
    }

    #[test]
    fn swapping_causes_is_an_involution() {
        let text = "time,event,treatment,instrument\n1,1,0,0\n2,2,0,1\n3,0,1,1\n4,1,1,0\n";
        let data = parse(text).unwrap();
        let swapped = data.with_swapped_causes();
        assert_eq!(swapped.records()[0].event, EventCode::Cause2);
        assert_eq!(swapped.records()[2].event, EventCode::Censored);
        assert_eq!(swapped.with_swapped_causes(), data);
    }
}
