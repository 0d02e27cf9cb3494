//! Long-format counting-process data: one row per (individual, interval on
//! which the covariates are constant).
//!
//! Two storage backends implement [`DataSource`]: [`Dataset`] keeps every
//! record in memory, [`IndexedCsv`] keeps only a byte-offset index and reads
//! the rows of a batch from disk when [`sample_batch`] asks for them.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoxError, Result};

/// Upper bound on redraws when a batch happens to contain no event.
pub const MAX_RESAMPLE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub id: u64,
    pub start: f64,
    pub stop: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

impl IntervalRecord {
    pub fn new(id: u64, start: f64, stop: f64, event: bool, covariates: Vec<f64>) -> Self {
        Self {
            id,
            start,
            stop,
            event,
            covariates,
        }
    }

    pub fn dim(&self) -> usize {
        self.covariates.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetTotals {
    pub n_individuals: usize,
    pub n_observations: usize,
    pub total_events: usize,
    pub p: usize,
}

impl DatasetTotals {
    /// Counts computed from a record slice; `p` is taken from the first
    /// record, or from `p_hint` when the slice is empty.
    pub fn from_records(records: &[IntervalRecord], p_hint: usize) -> Self {
        let mut ids = std::collections::HashSet::new();
        let mut events = 0;
        for r in records {
            ids.insert(r.id);
            if r.event {
                events += 1;
            }
        }
        Self {
            n_individuals: ids.len(),
            n_observations: records.len(),
            total_events: events,
            p: records.first().map_or(p_hint, IntervalRecord::dim),
        }
    }
}

/// Column names used to read a long-format CSV.
///
/// `covariates = None` takes every column after the four required ones, in
/// header order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub id: String,
    pub start: String,
    pub stop: String,
    pub event: String,
    pub covariates: Option<Vec<String>>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            start: "start".into(),
            stop: "stop".into(),
            event: "event".into(),
            covariates: None,
        }
    }
}

struct ResolvedColumns {
    id: usize,
    start: usize,
    stop: usize,
    event: usize,
    covariates: Vec<usize>,
    names: Vec<String>,
    width: usize,
}

impl ColumnSchema {
    fn resolve(&self, header: &csv::StringRecord) -> Result<ResolvedColumns> {
        let find = |name: &str| -> Result<usize> {
            header
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| CoxError::Parse {
                    line: 1,
                    message: format!("missing column `{name}`"),
                })
        };
        let id = find(&self.id)?;
        let start = find(&self.start)?;
        let stop = find(&self.stop)?;
        let event = find(&self.event)?;
        let required = [id, start, stop, event];

        let (covariates, names) = match &self.covariates {
            Some(cols) => {
                let idx = cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
                let ignored: Vec<&str> = header
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !required.contains(i) && !idx.contains(i))
                    .map(|(_, h)| h)
                    .collect();
                if !ignored.is_empty() {
                    log::warn!("ignoring columns not in schema: {}", ignored.join(","));
                }
                (idx, cols.clone())
            }
            None => header
                .iter()
                .enumerate()
                .filter(|(i, _)| !required.contains(i))
                .map(|(i, h)| (i, h.trim().to_string()))
                .unzip(),
        };
        Ok(ResolvedColumns {
            id,
            start,
            stop,
            event,
            covariates,
            names,
            width: header.len(),
        })
    }
}

fn parse_field<T: std::str::FromStr>(row: &csv::StringRecord, col: usize, line: u64, what: &str) -> Result<T> {
    let raw = row.get(col).unwrap_or("").trim();
    raw.parse::<T>().map_err(|_| CoxError::Parse {
        line,
        message: format!("non-numeric {what} field `{raw}`"),
    })
}

fn parse_row(row: &csv::StringRecord, cols: &ResolvedColumns, line: u64) -> Result<IntervalRecord> {
    if row.len() != cols.width {
        return Err(CoxError::Parse {
            line,
            message: format!("expected {} fields, found {}", cols.width, row.len()),
        });
    }
    let id: u64 = parse_field(row, cols.id, line, "id")?;
    let start: f64 = parse_field(row, cols.start, line, "start")?;
    let stop: f64 = parse_field(row, cols.stop, line, "stop")?;
    let event: f64 = parse_field(row, cols.event, line, "event")?;
    let covariates = cols
        .covariates
        .iter()
        .map(|&c| parse_field::<f64>(row, c, line, "covariate"))
        .collect::<Result<Vec<_>>>()?;

    if !start.is_finite() || !stop.is_finite() || covariates.iter().any(|v| !v.is_finite()) {
        return Err(CoxError::Validation {
            line,
            message: "non-finite value".into(),
        });
    }
    if start >= stop {
        return Err(CoxError::Validation {
            line,
            message: format!("start {start} >= stop {stop}"),
        });
    }
    let event = if event == 0.0 {
        false
    } else if event == 1.0 {
        true
    } else {
        return Err(CoxError::Validation {
            line,
            message: format!("event flag {event} not in {{0,1}}"),
        });
    };
    Ok(IntervalRecord::new(id, start, stop, event, covariates))
}

fn line_of(row: &csv::StringRecord) -> u64 {
    row.position().map_or(0, |p| p.line())
}

/// Order-of-first-appearance grouping of row indices by individual id.
fn group_rows(ids: impl Iterator<Item = u64>) -> Vec<Vec<usize>> {
    let mut slot: HashMap<u64, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (row, id) in ids.enumerate() {
        let g = *slot.entry(id).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(row);
    }
    groups
}

/// Random-access view over a long-format dataset.
pub trait DataSource: Send + Sync {
    fn totals(&self) -> DatasetTotals;

    fn covariate_names(&self) -> &[String];

    /// Row indices belonging to the individual at position `individual`
    /// (0-based, order of first appearance).
    fn individual_rows(&self, individual: usize) -> &[usize];

    /// Event flag of every row, indexed by row.
    fn event_flags(&self) -> &[bool];

    /// Materialize the given rows, in the order requested.
    fn fetch(&self, rows: &[usize]) -> Result<Vec<IntervalRecord>>;

    fn fetch_all(&self) -> Result<Vec<IntervalRecord>> {
        let rows: Vec<usize> = (0..self.totals().n_observations).collect();
        self.fetch(&rows)
    }
}

/// Fully in-memory dataset. Records are stored grouped by individual and,
/// within an individual, ordered by `start`.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<IntervalRecord>,
    totals: DatasetTotals,
    names: Vec<String>,
    groups: Vec<Vec<usize>>,
    events: Vec<bool>,
}

impl Dataset {
    pub fn new(records: Vec<IntervalRecord>, names: Vec<String>) -> Result<Self> {
        let p = names.len();
        if let Some(bad) = records.iter().find(|r| r.dim() != p) {
            return Err(CoxError::Dimension {
                expected: p,
                got: bad.dim(),
            });
        }
        let groups = group_rows(records.iter().map(|r| r.id));
        let mut ordered = Vec::with_capacity(records.len());
        let mut slots: Vec<Option<IntervalRecord>> = records.into_iter().map(Some).collect();
        let mut new_groups = Vec::with_capacity(groups.len());
        for g in &groups {
            let mut members: Vec<IntervalRecord> = g.iter().map(|&i| slots[i].take().unwrap()).collect();
            members.sort_by(|a, b| a.start.total_cmp(&b.start));
            let first = ordered.len();
            ordered.extend(members);
            new_groups.push((first..ordered.len()).collect());
        }
        let totals = DatasetTotals::from_records(&ordered, p);
        let events = ordered.iter().map(|r| r.event).collect();
        Ok(Self {
            records: ordered,
            totals,
            names,
            groups: new_groups,
            events,
        })
    }

    /// Builds a dataset with generated covariate names `x1..xp`.
    pub fn from_records(records: Vec<IntervalRecord>) -> Result<Self> {
        let p = records.first().map_or(0, IntervalRecord::dim);
        Self::new(records, default_names(p))
    }

    pub fn records(&self) -> &[IntervalRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<IntervalRecord> {
        self.records
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_long_csv(&self.records, &self.names, writer)
    }
}

pub fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

impl DataSource for Dataset {
    fn totals(&self) -> DatasetTotals {
        self.totals
    }

    fn covariate_names(&self) -> &[String] {
        &self.names
    }

    fn individual_rows(&self, individual: usize) -> &[usize] {
        &self.groups[individual]
    }

    fn event_flags(&self) -> &[bool] {
        &self.events
    }

    fn fetch(&self, rows: &[usize]) -> Result<Vec<IntervalRecord>> {
        rows.iter()
            .map(|&r| {
                self.records
                    .get(r)
                    .cloned()
                    .ok_or_else(|| CoxError::InvalidArgument(format!("row {r} out of range")))
            })
            .collect()
    }

    fn fetch_all(&self) -> Result<Vec<IntervalRecord>> {
        Ok(self.records.clone())
    }
}

/// Reads a long-format CSV completely into memory.
pub fn parse_long_csv<R: Read>(source: R, schema: &ColumnSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(source);
    let header = reader.headers()?.clone();
    let cols = schema.resolve(&header)?;
    let mut records = Vec::new();
    let mut row = csv::StringRecord::new();
    while reader.read_record(&mut row)? {
        records.push(parse_row(&row, &cols, line_of(&row))?);
    }
    Dataset::new(records, cols.names)
}

pub fn read_long_csv(path: &Path, schema: &ColumnSchema) -> Result<Dataset> {
    parse_long_csv(File::open(path)?, schema)
}

/// Writes records in the long format `id,start,stop,event,<covariates>`.
/// Values use the shortest representation that parses back to the same f64.
pub fn write_long_csv<W: Write>(records: &[IntervalRecord], names: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "start".into(), "stop".into(), "event".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    let mut fields: Vec<String> = Vec::with_capacity(header.len());
    for r in records {
        if r.dim() != names.len() {
            return Err(CoxError::Dimension {
                expected: names.len(),
                got: r.dim(),
            });
        }
        fields.clear();
        fields.push(r.id.to_string());
        fields.push(r.start.to_string());
        fields.push(r.stop.to_string());
        fields.push(if r.event { "1" } else { "0" }.to_string());
        fields.extend(r.covariates.iter().map(f64::to_string));
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

/// On-disk dataset: one pass over the file builds a row index of byte
/// offsets; batches are read back with random access.
pub struct IndexedCsv {
    path: PathBuf,
    reader: Mutex<csv::Reader<File>>,
    cols: ResolvedColumns,
    offsets: Vec<csv::Position>,
    groups: Vec<Vec<usize>>,
    events: Vec<bool>,
    totals: DatasetTotals,
}

impl IndexedCsv {
    pub fn open(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(&path)?;
        let header = reader.headers()?.clone();
        let cols = schema.resolve(&header)?;
        let mut offsets = Vec::new();
        let mut ids = Vec::new();
        let mut events = Vec::new();
        let mut row = csv::StringRecord::new();
        while reader.read_record(&mut row)? {
            let rec = parse_row(&row, &cols, line_of(&row))?;
            offsets.push(row.position().cloned().expect("csv reader tracks positions"));
            ids.push(rec.id);
            events.push(rec.event);
        }
        let groups = group_rows(ids.iter().copied());
        let totals = DatasetTotals {
            n_individuals: groups.len(),
            n_observations: offsets.len(),
            total_events: events.iter().filter(|&&e| e).count(),
            p: cols.covariates.len(),
        };
        let reader = csv::ReaderBuilder::new().flexible(true).from_path(&path)?;
        Ok(Self {
            path,
            reader: Mutex::new(reader),
            cols,
            offsets,
            groups,
            events,
            totals,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl DataSource for IndexedCsv {
    fn totals(&self) -> DatasetTotals {
        self.totals
    }

    fn covariate_names(&self) -> &[String] {
        &self.cols.names
    }

    fn individual_rows(&self, individual: usize) -> &[usize] {
        &self.groups[individual]
    }

    fn event_flags(&self) -> &[bool] {
        &self.events
    }

    fn fetch(&self, rows: &[usize]) -> Result<Vec<IntervalRecord>> {
        let mut reader = self.reader.lock().expect("csv reader poisoned");
        let mut row = csv::StringRecord::new();
        let mut out = Vec::with_capacity(rows.len());
        for &r in rows {
            let pos = self
                .offsets
                .get(r)
                .ok_or_else(|| CoxError::InvalidArgument(format!("row {r} out of range")))?;
            reader.seek(pos.clone())?;
            if !reader.read_record(&mut row)? {
                return Err(CoxError::Internal(format!("row {r} vanished from {}", self.path.display())));
            }
            out.push(parse_row(&row, &self.cols, pos.line())?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    EmptyInterval,
    NegativeStart,
    NonFinite,
    CovariateDimension,
    GapBetweenIntervals,
    OverlappingIntervals,
    MultipleEvents,
    EventNotLast,
}

impl ViolationKind {
    pub fn severity(self) -> Severity {
        match self {
            ViolationKind::GapBetweenIntervals => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::EmptyInterval => "empty interval",
            ViolationKind::NegativeStart => "negative start time",
            ViolationKind::NonFinite => "non-finite value",
            ViolationKind::CovariateDimension => "covariate dimension differs from first record",
            ViolationKind::GapBetweenIntervals => "gap between intervals",
            ViolationKind::OverlappingIntervals => "overlapping intervals",
            ViolationKind::MultipleEvents => "more than one event",
            ViolationKind::EventNotLast => "event on a record that is not the last",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Position of the offending record in the input slice.
    pub index: usize,
    pub individual: u64,
    pub kind: ViolationKind,
    pub severity: Severity,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} at record {} (id {}): {}",
            self.severity, self.index, self.individual, self.kind
        )
    }
}

/// Checks every record invariant and returns all violations found.
pub fn validate(records: &[IntervalRecord]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |index: usize, kind: ViolationKind| {
        out.push(Violation {
            index,
            individual: records[index].id,
            kind,
            severity: kind.severity(),
        })
    };

    let p = records.first().map_or(0, IntervalRecord::dim);
    for (i, r) in records.iter().enumerate() {
        if !r.start.is_finite() || !r.stop.is_finite() || r.covariates.iter().any(|v| !v.is_finite()) {
            push(i, ViolationKind::NonFinite);
            continue;
        }
        if r.start >= r.stop {
            push(i, ViolationKind::EmptyInterval);
        }
        if r.start < 0.0 {
            push(i, ViolationKind::NegativeStart);
        }
        if r.dim() != p {
            push(i, ViolationKind::CovariateDimension);
        }
    }

    for group in group_rows(records.iter().map(|r| r.id)) {
        let mut rows = group;
        rows.sort_by(|&a, &b| records[a].start.total_cmp(&records[b].start));
        for pair in rows.windows(2) {
            let (prev, next) = (&records[pair[0]], &records[pair[1]]);
            if next.start < prev.stop {
                push(pair[1], ViolationKind::OverlappingIntervals);
            } else if next.start > prev.stop {
                push(pair[1], ViolationKind::GapBetweenIntervals);
            }
        }
        let event_rows: Vec<usize> = rows.iter().copied().filter(|&r| records[r].event).collect();
        if event_rows.len() > 1 {
            for &r in &event_rows[1..] {
                push(r, ViolationKind::MultipleEvents);
            }
        }
        if let (Some(&first_event), Some(&last)) = (event_rows.first(), rows.last()) {
            if first_event != last {
                push(first_event, ViolationKind::EventNotLast);
            }
        }
    }
    out.sort_by_key(|v| v.index);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    #[serde(alias = "ind")]
    Individuals,
    #[serde(alias = "obs")]
    Observations,
}

impl std::str::FromStr for BatchMode {
    type Err = CoxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ind" | "individuals" => Ok(BatchMode::Individuals),
            "obs" | "observations" => Ok(BatchMode::Observations),
            other => Err(CoxError::InvalidArgument(format!("unknown batch mode `{other}`"))),
        }
    }
}

/// A random subsample together with its reweighting factors.
///
/// `w1` rescales the event sum (total events / batch events) and `w2` the
/// risk-set sum (population units / sampled units).
#[derive(Debug, Clone)]
pub struct Batch {
    pub records: Vec<IntervalRecord>,
    pub w1: f64,
    pub w2: f64,
    pub batch_events: usize,
    pub sampled_units: usize,
}

impl Batch {
    /// The whole dataset as one batch with unit weights.
    pub fn full(source: &dyn DataSource) -> Result<Self> {
        let records = source.fetch_all()?;
        Self::unweighted(records)
    }

    pub fn unweighted(records: Vec<IntervalRecord>) -> Result<Self> {
        let batch_events = records.iter().filter(|r| r.event).count();
        if batch_events == 0 {
            return Err(CoxError::NoEvents);
        }
        let sampled_units = records.len();
        Ok(Self {
            records,
            w1: 1.0,
            w2: 1.0,
            batch_events,
            sampled_units,
        })
    }
}

/// Draws a batch without replacement. Batches with no event are discarded
/// and redrawn, which conditions every retained batch on having at least one
/// event; the induced bias is of the order of the zero-event probability.
pub fn sample_batch<R: Rng + ?Sized>(
    source: &dyn DataSource,
    mode: BatchMode,
    size: usize,
    rng: &mut R,
) -> Result<Batch> {
    let totals = source.totals();
    if size == 0 {
        return Err(CoxError::InvalidArgument("batch size must be at least 1".into()));
    }
    if totals.total_events == 0 {
        return Err(CoxError::NoEvents);
    }
    let population = match mode {
        BatchMode::Individuals => totals.n_individuals,
        BatchMode::Observations => totals.n_observations,
    };
    if size > population {
        return Err(CoxError::InvalidArgument(format!(
            "batch size {size} exceeds population of {population} {}",
            match mode {
                BatchMode::Individuals => "individuals",
                BatchMode::Observations => "observations",
            }
        )));
    }

    let flags = source.event_flags();
    for _ in 0..MAX_RESAMPLE_ATTEMPTS {
        let mut units = index::sample(rng, population, size).into_vec();
        units.sort_unstable();
        let rows: Vec<usize> = match mode {
            BatchMode::Individuals => units
                .iter()
                .flat_map(|&i| source.individual_rows(i).iter().copied())
                .collect(),
            BatchMode::Observations => units,
        };
        let batch_events = rows.iter().filter(|&&r| flags[r]).count();
        if batch_events == 0 {
            continue;
        }
        let records = source.fetch(&rows)?;
        return Ok(Batch {
            records,
            w1: totals.total_events as f64 / batch_events as f64,
            w2: population as f64 / size as f64,
            batch_events,
            sampled_units: size,
        });
    }
    Err(CoxError::InvalidArgument(format!(
        "no batch with an event found in {MAX_RESAMPLE_ATTEMPTS} draws; increase the batch size"
    )))
}


#[cfg(test)]
pub(crate) use tests::TABLE1;

#[cfg(test)]
mod roundtrip {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn csv_roundtrip_is_bit_exact(
            rows in proptest::collection::vec((0u64..50, 0.0f64..1e6, 1e-6f64..1e4, any::<bool>(), proptest::collection::vec(-1e12f64..1e12, 3)), 1..40)
        ) {
            let records: Vec<IntervalRecord> = rows
                .into_iter()
                .map(|(id, start, len, ev, x)| IntervalRecord::new(id, start, start + len, ev, x))
                .filter(|r| r.start < r.stop)
                .collect();
            let mut buf = Vec::new();
            write_long_csv(&records, &default_names(3), &mut buf).unwrap();
            let back = parse_long_csv(buf.as_slice(), &ColumnSchema::default()).unwrap();
            let mut a: Vec<_> = records.iter().map(|r| (r.id, r.start.to_bits(), r.stop.to_bits(), r.event, r.covariates.iter().map(|v| v.to_bits()).collect::<Vec<_>>())).collect();
            let mut b: Vec<_> = back.records().iter().map(|r| (r.id, r.start.to_bits(), r.stop.to_bits(), r.event, r.covariates.iter().map(|v| v.to_bits()).collect::<Vec<_>>())).collect();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
