use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::clinical::Gender;
use crate::detection::AbnormalityClass;
use crate::error::{Error, Result};

/// A CSV table kept as raw strings so every cell can be validated.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Table {
    pub name: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, headers: &[&str]) -> Self {
        Table { name: name.into(), headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn read(name: &str, path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let headers = r.headers().map_err(|e| Error::csv(path, e))?.iter().map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec.map_err(|e| Error::csv(path, e))?.iter().map(|c| c.trim().to_string()).collect());
        }
        Ok(Table { name: name.into(), headers, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let inner = || -> csv::Result<()> {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(&self.headers)?;
            for row in &self.rows {
                w.write_record(row)?;
            }
            w.flush()?;
            Ok(())
        };
        inner().map_err(|e| Error::csv(path, e))
    }

    /// Cell at `row` under `column`, or `None` when the column is absent.
    pub fn cell(&self, row: usize, column: &str) -> Option<&str> {
        self.column(column).and_then(|c| self.rows[row].get(c)).map(String::as_str)
    }
}

pub const PATIENTS: &str = "patients";
pub const EDSTAYS: &str = "edstays";
pub const TRIAGE: &str = "triage";
pub const CXR_METADATA: &str = "cxr_metadata";
pub const ANNOTATIONS: &str = "annotations";

pub const PATIENT_COLUMNS: [&str; 3] = ["subject_id", "gender", "anchor_age"];
pub const EDSTAY_COLUMNS: [&str; 4] = ["subject_id", "stay_id", "intime", "outtime"];
pub const TRIAGE_VITALS: [&str; 8] = ["temperature", "heartrate", "resprate", "o2sat", "sbp", "dbp", "pain", "acuity"];
pub const TRIAGE_COLUMNS: [&str; 10] =
    ["subject_id", "stay_id", "temperature", "heartrate", "resprate", "o2sat", "sbp", "dbp", "pain", "acuity"];
pub const CXR_COLUMNS: [&str; 8] =
    ["dicom_id", "subject_id", "study_id", "ViewPosition", "StudyDate", "StudyTime", "Rows", "Columns"];
pub const ANNOTATION_COLUMNS: [&str; 6] = ["dicom_id", "label", "xmin", "ymin", "xmax", "ymax"];

/// Views accepted as frontal.
pub const FRONTAL_VIEWS: [&str; 2] = ["AP", "PA"];

const DATETIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// The five source tables of the join.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceTables {
    pub patients: Table,
    pub edstays: Table,
    pub triage: Table,
    pub cxr_metadata: Table,
    pub annotations: Table,
}

impl Default for SourceTables {
    fn default() -> Self {
        SourceTables {
            patients: Table::new(PATIENTS, &PATIENT_COLUMNS),
            edstays: Table::new(EDSTAYS, &EDSTAY_COLUMNS),
            triage: Table::new(TRIAGE, &TRIAGE_COLUMNS),
            cxr_metadata: Table::new(CXR_METADATA, &CXR_COLUMNS),
            annotations: Table::new(ANNOTATIONS, &ANNOTATION_COLUMNS),
        }
    }
}

impl SourceTables {
    pub fn tables(&self) -> [&Table; 5] {
        [&self.patients, &self.edstays, &self.triage, &self.cxr_metadata, &self.annotations]
    }

    /// Reads `<name>.csv` for each table from `dir`.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| Table::read(name, &dir.join(format!("{name}.csv")));
        Ok(SourceTables {
            patients: read(PATIENTS)?,
            edstays: read(EDSTAYS)?,
            triage: read(TRIAGE)?,
            cxr_metadata: read(CXR_METADATA)?,
            annotations: read(ANNOTATIONS)?,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for t in self.tables() {
            t.write(&dir.join(format!("{}.csv", t.name)))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    MissingColumn,
    Type,
    Range,
    Duplicate,
    Reference,
}

/// One schema problem; `row` is the 1-based data row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub table: String,
    pub column: String,
    pub row: Option<usize>,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.row {
            Some(r) => write!(f, "{}.{} row {}: {}", self.table, self.column, r, self.message),
            None => write!(f, "{}.{}: {}", self.table, self.column, self.message),
        }
    }
}

pub fn parse_datetime(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, DATETIME_FORMAT).ok()
}

pub fn format_datetime(t: &NaiveDateTime) -> String {
    t.format(DATETIME_FORMAT).to_string()
}

/// `StudyDate` as `YYYYMMDD` and `StudyTime` as `HHMMSS` with optional fraction.
pub fn parse_study_datetime(date: &str, time: &str) -> Option<NaiveDateTime> {
    let d = NaiveDate::parse_from_str(date, "%Y%m%d").ok()?;
    let whole = time.split('.').next()?;
    if whole.is_empty() || whole.len() > 6 || !whole.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let padded = format!("{whole:0>6}");
    let t = NaiveTime::parse_from_str(&padded, "%H%M%S").ok()?;
    Some(d.and_time(t))
}

pub fn parse_f64(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Empty → `Ok(None)`; otherwise must parse.
pub fn parse_optional(s: &str) -> std::result::Result<Option<f64>, ()> {
    if s.is_empty() { Ok(None) } else { parse_f64(s).map(Some).ok_or(()) }
}

struct Checker<'a> {
    table: &'a Table,
    out: &'a mut Vec<Violation>,
}

impl Checker<'_> {
    fn report(&mut self, column: &str, row: Option<usize>, kind: ViolationKind, message: String) {
        self.out.push(Violation { table: self.table.name.clone(), column: column.into(), row, kind, message });
    }

    /// Reports absent columns; returns whether all are present.
    fn columns(&mut self, cols: &[&str]) -> bool {
        let mut ok = true;
        for c in cols {
            if self.table.column(c).is_none() {
                self.report(c, None, ViolationKind::MissingColumn, "column missing".into());
                ok = false;
            }
        }
        ok
    }

    fn each(&mut self, column: &str, mut f: impl FnMut(&str) -> Option<(ViolationKind, String)>) {
        let Some(c) = self.table.column(column) else { return };
        for (i, row) in self.table.rows.iter().enumerate() {
            let v = row.get(c).map_or("", String::as_str);
            if let Some((kind, msg)) = f(v) {
                self.out.push(Violation { table: self.table.name.clone(), column: column.into(), row: Some(i + 1), kind, message: msg });
            }
        }
    }

    fn non_empty(&mut self, column: &str) {
        self.each(column, |v| v.is_empty().then(|| (ViolationKind::Type, "empty identifier".into())));
    }

    fn unique(&mut self, column: &str) {
        let mut seen = HashSet::new();
        self.each(column, |v| (!v.is_empty() && !seen.insert(v.to_string())).then(|| (ViolationKind::Duplicate, format!("duplicate `{v}`"))));
    }

    fn number(&mut self, column: &str, optional: bool, range: Option<(f64, f64)>, integer: bool) {
        self.each(column, |v| {
            if v.is_empty() {
                return (!optional).then(|| (ViolationKind::Type, "missing value".into()));
            }
            let Some(x) = parse_f64(v) else { return Some((ViolationKind::Type, format!("`{v}` is not a number"))) };
            if integer && x.fract() != 0.0 {
                return Some((ViolationKind::Type, format!("`{v}` is not an integer")));
            }
            match range {
                Some((lo, hi)) if !(lo..=hi).contains(&x) => Some((ViolationKind::Range, format!("{x} outside [{lo}, {hi}]"))),
                _ => None,
            }
        });
    }

    fn references(&mut self, column: &str, keys: &HashSet<&str>, target: &str) {
        self.each(column, |v| {
            (!v.is_empty() && !keys.contains(v)).then(|| (ViolationKind::Reference, format!("`{v}` not found in {target}")))
        });
    }
}

fn key_set<'a>(t: &'a Table, column: &str) -> HashSet<&'a str> {
    match t.column(column) {
        Some(c) => t.rows.iter().filter_map(|r| r.get(c)).map(String::as_str).collect(),
        None => HashSet::new(),
    }
}

/// Column presence, types, ranges, key uniqueness and referential integrity.
/// Empty triage vitals are allowed here; the join excludes such stays.
pub fn validate_schema(t: &SourceTables) -> Vec<Violation> {
    let mut out = Vec::new();
    let subjects = key_set(&t.patients, "subject_id");
    let stays = key_set(&t.edstays, "stay_id");
    let dicoms = key_set(&t.cxr_metadata, "dicom_id");

    let mut c = Checker { table: &t.patients, out: &mut out };
    c.columns(&PATIENT_COLUMNS);
    c.non_empty("subject_id");
    c.unique("subject_id");
    c.each("gender", |v| {
        (!v.is_empty() && v.parse::<Gender>().is_err()).then(|| (ViolationKind::Type, format!("unknown gender `{v}`")))
    });
    c.number("anchor_age", true, Some((0.0, 150.0)), false);

    let mut c = Checker { table: &t.edstays, out: &mut out };
    if c.columns(&EDSTAY_COLUMNS) {
        c.non_empty("stay_id");
        c.unique("stay_id");
        c.references("subject_id", &subjects, PATIENTS);
        c.each("intime", |v| parse_datetime(v).is_none().then(|| (ViolationKind::Type, format!("bad datetime `{v}`"))));
        c.each("outtime", |v| parse_datetime(v).is_none().then(|| (ViolationKind::Type, format!("bad datetime `{v}`"))));
        for (i, _) in t.edstays.rows.iter().enumerate() {
            let (a, b) = (t.edstays.cell(i, "intime").and_then(parse_datetime), t.edstays.cell(i, "outtime").and_then(parse_datetime));
            if let (Some(a), Some(b)) = (a, b)
                && a >= b
            {
                c.report("outtime", Some(i + 1), ViolationKind::Range, "outtime not after intime".into());
            }
        }
    }

    let mut c = Checker { table: &t.triage, out: &mut out };
    if c.columns(&TRIAGE_COLUMNS) {
        c.unique("stay_id");
        c.references("stay_id", &stays, EDSTAYS);
        c.references("subject_id", &subjects, PATIENTS);
        for v in ["temperature", "heartrate", "resprate", "o2sat", "sbp", "dbp"] {
            c.number(v, true, None, false);
        }
        c.number("pain", true, Some((0.0, 10.0)), false);
        c.number("acuity", true, Some((1.0, 5.0)), true);
        let stay_subject: HashMap<&str, &str> = match (t.edstays.column("stay_id"), t.edstays.column("subject_id")) {
            (Some(s), Some(p)) => t.edstays.rows.iter().map(|r| (r[s].as_str(), r[p].as_str())).collect(),
            _ => HashMap::new(),
        };
        for i in 0..t.triage.rows.len() {
            let (stay, subj) = (t.triage.cell(i, "stay_id").unwrap_or(""), t.triage.cell(i, "subject_id").unwrap_or(""));
            if let Some(owner) = stay_subject.get(stay)
                && *owner != subj
            {
                c.report("subject_id", Some(i + 1), ViolationKind::Reference, format!("stay `{stay}` belongs to `{owner}`"));
            }
        }
    }

    let mut c = Checker { table: &t.cxr_metadata, out: &mut out };
    if c.columns(&CXR_COLUMNS) {
        c.non_empty("dicom_id");
        c.unique("dicom_id");
        c.non_empty("study_id");
        c.references("subject_id", &subjects, PATIENTS);
        c.number("Rows", false, Some((1.0, 1e6)), true);
        c.number("Columns", false, Some((1.0, 1e6)), true);
        for i in 0..t.cxr_metadata.rows.len() {
            let (d, tm) = (t.cxr_metadata.cell(i, "StudyDate").unwrap_or(""), t.cxr_metadata.cell(i, "StudyTime").unwrap_or(""));
            if parse_study_datetime(d, tm).is_none() {
                c.report("StudyDate", Some(i + 1), ViolationKind::Type, format!("bad study date/time `{d}` `{tm}`"));
            }
        }
    }

    let mut c = Checker { table: &t.annotations, out: &mut out };
    if c.columns(&ANNOTATION_COLUMNS) {
        c.references("dicom_id", &dicoms, CXR_METADATA);
        c.each("label", |v| {
            v.parse::<AbnormalityClass>().is_err().then(|| (ViolationKind::Type, format!("unknown label `{v}`")))
        });
        for col in ["xmin", "ymin", "xmax", "ymax"] {
            c.number(col, false, None, false);
        }
        for i in 0..t.annotations.rows.len() {
            let get = |col| t.annotations.cell(i, col).and_then(parse_f64);
            if let (Some(x0), Some(y0), Some(x1), Some(y1)) = (get("xmin"), get("ymin"), get("xmax"), get("ymax"))
                && (x1 <= x0 || y1 <= y0)
            {
                c.report("xmax", Some(i + 1), ViolationKind::Range, "empty box".into());
            }
        }
    }
    out
}
