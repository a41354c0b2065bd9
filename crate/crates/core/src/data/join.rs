use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tables::{FRONTAL_VIEWS, SourceTables, TRIAGE_VITALS, parse_datetime, parse_f64, parse_optional, parse_study_datetime, validate_schema};
use crate::clinical::{ClinicalRecord, Gender};
use crate::detection::{AbnormalityClass, BBox, GroundTruthBox};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IdentityKeys {
    pub subject_id: String,
    pub stay_id: String,
    pub study_id: String,
    pub dicom_id: String,
}

/// One image with its clinical record and boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinedInstance {
    #[serde(flatten)]
    pub keys: IdentityKeys,
    /// Image path relative to the dataset root.
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub clinical: ClinicalRecord,
    pub boxes: Vec<GroundTruthBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    WrongView,
    MissingAnnotation,
    NoCoveringStay,
    AmbiguousStay,
    MissingTriage,
    IncompleteClinical,
    BoxOutOfBounds,
    MissingImage,
}

impl ExclusionReason {
    pub const ALL: [ExclusionReason; 8] = [
        ExclusionReason::WrongView,
        ExclusionReason::MissingAnnotation,
        ExclusionReason::NoCoveringStay,
        ExclusionReason::AmbiguousStay,
        ExclusionReason::MissingTriage,
        ExclusionReason::IncompleteClinical,
        ExclusionReason::BoxOutOfBounds,
        ExclusionReason::MissingImage,
    ];

    pub fn code(self) -> &'static str {
        match self {
            ExclusionReason::WrongView => "wrong view",
            ExclusionReason::MissingAnnotation => "missing annotation",
            ExclusionReason::NoCoveringStay => "no covering ED stay",
            ExclusionReason::AmbiguousStay => "ambiguous stay",
            ExclusionReason::MissingTriage => "missing triage",
            ExclusionReason::IncompleteClinical => "incomplete clinical record",
            ExclusionReason::BoxOutOfBounds => "box out of bounds",
            ExclusionReason::MissingImage => "missing image",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.code() == s)
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub dicom_id: String,
    pub reason: ExclusionReason,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct JoinOutput {
    /// Sorted by `dicom_id`.
    pub instances: Vec<JoinedInstance>,
    /// Sorted by `dicom_id`.
    pub exclusions: Vec<Exclusion>,
}

impl JoinOutput {
    pub fn reason_counts(&self) -> HashMap<ExclusionReason, usize> {
        let mut m = HashMap::new();
        for e in &self.exclusions {
            *m.entry(e.reason).or_insert(0) += 1;
        }
        m
    }
}

/// Relative image path for `dicom_id`.
pub fn image_path(dicom_id: &str) -> String {
    format!("images/{dicom_id}.pgm")
}

struct Stay {
    id: String,
    intime: chrono::NaiveDateTime,
    outtime: chrono::NaiveDateTime,
}

/// Links every image to exactly one ED stay and its triage row. Checks run
/// in order: view, annotation, stay (none / several), triage, clinical
/// completeness, box bounds, image file (only when `root` is given).
pub fn join(t: &SourceTables, root: Option<&Path>) -> Result<JoinOutput> {
    if let Some(v) = validate_schema(t).first() {
        return Err(Error::Schema(v.to_string()));
    }
    let col = |table: &super::Table, name: &str| table.column(name).expect("validated column");

    let (ps, pg, pa) = (col(&t.patients, "subject_id"), col(&t.patients, "gender"), col(&t.patients, "anchor_age"));
    let patients: HashMap<&str, (&str, &str)> =
        t.patients.rows.iter().map(|r| (r[ps].as_str(), (r[pg].as_str(), r[pa].as_str()))).collect();

    let (es, ei, eo, ep) = (col(&t.edstays, "stay_id"), col(&t.edstays, "intime"), col(&t.edstays, "outtime"), col(&t.edstays, "subject_id"));
    let mut stays: HashMap<&str, Vec<Stay>> = HashMap::new();
    for r in &t.edstays.rows {
        stays.entry(r[ep].as_str()).or_default().push(Stay {
            id: r[es].clone(),
            intime: parse_datetime(&r[ei]).expect("validated"),
            outtime: parse_datetime(&r[eo]).expect("validated"),
        });
    }

    let ts = col(&t.triage, "stay_id");
    let vital_cols: Vec<usize> = TRIAGE_VITALS.iter().map(|v| col(&t.triage, v)).collect();
    let triage: HashMap<&str, &Vec<String>> = t.triage.rows.iter().map(|r| (r[ts].as_str(), r)).collect();

    let (ad, al) = (col(&t.annotations, "dicom_id"), col(&t.annotations, "label"));
    let coords = ["xmin", "ymin", "xmax", "ymax"].map(|c| col(&t.annotations, c));
    let mut boxes: HashMap<&str, Vec<GroundTruthBox>> = HashMap::new();
    for r in &t.annotations.rows {
        let [x0, y0, x1, y1] = coords.map(|c| parse_f64(&r[c]).expect("validated"));
        boxes.entry(r[ad].as_str()).or_default().push(GroundTruthBox {
            class: r[al].parse::<AbnormalityClass>()?,
            bbox: BBox::from_corners(x0, y0, x1, y1),
        });
    }
    for v in boxes.values_mut() {
        v.sort_by(|a, b| {
            (a.class, a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h)
                .partial_cmp(&(b.class, b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h))
                .expect("finite coordinates")
        });
    }

    let c = |name| col(&t.cxr_metadata, name);
    let (cd, cs, cst, cv, cdate, ctime, crows, ccols) =
        (c("dicom_id"), c("subject_id"), c("study_id"), c("ViewPosition"), c("StudyDate"), c("StudyTime"), c("Rows"), c("Columns"));
    let mut order: Vec<&Vec<String>> = t.cxr_metadata.rows.iter().collect();
    order.sort_by(|a, b| a[cd].cmp(&b[cd]));

    let mut out = JoinOutput::default();
    for r in order {
        let dicom = r[cd].clone();
        let exclude = |reason: ExclusionReason, detail: String| Exclusion { dicom_id: dicom.clone(), reason, detail };
        let view = r[cv].trim().to_ascii_uppercase();
        if !FRONTAL_VIEWS.contains(&view.as_str()) {
            out.exclusions.push(exclude(ExclusionReason::WrongView, format!("view `{}`", r[cv])));
            continue;
        }
        let Some(gts) = boxes.get(dicom.as_str()) else {
            out.exclusions.push(exclude(ExclusionReason::MissingAnnotation, String::new()));
            continue;
        };
        let when = parse_study_datetime(&r[cdate], &r[ctime]).expect("validated");
        let subject = r[cs].as_str();
        let covering: Vec<&Stay> =
            stays.get(subject).map(|v| v.iter().filter(|s| s.intime <= when && when <= s.outtime).collect()).unwrap_or_default();
        let stay = match covering.as_slice() {
            [] => {
                out.exclusions.push(exclude(ExclusionReason::NoCoveringStay, format!("study at {when}")));
                continue;
            }
            [s] => *s,
            many => {
                let mut ids: Vec<&str> = many.iter().map(|s| s.id.as_str()).collect();
                ids.sort_unstable();
                out.exclusions.push(exclude(ExclusionReason::AmbiguousStay, format!("stays {}", ids.join(" "))));
                continue;
            }
        };
        let Some(tri) = triage.get(stay.id.as_str()) else {
            out.exclusions.push(exclude(ExclusionReason::MissingTriage, format!("stay {}", stay.id)));
            continue;
        };
        let mut rec = ClinicalRecord::default();
        let vitals: Vec<Option<f64>> = vital_cols.iter().map(|&i| parse_optional(&tri[i]).expect("validated")).collect();
        [rec.temperature, rec.heartrate, rec.resprate, rec.o2sat, rec.sbp, rec.dbp, rec.pain, rec.acuity] =
            vitals.try_into().expect("eight vitals");
        if let Some((g, a)) = patients.get(subject) {
            rec.gender = g.parse::<Gender>().ok();
            rec.age = parse_optional(a).expect("validated");
        }
        if !rec.is_complete() {
            out.exclusions.push(exclude(ExclusionReason::IncompleteClinical, String::new()));
            continue;
        }
        let width = parse_f64(&r[ccols]).expect("validated") as usize;
        let height = parse_f64(&r[crows]).expect("validated") as usize;
        if let Some(b) = gts.iter().find(|g| !g.bbox.within(width as f64, height as f64)) {
            out.exclusions.push(exclude(ExclusionReason::BoxOutOfBounds, format!("{:?}", b.bbox)));
            continue;
        }
        let image = image_path(&dicom);
        if let Some(root) = root
            && !root.join(&image).is_file()
        {
            out.exclusions.push(exclude(ExclusionReason::MissingImage, image));
            continue;
        }
        out.instances.push(JoinedInstance {
            keys: IdentityKeys { subject_id: subject.into(), stay_id: stay.id.clone(), study_id: r[cst].clone(), dicom_id: dicom },
            image,
            width,
            height,
            clinical: rec,
            boxes: gts.clone(),
        });
    }
    Ok(out)
}

/// One JSON object per line.
pub fn write_manifest(path: &Path, instances: &[JoinedInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for inst in instances {
        serde_json::to_writer(&mut f, inst)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<JoinedInstance>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// CSV with columns `dicom_id,reason,detail`.
pub fn write_exclusions(path: &Path, exclusions: &[Exclusion]) -> Result<()> {
    let inner = || -> csv::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["dicom_id", "reason", "detail"])?;
        for e in exclusions {
            w.write_record([e.dicom_id.as_str(), e.reason.code(), e.detail.as_str()])?;
        }
        w.flush()?;
        Ok(())
    };
    inner().map_err(|e| Error::csv(path, e))
}

pub fn read_exclusions(path: &Path) -> Result<Vec<Exclusion>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let reason = ExclusionReason::from_code(&rec[1]).ok_or_else(|| Error::Format(format!("unknown exclusion reason `{}`", &rec[1])))?;
        out.push(Exclusion { dicom_id: rec[0].to_string(), reason, detail: rec.get(2).unwrap_or("").to_string() });
    }
    Ok(out)
}
