use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// `dicom_id,split` rows.
pub fn write_split(path: &Path, rows: &[(String, Split)]) -> Result<()> {
    let inner = || -> csv::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["dicom_id", "split"])?;
        for (id, s) in rows {
            w.write_record([id.as_str(), &s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    };
    inner().map_err(|e| Error::csv(path, e))
}

pub fn read_split(path: &Path) -> Result<HashMap<String, Split>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = HashMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        out.insert(rec[0].to_string(), rec[1].parse()?);
    }
    Ok(out)
}
