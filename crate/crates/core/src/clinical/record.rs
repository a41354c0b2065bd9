use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::M, Gender::F];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "M" => Ok(Gender::M),
            "F" => Ok(Gender::F),
            other => Err(Error::UnknownCategory { feature: "gender".into(), value: other.into() }),
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::M => "M",
            Gender::F => "F",
        })
    }
}

/// The ten clinical features, numeric ones first in encoding order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Temperature,
    Heartrate,
    Resprate,
    O2sat,
    Sbp,
    Dbp,
    Pain,
    Acuity,
    Age,
    Gender,
}

impl Feature {
    pub const ALL: [Feature; 10] = [
        Feature::Temperature,
        Feature::Heartrate,
        Feature::Resprate,
        Feature::O2sat,
        Feature::Sbp,
        Feature::Dbp,
        Feature::Pain,
        Feature::Acuity,
        Feature::Age,
        Feature::Gender,
    ];
    pub const NUMERIC: [Feature; 9] = [
        Feature::Temperature,
        Feature::Heartrate,
        Feature::Resprate,
        Feature::O2sat,
        Feature::Sbp,
        Feature::Dbp,
        Feature::Pain,
        Feature::Acuity,
        Feature::Age,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Temperature => "temperature",
            Feature::Heartrate => "heartrate",
            Feature::Resprate => "resprate",
            Feature::O2sat => "o2sat",
            Feature::Sbp => "sbp",
            Feature::Dbp => "dbp",
            Feature::Pain => "pain",
            Feature::Acuity => "acuity",
            Feature::Age => "age",
            Feature::Gender => "gender",
        }
    }

    /// Position among the nine numeric features, `None` for gender.
    pub fn numeric_index(self) -> Option<usize> {
        Feature::NUMERIC.iter().position(|&f| f == self)
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Feature::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown clinical feature `{s}`")))
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Triage vitals plus demographics. Missing values are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    /// °F
    pub temperature: Option<f64>,
    pub heartrate: Option<f64>,
    pub resprate: Option<f64>,
    /// percent
    pub o2sat: Option<f64>,
    pub sbp: Option<f64>,
    pub dbp: Option<f64>,
    /// 0–10
    pub pain: Option<f64>,
    /// 1 (highest priority) to 5
    pub acuity: Option<f64>,
    pub age: Option<f64>,
    pub gender: Option<Gender>,
}

impl ClinicalRecord {
    pub fn numeric(&self, f: Feature) -> Option<f64> {
        match f {
            Feature::Temperature => self.temperature,
            Feature::Heartrate => self.heartrate,
            Feature::Resprate => self.resprate,
            Feature::O2sat => self.o2sat,
            Feature::Sbp => self.sbp,
            Feature::Dbp => self.dbp,
            Feature::Pain => self.pain,
            Feature::Acuity => self.acuity,
            Feature::Age => self.age,
            Feature::Gender => None,
        }
    }

    pub fn set_numeric(&mut self, f: Feature, v: Option<f64>) {
        let slot = match f {
            Feature::Temperature => &mut self.temperature,
            Feature::Heartrate => &mut self.heartrate,
            Feature::Resprate => &mut self.resprate,
            Feature::O2sat => &mut self.o2sat,
            Feature::Sbp => &mut self.sbp,
            Feature::Dbp => &mut self.dbp,
            Feature::Pain => &mut self.pain,
            Feature::Acuity => &mut self.acuity,
            Feature::Age => &mut self.age,
            Feature::Gender => return,
        };
        *slot = v;
    }

    pub fn is_complete(&self) -> bool {
        self.gender.is_some() && Feature::NUMERIC.iter().all(|&f| self.numeric(f).is_some())
    }

    /// Range and finiteness checks on the values that are present.
    pub fn validate(&self) -> Result<()> {
        for f in Feature::NUMERIC {
            if let Some(v) = self.numeric(f) {
                if !v.is_finite() {
                    return Err(Error::InvalidArgument(format!("{f} is not finite")));
                }
                let ok = match f {
                    Feature::Pain => (0.0..=10.0).contains(&v) && v.fract() == 0.0,
                    Feature::Acuity => (1.0..=5.0).contains(&v) && v.fract() == 0.0,
                    _ => true,
                };
                if !ok {
                    return Err(Error::InvalidArgument(format!("{f} = {v} out of range")));
                }
            }
        }
        Ok(())
    }
}
