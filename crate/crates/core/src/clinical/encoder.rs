use serde::{Deserialize, Serialize};

use super::record::{ClinicalRecord, Feature, Gender};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, ParamStore, Tensor, Var};

/// Width of the gender embedding; with all nine numeric features the
/// encoded vector has length 64.
pub const EMBED_WIDTH: usize = 55;
pub const STD_FLOOR: f64 = 1e-8;
pub const EMBED_PARAM: &str = "clin.embed";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    MedianImpute,
}

/// Per-feature statistics over the nine numeric features, fitted on the
/// training split.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub median: Vec<f64>,
    pub gender_mode: Gender,
}

impl NormalizationStats {
    pub fn to_tensors(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("norm.mean", Tensor::from_vec(self.mean.clone())),
            ("norm.std", Tensor::from_vec(self.std.clone())),
            ("norm.median", Tensor::from_vec(self.median.clone())),
            ("norm.gender_mode", Tensor::scalar(self.gender_mode.index() as f64)),
        ]
    }

    pub fn from_tensors(get: impl Fn(&str) -> Result<Tensor>) -> Result<Self> {
        let vec9 = |name: &str| -> Result<Vec<f64>> {
            let t = get(name)?;
            if t.numel() != Feature::NUMERIC.len() {
                return Err(Error::Format(format!("`{name}` must have {} entries", Feature::NUMERIC.len())));
            }
            Ok(t.into_data())
        };
        let mode = get("norm.gender_mode")?.item();
        let gender_mode = *Gender::ALL
            .get(mode as usize)
            .ok_or_else(|| Error::Format(format!("bad gender mode {mode}")))?;
        Ok(NormalizationStats { mean: vec9("norm.mean")?, std: vec9("norm.std")?, median: vec9("norm.median")?, gender_mode })
    }
}

/// Mean, population standard deviation (floored) and median of each
/// numeric feature over the values present in `records`.
pub fn fit_normalization(records: &[ClinicalRecord]) -> Result<NormalizationStats> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("fit_normalization needs at least one record".into()));
    }
    let mut stats = NormalizationStats { mean: vec![], std: vec![], median: vec![], gender_mode: Gender::M };
    for f in Feature::NUMERIC {
        let mut vals: Vec<f64> = records.iter().filter_map(|r| r.numeric(f)).collect();
        if vals.is_empty() {
            return Err(Error::MissingValue(f.name().into()));
        }
        // Welford
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, &v) in vals.iter().enumerate() {
            let d = v - mean;
            mean += d / (i + 1) as f64;
            m2 += d * (v - mean);
        }
        let std = (m2 / vals.len() as f64).sqrt().max(STD_FLOOR);
        vals.sort_by(f64::total_cmp);
        let mid = vals.len() / 2;
        let median = if vals.len() % 2 == 1 { vals[mid] } else { 0.5 * (vals[mid - 1] + vals[mid]) };
        stats.mean.push(mean);
        stats.std.push(std);
        stats.median.push(median);
    }
    let females = records.iter().filter(|r| r.gender == Some(Gender::F)).count();
    let males = records.iter().filter(|r| r.gender == Some(Gender::M)).count();
    stats.gender_mode = if females > males { Gender::F } else { Gender::M };
    Ok(stats)
}

/// Ordered, non-empty subset of the ten clinical features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet(Vec<Feature>);

impl FeatureSet {
    pub fn all() -> Self {
        FeatureSet(Feature::ALL.to_vec())
    }

    pub fn new(mut features: Vec<Feature>) -> Result<Self> {
        features.sort();
        features.dedup();
        if features.is_empty() {
            return Err(Error::Config("clinical feature subset must not be empty".into()));
        }
        Ok(FeatureSet(features))
    }

    /// Comma-separated feature names, e.g. `gender,heartrate`.
    pub fn parse(list: &str) -> Result<Self> {
        let feats = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<Vec<_>>>()?;
        Self::new(feats)
    }

    pub fn features(&self) -> &[Feature] {
        &self.0
    }

    pub fn numeric(&self) -> impl Iterator<Item = Feature> + '_ {
        self.0.iter().copied().filter(|f| *f != Feature::Gender)
    }

    pub fn has_gender(&self) -> bool {
        self.0.contains(&Feature::Gender)
    }

    /// Length of the encoded clinical vector.
    pub fn encoded_len(&self) -> usize {
        self.numeric().count() + if self.has_gender() { EMBED_WIDTH } else { 0 }
    }

    pub fn label(&self) -> String {
        self.0.iter().map(|f| f.name()).collect::<Vec<_>>().join(",")
    }
}

/// Graph-free half of the encoding: z-scored numerics and the category index.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedClinical {
    pub numeric: Vec<f64>,
    pub gender: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClinicalEncoder {
    pub features: FeatureSet,
    pub stats: NormalizationStats,
    pub policy: MissingPolicy,
}

impl ClinicalEncoder {
    pub fn new(features: FeatureSet, stats: NormalizationStats, policy: MissingPolicy) -> Self {
        ClinicalEncoder { features, stats, policy }
    }

    pub fn len(&self) -> usize {
        self.features.encoded_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        if self.features.has_gender() {
            let init = Init::Glorot { fan_in: Gender::ALL.len(), fan_out: EMBED_WIDTH };
            store.register(EMBED_PARAM, &[Gender::ALL.len(), EMBED_WIDTH], init)?;
        }
        Ok(())
    }

    pub fn prepare(&self, rec: &ClinicalRecord) -> Result<PreparedClinical> {
        rec.validate()?;
        let mut numeric = Vec::new();
        for f in self.features.numeric() {
            let i = f.numeric_index().expect("numeric feature");
            let v = match (rec.numeric(f), self.policy) {
                (Some(v), _) => v,
                (None, MissingPolicy::MedianImpute) => self.stats.median[i],
                (None, MissingPolicy::Reject) => return Err(Error::MissingValue(f.name().into())),
            };
            numeric.push((v - self.stats.mean[i]) / self.stats.std[i]);
        }
        let gender = if self.features.has_gender() {
            let g = match (rec.gender, self.policy) {
                (Some(g), _) => g,
                (None, MissingPolicy::MedianImpute) => self.stats.gender_mode,
                (None, MissingPolicy::Reject) => return Err(Error::MissingValue("gender".into())),
            };
            Some(g.index())
        } else {
            None
        };
        Ok(PreparedClinical { numeric, gender })
    }

    /// `[1, n]`: z-scored numerics followed by the embedding row.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, p: &PreparedClinical) -> Result<Var> {
        let mut parts = Vec::with_capacity(2);
        if !p.numeric.is_empty() {
            parts.push(g.constant(Tensor::new(vec![1, p.numeric.len()], p.numeric.clone())?)?);
        }
        if let Some(idx) = p.gender {
            let table = g.param(store, EMBED_PARAM)?;
            parts.push(g.embedding(table, &[idx])?);
        }
        if parts.len() == 1 { Ok(parts[0]) } else { g.concat(&parts, 1) }
    }
}

/// Full ten-feature encoding with an explicit embedding table `[2, 55]`;
/// missing values are rejected.
pub fn encode_clinical(rec: &ClinicalRecord, stats: &NormalizationStats, table: &Tensor) -> Result<Vec<f64>> {
    if table.shape() != [Gender::ALL.len(), EMBED_WIDTH] {
        return Err(Error::shape("encode_clinical", format!("embedding table must be [2, {EMBED_WIDTH}]")));
    }
    let enc = ClinicalEncoder::new(FeatureSet::all(), stats.clone(), MissingPolicy::Reject);
    let p = enc.prepare(rec)?;
    let g = p.gender.expect("full feature set has gender");
    let mut out = p.numeric;
    out.extend_from_slice(&table.data()[g * EMBED_WIDTH..(g + 1) * EMBED_WIDTH]);
    Ok(out)
}
