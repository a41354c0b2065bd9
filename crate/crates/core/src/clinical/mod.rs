//! Clinical record encoding: z-scored vitals plus a learned gender
//! embedding, and the deconv/conv stack that lifts the vector to an
//! image-shaped map.

mod encoder;
mod record;
mod spatial;

pub use encoder::{
    ClinicalEncoder, EMBED_PARAM, EMBED_WIDTH, FeatureSet, MissingPolicy, NormalizationStats, PreparedClinical,
    STD_FLOOR, encode_clinical, fit_normalization,
};
pub use record::{ClinicalRecord, Feature, Gender};
pub use spatial::{SpatialConfig, spatialise};
