//! Source tables, the image/stay/triage join, and the synthetic generator.

mod dataset;
mod join;
mod pgm;
mod split;
mod synth;
mod tables;

pub use dataset::{Dataset, EXCLUSIONS_FILE, MANIFEST_FILE, SPLIT_FILE, Sample, generate_dataset, hold_out, join_dir, load_sample};
pub use join::{
    Exclusion, ExclusionReason, IdentityKeys, JoinOutput, JoinedInstance, image_path, join, read_exclusions, read_manifest,
    write_exclusions, write_manifest,
};
pub use pgm::GrayImage;
pub use split::{Split, read_split, write_split};
pub use synth::{
    Appearance, Phenotype, SynthBlob, SynthConfig, SynthDataset, SynthInstance, dicom_id, synth_generate,
    synth_generate_with_labels,
};
pub use tables::{
    ANNOTATION_COLUMNS, CXR_COLUMNS, EDSTAY_COLUMNS, FRONTAL_VIEWS, PATIENT_COLUMNS, SourceTables, TRIAGE_COLUMNS, Table,
    Violation, ViolationKind, validate_schema,
};
