use std::path::{Path, PathBuf};

use super::join::{JoinOutput, JoinedInstance, join, read_manifest, write_exclusions, write_manifest};
use super::pgm::GrayImage;
use super::split::{Split, read_split};
use super::synth::{SynthConfig, synth_generate};
use super::tables::SourceTables;
use crate::clinical::ClinicalRecord;
use crate::detection::GroundTruthBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const EXCLUSIONS_FILE: &str = "exclusions.csv";
pub const SPLIT_FILE: &str = "split.csv";

/// Training/evaluation item with its pixels loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, 1, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub clinical: ClinicalRecord,
    pub gts: Vec<GroundTruthBox>,
}

/// A joined dataset directory: manifest, split file and images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub instances: Vec<JoinedInstance>,
    pub splits: std::collections::HashMap<String, Split>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let instances = read_manifest(&root.join(MANIFEST_FILE))?;
        let splits = read_split(&root.join(SPLIT_FILE))?;
        Ok(Dataset { root: root.to_path_buf(), instances, splits })
    }

    pub fn instances(&self, split: Split) -> Vec<&JoinedInstance> {
        self.instances.iter().filter(|i| self.splits.get(&i.keys.dicom_id) == Some(&split)).collect()
    }

    pub fn samples(&self, split: Split) -> Result<Vec<Sample>> {
        self.instances(split).into_iter().map(|i| load_sample(&self.root, i)).collect()
    }
}

pub fn load_sample(root: &Path, inst: &JoinedInstance) -> Result<Sample> {
    let img = GrayImage::load(&root.join(&inst.image))?;
    if img.width != inst.width || img.height != inst.height {
        return Err(Error::Format(format!(
            "{}: image is {}x{}, metadata says {}x{}",
            inst.image, img.width, img.height, inst.width, inst.height
        )));
    }
    Ok(Sample {
        id: inst.keys.dicom_id.clone(),
        image: Tensor::new(vec![1, 1, img.height, img.width], img.to_unit())?,
        clinical: inst.clinical.clone(),
        gts: inst.boxes.clone(),
    })
}

/// Splits off the last `fraction` of `samples` (at least one item when the
/// fraction is positive and more than one sample exists) as a validation set.
pub fn hold_out(mut samples: Vec<Sample>, fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    let k = if fraction > 0.0 && n > 1 { ((n as f64 * fraction).round() as usize).clamp(1, n - 1) } else { 0 };
    let val = samples.split_off(n - k);
    (samples, val)
}

/// Joins `data/tables` against the images under `data` and writes the
/// manifest and exclusion log into `out`.
pub fn join_dir(data: &Path, out: &Path) -> Result<JoinOutput> {
    let tables = SourceTables::read_dir(&data.join("tables"))?;
    let joined = join(&tables, Some(data))?;
    write_manifest(&out.join(MANIFEST_FILE), &joined.instances)?;
    write_exclusions(&out.join(EXCLUSIONS_FILE), &joined.exclusions)?;
    Ok(joined)
}

/// Generates a synthetic dataset under `root` and joins it in place.
pub fn generate_dataset(root: &Path, cfg: &SynthConfig, seed: u64) -> Result<JoinOutput> {
    let ds = synth_generate(cfg, seed)?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    ds.write(root)?;
    join_dir(root, root)
}
