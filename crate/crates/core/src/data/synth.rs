use std::collections::HashMap;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use super::join::join;
use super::pgm::GrayImage;
use super::split::{Split, write_split};
use super::tables::{SourceTables, format_datetime};
use crate::detection::{AbnormalityClass, BBox};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, name_seed};

/// Generator settings. `kappa` is the probability that an image's clinical
/// phenotype comes from its own ambiguous blob rather than from a random
/// other image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    /// Relative class frequencies in `AbnormalityClass` order.
    pub class_weights: [f64; 5],
    pub kappa: f64,
    pub max_blobs: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Extra lateral-view images, as a fraction of the instance count.
    pub lateral_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 800,
            n_test: 200,
            image_size: 64,
            class_weights: [1.0; 5],
            kappa: 1.0,
            max_blobs: 3,
            noise: 0.04,
            lateral_fraction: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.n_train + self.n_test == 0 {
            return bad("no instances requested".into());
        }
        if self.image_size < 32 {
            return bad(format!("image_size {} below 32", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa {} outside [0, 1]", self.kappa));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return bad("class weights must be non-negative with a positive sum".into());
        }
        let [w0, w1, w2, w3, w4] = self.class_weights;
        if w0 + w1 + w3 <= 0.0 && w2 + w4 > 0.0 && self.max_blobs > 1 {
            return bad("need a non-ambiguous class when several blobs are allowed".into());
        }
        if self.max_blobs == 0 {
            return bad("max_blobs must be at least 1".into());
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.lateral_fraction) {
            return bad("noise must be non-negative and lateral_fraction in [0, 1]".into());
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_test
    }
}

/// What an image shows; the two ambiguous classes share one appearance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Appearance {
    Solid,
    HStripes,
    Checker,
    VStripes,
}

impl Appearance {
    pub fn of(class: AbnormalityClass) -> Self {
        match class {
            AbnormalityClass::EnlargedCardiacSilhouette => Appearance::Solid,
            AbnormalityClass::Atelectasis => Appearance::HStripes,
            AbnormalityClass::Consolidation | AbnormalityClass::PulmonaryEdema => Appearance::Checker,
            AbnormalityClass::PleuralAbnormality => Appearance::VStripes,
        }
    }

    fn intensity(self, dx: usize, dy: usize, w: usize, h: usize) -> Option<f64> {
        match self {
            Appearance::Solid => {
                let u = (dx as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                let v = (dy as f64 + 0.5) / h as f64 * 2.0 - 1.0;
                (u * u + v * v <= 1.0).then_some(0.85)
            }
            Appearance::HStripes => Some(if (dy / 2) % 2 == 0 { 0.8 } else { 0.35 }),
            Appearance::Checker => Some(if (dx / 2 + dy / 2) % 2 == 0 { 0.85 } else { 0.3 }),
            Appearance::VStripes => Some(if (dx / 2) % 2 == 0 { 0.8 } else { 0.35 }),
        }
    }
}

/// Extra clinical signal attached to an instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phenotype {
    None,
    /// Temperature raised by 3 °F.
    Fever,
    /// Respiratory rate raised by 10.
    Tachypnea,
}

impl Phenotype {
    fn of(label: Option<AbnormalityClass>) -> Self {
        match label {
            Some(AbnormalityClass::Consolidation) => Phenotype::Fever,
            Some(AbnormalityClass::PulmonaryEdema) => Phenotype::Tachypnea,
            _ => Phenotype::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthBlob {
    pub class: AbnormalityClass,
    pub bbox: BBox,
}

/// Generated instance before it is written out as tables.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthInstance {
    pub dicom_id: String,
    pub split: Split,
    pub image: GrayImage,
    pub blobs: Vec<SynthBlob>,
    pub phenotype: Phenotype,
}

impl SynthInstance {
    /// Label of the image's ambiguous blob, if it has one.
    pub fn ambiguous_label(&self) -> Option<AbnormalityClass> {
        self.blobs.iter().map(|b| b.class).find(|c| AbnormalityClass::AMBIGUOUS.contains(c))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub tables: SourceTables,
    pub instances: Vec<SynthInstance>,
    /// Lateral views: excluded by the join, written for realism.
    pub laterals: Vec<(String, GrayImage)>,
}

fn draw_appearance(rng: &mut ChaCha8Rng, w: &[f64; 5], allow_ambiguous: bool) -> Appearance {
    let weights = [w[0], w[1], if allow_ambiguous { w[2] + w[4] } else { 0.0 }, w[3]];
    let kinds = [Appearance::Solid, Appearance::HStripes, Appearance::Checker, Appearance::VStripes];
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (k, wt) in kinds.iter().zip(weights) {
        if u < wt {
            return *k;
        }
        u -= wt;
    }
    kinds[weights.iter().rposition(|w| *w > 0.0).expect("positive weight")]
}

fn appearance_class(a: Appearance) -> AbnormalityClass {
    match a {
        Appearance::Solid => AbnormalityClass::EnlargedCardiacSilhouette,
        Appearance::HStripes => AbnormalityClass::Atelectasis,
        Appearance::VStripes => AbnormalityClass::PleuralAbnormality,
        Appearance::Checker => unreachable!("ambiguous appearance is resolved by the label stream"),
    }
}

/// Draws the image and its blob appearances; pixel values never depend on
/// the label stream.
fn draw_image(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> (Vec<f64>, Vec<(Appearance, BBox)>) {
    let s = cfg.image_size;
    let scale = s as f64 / 64.0;
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid std");
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut px: Vec<f64> = (0..s * s)
        .map(|i| {
            let (y, x) = ((i / s) as f64, (i % s) as f64);
            0.15 + 0.05 * ((x + y) / (6.0 * scale) + phase).sin()
        })
        .collect();
    let n = rng.gen_range(1..=cfg.max_blobs);
    let mut blobs: Vec<(Appearance, BBox)> = Vec::new();
    for _ in 0..n {
        let has_amb = blobs.iter().any(|b| b.0 == Appearance::Checker);
        let kind = draw_appearance(rng, &cfg.class_weights, !has_amb);
        let lo = (12.0 * scale).round() as usize;
        let hi = (24.0 * scale).round() as usize;
        for _ in 0..50 {
            let (w, h) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
            let (x, y) = (rng.gen_range(0..=s - w), rng.gen_range(0..=s - h));
            let b = BBox::new(x as f64, y as f64, w as f64, h as f64);
            if blobs.iter().all(|o| o.1.intersection(&b) == 0.0) {
                for dy in 0..h {
                    for dx in 0..w {
                        if let Some(v) = kind.intensity(dx, dy, w, h) {
                            px[(y + dy) * s + x + dx] = v;
                        }
                    }
                }
                blobs.push((kind, b));
                break;
            }
        }
    }
    for p in &mut px {
        *p += noise.sample(rng);
    }
    (px, blobs)
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    Normal::new(mean, std).expect("valid std").sample(rng)
}

fn round_to(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

pub fn dicom_id(i: usize) -> String {
    format!("cxr{i:05}")
}

/// Builds the dataset in memory.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    synth_generate_with_labels(cfg, seed, name_seed(seed, "labels"))
}

/// As `synth_generate`, with an explicit seed for the stream that resolves
/// ambiguous blobs to a class.
pub fn synth_generate_with_labels(cfg: &SynthConfig, seed: u64, label_seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut img_rng = ChaCha8Rng::seed_from_u64(name_seed(seed, "images"));
    let mut label_rng = ChaCha8Rng::seed_from_u64(label_seed);
    let mut clin_rng = ChaCha8Rng::seed_from_u64(name_seed(seed, "clinical"));
    let [_, _, w_cons, _, w_edema] = cfg.class_weights;
    let p_cons = if w_cons + w_edema > 0.0 { w_cons / (w_cons + w_edema) } else { 0.5 };

    let mut instances = Vec::with_capacity(cfg.total());
    for i in 0..cfg.total() {
        let (px, drawn) = draw_image(&mut img_rng, cfg);
        let blobs = drawn
            .into_iter()
            .map(|(a, bbox)| {
                let class = if a == Appearance::Checker {
                    if label_rng.gen_bool(p_cons) { AbnormalityClass::Consolidation } else { AbnormalityClass::PulmonaryEdema }
                } else {
                    appearance_class(a)
                };
                SynthBlob { class, bbox }
            })
            .collect();
        instances.push(SynthInstance {
            dicom_id: dicom_id(i),
            split: if i < cfg.n_train { Split::Train } else { Split::Test },
            image: GrayImage::from_unit(cfg.image_size, cfg.image_size, &px)?,
            blobs,
            phenotype: Phenotype::None,
        });
    }

    let own: Vec<Phenotype> = instances.iter().map(|s| Phenotype::of(s.ambiguous_label())).collect();
    let mut shuffled = own.clone();
    shuffled.shuffle(&mut clin_rng);
    for (i, inst) in instances.iter_mut().enumerate() {
        let keep = clin_rng.gen_bool(cfg.kappa);
        inst.phenotype = if keep { own[i] } else { shuffled[i] };
    }

    let n_lat = (cfg.lateral_fraction * cfg.total() as f64).round() as usize;
    let mut tables = SourceTables::default();
    let mut laterals = Vec::new();
    let epoch = NaiveDate::from_ymd_opt(2015, 1, 1).expect("valid date").and_hms_opt(0, 0, 0).expect("valid time");
    for (i, inst) in instances.iter().enumerate() {
        let subject = (10_000_000 + i).to_string();
        let stay = (30_000_000 + i).to_string();
        let study = (50_000_000 + i).to_string();
        let gender = if clin_rng.gen_bool(0.5) { "M" } else { "F" };
        let age = clin_rng.gen_range(20..=90);
        tables.patients.push(vec![subject.clone(), gender.into(), age.to_string()]);

        let intime = epoch + Duration::days(i as i64) + Duration::minutes(clin_rng.gen_range(0..18 * 60));
        let stay_minutes = clin_rng.gen_range(180..720);
        let outtime = intime + Duration::minutes(stay_minutes);
        tables.edstays.push(vec![subject.clone(), stay.clone(), format_datetime(&intime), format_datetime(&outtime)]);

        let mut temp = normal(&mut clin_rng, 98.2, 0.6);
        let mut resp = normal(&mut clin_rng, 17.0, 2.0);
        match inst.phenotype {
            Phenotype::Fever => temp += 3.0,
            Phenotype::Tachypnea => resp += 10.0,
            Phenotype::None => {}
        }
        let hr = normal(&mut clin_rng, 85.0, 12.0);
        let o2 = normal(&mut clin_rng, 97.0, 1.5).min(100.0);
        let sbp = normal(&mut clin_rng, 130.0, 15.0);
        let dbp = normal(&mut clin_rng, 75.0, 10.0);
        let pain = clin_rng.gen_range(0..=10);
        let acuity = clin_rng.gen_range(1..=5);
        tables.triage.push(vec![
            subject.clone(),
            stay,
            format!("{:.1}", round_to(temp, 0.1)),
            format!("{}", hr.round()),
            format!("{}", resp.round()),
            format!("{}", o2.round()),
            format!("{}", sbp.round()),
            format!("{}", dbp.round()),
            pain.to_string(),
            acuity.to_string(),
        ]);

        let when = intime + Duration::minutes(clin_rng.gen_range(1..stay_minutes));
        let (date, time) = (when.format("%Y%m%d").to_string(), when.format("%H%M%S").to_string());
        let side = cfg.image_size.to_string();
        tables.cxr_metadata.push(vec![
            inst.dicom_id.clone(),
            subject.clone(),
            study.clone(),
            "AP".into(),
            date.clone(),
            time.clone(),
            side.clone(),
            side.clone(),
        ]);
        for b in &inst.blobs {
            tables.annotations.push(vec![
                inst.dicom_id.clone(),
                b.class.name().into(),
                b.bbox.x.to_string(),
                b.bbox.y.to_string(),
                b.bbox.x2().to_string(),
                b.bbox.y2().to_string(),
            ]);
        }
        if i < n_lat {
            let id = format!("{}-lat", inst.dicom_id);
            tables.cxr_metadata.push(vec![id.clone(), subject, study, "LATERAL".into(), date, time, side.clone(), side]);
            let (px, _) = draw_image(&mut img_rng, cfg);
            laterals.push((id, GrayImage::from_unit(cfg.image_size, cfg.image_size, &px)?));
        }
    }
    Ok(SynthDataset { config: cfg.clone(), seed, tables, instances, laterals })
}

impl SynthDataset {
    /// Writes `tables/*.csv`, `images/*.pgm`, `split.csv` and `synth.json`.
    pub fn write(&self, root: &Path) -> Result<()> {
        self.tables.write_dir(&root.join("tables"))?;
        let img_dir = root.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for inst in &self.instances {
            inst.image.save(&img_dir.join(format!("{}.pgm", inst.dicom_id)))?;
        }
        for (id, img) in &self.laterals {
            img.save(&img_dir.join(format!("{id}.pgm")))?;
        }
        let split: Vec<(String, Split)> = self.instances.iter().map(|s| (s.dicom_id.clone(), s.split)).collect();
        write_split(&root.join("split.csv"), &split)?;
        let meta = serde_json::json!({ "seed": self.seed, "config": self.config });
        let path = root.join("synth.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    /// Joins the tables in memory and pairs each joined row with its pixels;
    /// returns `(train, test)`.
    pub fn samples(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let out = join(&self.tables, None)?;
        let by_id: HashMap<&str, &SynthInstance> = self.instances.iter().map(|s| (s.dicom_id.as_str(), s)).collect();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for inst in out.instances {
            let src = by_id
                .get(inst.keys.dicom_id.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("no pixels for `{}`", inst.keys.dicom_id)))?;
            let img = &src.image;
            let sample = Sample {
                image: Tensor::new(vec![1, 1, img.height, img.width], img.to_unit())?,
                id: inst.keys.dicom_id,
                clinical: inst.clinical,
                gts: inst.boxes,
            };
            match src.split {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
        Ok((train, test))
    }
}
