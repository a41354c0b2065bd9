//! The `mdfnet` command line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::clinical::FeatureSet;
use crate::data::{
    Dataset, JoinOutput, MANIFEST_FILE, Sample, SourceTables, Split, SynthConfig, generate_dataset, hold_out, join_dir,
    validate_schema,
};
use crate::detection::{AbnormalityClass, Detection};
use crate::error::{Error, Result};
use crate::fusion::FusionMethod;
use crate::metrics::{ClassReport, EvalReport, ImageResult, default_sweep, evaluate};
use crate::model::{Mode, Model, ModelConfig};
use crate::training::{TrainConfig, TrainOutcome, predict, train_observed};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

#[derive(Debug, Parser)]
#[command(name = "mdfnet", version, about = "Multimodal dual-fusion detector on image + clinical data")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration with optional `[synth]` and `[train]` tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    #[arg(long, global = true)]
    pub fusion: Option<FusionMethod>,
    /// Comma-separated clinical features, e.g. `gender,heartrate`.
    #[arg(long, global = true)]
    pub features: Option<String>,
    /// Score threshold for detections (default 0.05).
    #[arg(long, global = true)]
    pub score_thresh: Option<f64>,
    /// IoBB threshold for a true positive (default 0.5).
    #[arg(long, global = true)]
    pub iobb_thresh: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and its joined manifest.
    Generate {
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Validate and join the source tables under `--data`.
    Join {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train on the train split of `--data`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint, or a predictions file, on the test split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// JSON lines of `{"dicom_id": .., "detections": [..]}`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train and evaluate one variant per 3-D fusion method.
    AblateFusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Comma-separated subset of sum, concat-linear, concat-conv, hadamard.
        #[arg(long, default_value = "sum,concat-linear,concat-conv,hadamard")]
        methods: String,
    },
    /// Train and evaluate one variant per clinical feature subset.
    AblateFeatures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Subsets separated by `;`, features within a subset by `,`.
        #[arg(long, default_value = "gender,heartrate;gender,resprate;gender,temperature")]
        subsets: String,
    },
    /// Merge report or ablation JSON files into one comparison table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Resolved configuration of a run; echoed into every report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the command-line overrides and validates the result.
    pub fn resolve(path: Option<&Path>, g: &GlobalArgs) -> Result<Self> {
        let mut cfg = Self::load(path)?;
        let t = &mut cfg.train;
        if let Some(s) = g.seed {
            t.seed = s;
        }
        if let Some(m) = g.mode {
            t.model.mode = m;
        }
        if let Some(f) = g.fusion {
            t.model.fusion = f;
        }
        if let Some(f) = &g.features {
            if t.model.mode == Mode::Baseline {
                return Err(Error::Config("mode baseline reads no clinical data; drop --features".into()));
            }
            t.model.features = FeatureSet::parse(f)?;
        }
        if let Some(s) = g.score_thresh {
            t.score_thresh = s;
        }
        if let Some(s) = g.iobb_thresh {
            t.iobb_thresh = s;
        }
        cfg.synth.validate()?;
        t.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dicom_id: String,
    pub detections: Vec<Detection>,
}

pub fn write_predictions(path: &Path, samples: &[Sample], images: &[ImageResult]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (s, r) in samples.iter().zip(images) {
        let rec = PredictionRecord { dicom_id: s.id.clone(), detections: r.preds.clone() };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub map: f64,
    pub mar: f64,
    pub classes: Vec<ClassReport>,
}

impl VariantRow {
    pub fn from_report(variant: &str, r: &EvalReport) -> Self {
        VariantRow { variant: variant.to_string(), map: r.map, mar: r.mar, classes: r.classes.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<VariantRow>,
    pub config: serde_json::Value,
}

impl AblationTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows_csv(&self.rows, w)
    }
}

fn write_rows_csv<W: Write>(rows: &[VariantRow], w: W) -> Result<()> {
    let inner = || -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["variant".to_string(), "map".into(), "mar".into()];
        for c in AbnormalityClass::ALL {
            header.push(format!("ap {}", c.name()));
        }
        for c in AbnormalityClass::ALL {
            header.push(format!("ar {}", c.name()));
        }
        w.write_record(&header)?;
        for r in rows {
            let mut rec = vec![r.variant.clone(), r.map.to_string(), r.mar.to_string()];
            rec.extend(r.classes.iter().map(|c| c.ap.to_string()));
            rec.extend(r.classes.iter().map(|c| c.ar.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    };
    inner().map_err(|e| Error::csv("<table>", e))
}

/// Outputs of a train-then-evaluate run.
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub val_report: Option<EvalReport>,
    pub test_report: EvalReport,
    pub test_images: Vec<ImageResult>,
}

fn log_epoch(tag: &str) -> impl FnMut(&crate::training::EpochRecord) + '_ {
    move |r| {
        let val = r.val_map.map(|m| format!(" val mAP {m:.4}")).unwrap_or_default();
        eprintln!("[{tag}] epoch {:>3} steps {:>6} loss {:.4}{val}", r.epoch + 1, r.steps, r.total);
    }
}

/// Trains on the train split (minus the held-out validation share) and
/// evaluates the selected weights on `test`.
pub fn train_and_evaluate(train_split: Vec<Sample>, test: &[Sample], cfg: &TrainConfig, tag: &str) -> Result<RunResult> {
    let (tr, val) = hold_out(train_split, cfg.val_fraction);
    let outcome = train_observed(&tr, &val, cfg, log_epoch(tag))?;
    let val_report = if val.is_empty() {
        None
    } else {
        let images = predict(&outcome.model, &val, cfg.score_thresh)?;
        Some(evaluate(&images, cfg.score_thresh, cfg.iobb_thresh, &default_sweep())?)
    };
    let test_images = predict(&outcome.model, test, cfg.score_thresh)?;
    let test_report = evaluate(&test_images, cfg.score_thresh, cfg.iobb_thresh, &default_sweep())?;
    Ok(RunResult { outcome, val_report, test_report, test_images })
}

fn out_dir(g: &GlobalArgs) -> Result<&Path> {
    let out = g.out.as_deref().ok_or_else(|| Error::InvalidArgument("--out is required".into()))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_file(path: &Path, f: impl FnOnce(BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f(BufWriter::new(file))
}

/// Writes `<stem>.json`, `<stem>.csv`, `<stem>_pr.csv` and `<stem>_sweep.csv`.
pub fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    write_json(&dir.join(format!("{stem}.json")), report)?;
    with_file(&dir.join(format!("{stem}.csv")), |w| report.write_csv(w))?;
    with_file(&dir.join(format!("{stem}_pr.csv")), |w| report.write_pr_csv(w))?;
    with_file(&dir.join(format!("{stem}_sweep.csv")), |w| report.write_sweep_csv(w))
}

fn load_splits(data: &Path, image_size: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let ds = Dataset::open(data)?;
    let train = ds.samples(Split::Train)?;
    let test = ds.samples(Split::Test)?;
    if let Some(s) = train.iter().chain(&test).find(|s| s.image.shape()[2] != image_size || s.image.shape()[3] != image_size) {
        return Err(Error::Config(format!("{} is {:?}, model expects {image_size}x{image_size}", s.id, &s.image.shape()[2..])));
    }
    Ok((train, test))
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = RunConfig::resolve(g.config.as_deref(), g)?;
    match cli.command {
        Command::Generate { kappa, n_train, n_test } => {
            let mut synth = cfg.synth.clone();
            synth.kappa = kappa.unwrap_or(synth.kappa);
            synth.n_train = n_train.unwrap_or(synth.n_train);
            synth.n_test = n_test.unwrap_or(synth.n_test);
            let seed = g.seed.unwrap_or(cfg.train.seed);
            let out = out_dir(g)?;
            let joined = generate_dataset(out, &synth, seed)?;
            report_exclusions(&joined);
            println!("{} joined instances written to {}", joined.instances.len(), out.display());
        }
        Command::Join { data } => {
            let out = g.out.clone().unwrap_or_else(|| data.clone());
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let n = cmd_join(&data, &out)?;
            println!("{n} joined instances written to {}", out.join(MANIFEST_FILE).display());
        }
        Command::Train { data, epochs } => {
            let mut cfg = cfg;
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.validate()?;
            let out = out_dir(g)?;
            let (train, _) = load_splits(&data, cfg.train.model.image_size)?;
            let (tr, val) = hold_out(train, cfg.train.val_fraction);
            let outcome = train_observed(&tr, &val, &cfg.train, log_epoch(cfg.train.model.mode.name()))?;
            save_run(out, &cfg, &outcome)?;
            if !val.is_empty() {
                let images = predict(&outcome.model, &val, cfg.train.score_thresh)?;
                let mut report = evaluate(&images, cfg.train.score_thresh, cfg.train.iobb_thresh, &default_sweep())?;
                report.config = cfg.to_json()?;
                write_report(out, "val_report", &report)?;
                println!("validation mAP {:.4} mAR {:.4} (best epoch {})", report.map, report.mar, outcome.best_epoch + 1);
            }
        }
        Command::Evaluate { data, checkpoint, predictions } => {
            let out = out_dir(g)?;
            let (images, config) = match (checkpoint, predictions) {
                (Some(ck), _) => {
                    let ck = Checkpoint::load(&ck)?;
                    let model = model_for_eval(&ck, g, &cfg)?;
                    let (_, test) = load_splits(&data, model.cfg.image_size)?;
                    let images = predict(&model, &test, cfg.train.score_thresh)?;
                    write_predictions(&out.join(PREDICTIONS_FILE), &test, &images)?;
                    let mut echo = cfg.clone();
                    echo.train.model = model.cfg.clone();
                    (images, echo.to_json()?)
                }
                (None, Some(p)) => {
                    let ds = Dataset::open(&data)?;
                    let preds = read_predictions(&p)?;
                    (images_from_predictions(&ds, preds)?, cfg.to_json()?)
                }
                (None, None) => return Err(Error::InvalidArgument("need --checkpoint or --predictions".into())),
            };
            let mut report = evaluate(&images, cfg.train.score_thresh, cfg.train.iobb_thresh, &default_sweep())?;
            report.config = config;
            write_report(out, "report", &report)?;
            println!("mAP {:.4} mAR {:.4} over {} images", report.map, report.mar, images.len());
        }
        Command::AblateFusion { data, epochs, methods } => {
            let methods = methods.split(',').map(str::parse).collect::<Result<Vec<FusionMethod>>>()?;
            let variants = methods
                .into_iter()
                .map(|m| {
                    let mut t = cfg.train.clone();
                    t.model.fusion = m;
                    (m.name().to_string(), t)
                })
                .collect();
            ablate(g, &cfg, data, epochs, variants)?;
        }
        Command::AblateFeatures { data, epochs, subsets } => {
            if cfg.train.model.mode == Mode::Baseline {
                return Err(Error::Config("feature ablation needs a mode that reads clinical data".into()));
            }
            let mut variants = Vec::new();
            for s in subsets.split(';').filter(|s| !s.trim().is_empty()) {
                let mut t = cfg.train.clone();
                t.model.features = FeatureSet::parse(s)?;
                variants.push((t.model.features.label(), t));
            }
            ablate(g, &cfg, data, epochs, variants)?;
        }
        Command::Report { inputs } => {
            let rows = inputs.iter().map(|p| read_rows(p)).collect::<Result<Vec<_>>>()?.concat();
            let mut stdout = std::io::stdout().lock();
            print_markdown(&rows, &mut stdout).map_err(|e| Error::io("<stdout>", e))?;
            if let Some(out) = &g.out {
                fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                with_file(&out.join("summary.csv"), |w| write_rows_csv(&rows, w))?;
                let mut md = Vec::new();
                print_markdown(&rows, &mut md).map_err(|e| Error::io("<buffer>", e))?;
                fs::write(out.join("summary.md"), md).map_err(|e| Error::io(out, e))?;
            }
        }
    }
    Ok(())
}

fn cmd_join(data: &Path, out: &Path) -> Result<usize> {
    let tables = SourceTables::read_dir(&data.join("tables"))?;
    for v in validate_schema(&tables) {
        eprintln!("{v}");
    }
    let joined = join_dir(data, out)?;
    report_exclusions(&joined);
    Ok(joined.instances.len())
}

fn report_exclusions(joined: &JoinOutput) {
    for (reason, n) in joined.reason_counts() {
        eprintln!("excluded {n:>5}  {reason}");
    }
}

fn save_run(out: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    let mut meta = serde_json::Map::new();
    meta.insert("train".into(), serde_json::to_value(&cfg.train)?);
    meta.insert("best_epoch".into(), outcome.best_epoch.into());
    outcome.model.to_checkpoint(meta)?.save(&out.join(CHECKPOINT_FILE))?;
    outcome.write_history_csv(&out.join(EPOCHS_FILE))?;
    let toml = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out.join("config.toml"), toml).map_err(|e| Error::io(out, e))
}

/// The checkpoint's own configuration, unless `--config` or a model flag
/// asks for something else; then the weights must fit that instead.
fn model_for_eval(ck: &Checkpoint, g: &GlobalArgs, cfg: &RunConfig) -> Result<Model> {
    let recorded = Model::from_checkpoint(ck)?;
    if g.config.is_none() && g.mode.is_none() && g.fusion.is_none() && g.features.is_none() {
        return Ok(recorded);
    }
    let mut want: ModelConfig = if g.config.is_some() { cfg.train.model.clone() } else { recorded.cfg.clone() };
    if let Some(m) = g.mode {
        want.mode = m;
    }
    if let Some(f) = g.fusion {
        want.fusion = f;
    }
    if let Some(f) = &g.features {
        want.features = FeatureSet::parse(f)?;
    }
    if want != recorded.cfg {
        let a = serde_json::to_value(&want)?;
        let b = serde_json::to_value(&recorded.cfg)?;
        let diff: Vec<String> = a
            .as_object()
            .into_iter()
            .flatten()
            .filter(|(k, v)| b.get(k.as_str()) != Some(*v))
            .map(|(k, _)| k.clone())
            .collect();
        return Err(Error::CheckpointMismatch(format!("configuration differs in {}", diff.join(", "))));
    }
    Model::from_checkpoint_with(ck, want)
}

fn images_from_predictions(ds: &Dataset, preds: Vec<PredictionRecord>) -> Result<Vec<ImageResult>> {
    let test = ds.instances(Split::Test);
    let mut by_id: std::collections::HashMap<String, Vec<Detection>> = std::collections::HashMap::new();
    for p in preds {
        if !test.iter().any(|i| i.keys.dicom_id == p.dicom_id) {
            return Err(Error::InvalidArgument(format!("prediction for `{}`, which is not in the test split", p.dicom_id)));
        }
        by_id.entry(p.dicom_id).or_default().extend(p.detections);
    }
    Ok(test
        .into_iter()
        .map(|i| ImageResult { preds: by_id.remove(&i.keys.dicom_id).unwrap_or_default(), gts: i.boxes.clone() })
        .collect())
}

fn ablate(g: &GlobalArgs, cfg: &RunConfig, data: PathBuf, epochs: Option<usize>, variants: Vec<(String, TrainConfig)>) -> Result<()> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument("no variants requested".into()));
    }
    let out = out_dir(g)?;
    let (train, test) = load_splits(&data, cfg.train.model.image_size)?;
    let mut rows = Vec::new();
    let mut configs = Vec::new();
    for (name, mut t) in variants {
        t.epochs = epochs.unwrap_or(t.epochs);
        t.validate()?;
        let run = train_and_evaluate(train.clone(), &test, &t, &name)?;
        let variant_cfg = RunConfig { synth: cfg.synth.clone(), train: t };
        let dir = out.join(sanitize(&name));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_run(&dir, &variant_cfg, &run.outcome)?;
        let mut report = run.test_report;
        report.config = variant_cfg.to_json()?;
        write_report(&dir, "report", &report)?;
        println!("{name}: mAP {:.4} mAR {:.4}", report.map, report.mar);
        rows.push(VariantRow::from_report(&name, &report));
        configs.push(report.config);
    }
    let table = AblationTable { rows, config: serde_json::Value::Array(configs) };
    write_json(&out.join("ablation.json"), &table)?;
    with_file(&out.join("ablation.csv"), |w| table.write_csv(w))
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Rows from an ablation table, or a single row from an evaluation report.
fn read_rows(path: &Path) -> Result<Vec<VariantRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(t) = serde_json::from_str::<AblationTable>(&text) {
        return Ok(t.rows);
    }
    let r: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let name = r
        .config
        .pointer("/train/model/mode")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .unwrap_or_else(|| path.display().to_string());
    Ok(vec![VariantRow::from_report(&name, &r)])
}

fn print_markdown(rows: &[VariantRow], w: &mut impl Write) -> std::io::Result<()> {
    write!(w, "| variant | mAP | mAR |")?;
    for c in AbnormalityClass::ALL {
        write!(w, " AP {} |", c.name())?;
    }
    writeln!(w)?;
    writeln!(w, "|{}", "---|".repeat(3 + AbnormalityClass::COUNT))?;
    for r in rows {
        write!(w, "| {} | {:.4} | {:.4} |", r.variant, r.map, r.mar)?;
        for c in &r.classes {
            write!(w, " {:.4} |", c.ap)?;
        }
        writeln!(w)?;
    }
    Ok(())
}
