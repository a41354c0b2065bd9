use std::path::Path;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::loss::{LossTerms, UW_PARAM, UncertaintyWeights};
use crate::clinical::{NormalizationStats, fit_normalization};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, ImageResult, default_sweep, evaluate};
use crate::model::{ClinicalInput, Model};
use crate::optim::{GradBuffer, Sgd};
use crate::tensor::{Gradients, Graph, ParamStore, name_seed};

/// Per-epoch summary; loss terms are means over the epoch's images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: usize,
    pub lr: f64,
    pub total: f64,
    pub terms: LossTerms,
    pub alpha: [f64; 5],
    /// Images whose sampling plan had no RoIs.
    pub no_roi_images: usize,
    pub val_map: Option<f64>,
    pub val_mar: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation mAP (the last epoch
    /// when there is no validation set).
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        write_history_csv(path, &self.history)
    }
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let inner = || -> csv::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["epoch".to_string(), "steps".into(), "lr".into(), "total".into()];
        header.extend(LossTerms::NAMES.iter().map(|n| n.to_string()));
        header.extend(LossTerms::NAMES.iter().map(|n| format!("alpha_{n}")));
        header.extend(["no_roi_images".into(), "val_map".into(), "val_mar".into()]);
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in history {
            let mut row = vec![r.epoch.to_string(), r.steps.to_string(), r.lr.to_string(), r.total.to_string()];
            row.extend(r.terms.to_array().iter().map(f64::to_string));
            row.extend(r.alpha.iter().map(f64::to_string));
            row.extend([r.no_roi_images.to_string(), opt(r.val_map), opt(r.val_mar)]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    };
    inner().map_err(|e| Error::csv(path, e))
}

/// Statistics for the clinical encoder, fitted on `train` only.
pub fn fit_stats(train: &[Sample]) -> Result<NormalizationStats> {
    let recs: Vec<_> = train.iter().map(|s| s.clinical.clone()).collect();
    fit_normalization(&recs)
}

/// Detections for every sample, in sample order.
pub fn predict(model: &Model, samples: &[Sample], score_thresh: f64) -> Result<Vec<ImageResult>> {
    samples
        .iter()
        .map(|s| {
            let preds = model.detect(&model.params, &s.image, &ClinicalInput::new(Some(&s.clinical)), score_thresh)?;
            Ok(ImageResult { preds, gts: s.gts.clone() })
        })
        .collect()
}

pub fn evaluate_model(model: &Model, samples: &[Sample], score_thresh: f64, iobb_thresh: f64) -> Result<EvalReport> {
    let images = predict(model, samples, score_thresh)?;
    evaluate(&images, score_thresh, iobb_thresh, &default_sweep())
}

pub fn train(train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(train_set, val_set, cfg, |_| {})
}

/// Mini-batch SGD over `train_set`; `observe` sees each finished epoch.
pub fn train_observed(
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let stats = if cfg.model.mode.uses_clinical() { Some(fit_stats(train_set)?) } else { None };
    let mut model = Model::new(cfg.model.clone(), stats, cfg.seed)?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, "order"));
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut steps = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        sgd.lr = cfg.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let mut per_image: Vec<Option<([f64; 5], f64, bool)>> = vec![None; train_set.len()];
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = GradBuffer::new();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let key = if cfg.resample { format!("plan/{epoch}/{i}") } else { format!("plan/{i}") };
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, &key));
                let (terms, total, empty, g) = image_step(&model, &train_set[i], &mut rng).map_err(|e| match e {
                    Error::Numeric { op } => Error::Diverged { step: steps, what: format!("`{op}` output") },
                    e => e,
                })?;
                let g = g.ok_or(Error::Diverged { step: steps, what: "loss".into() })?;
                grads.add(&g, scale);
                per_image[i] = Some((terms, total, empty));
            }
            if !grads.all_finite() {
                return Err(Error::Diverged { step: steps, what: "gradient".into() });
            }
            if let Some(c) = cfg.clip_norm {
                grads.clip_norm(c);
            }
            sgd.step(&mut model.params, &grads)?;
            if let Some(floor) = cfg.log_var_floor {
                model.params.get_mut(UW_PARAM)?.data_mut().iter_mut().for_each(|s| *s = s.max(floor));
            }
            if !model.params.iter().all(|(_, t)| t.all_finite()) {
                return Err(Error::Diverged { step: steps, what: "parameters".into() });
            }
            steps += 1;
        }

        let n = train_set.len() as f64;
        let mut sums = [0.0; 5];
        let mut total = 0.0;
        let mut no_roi_images = 0;
        for (terms, t, empty) in per_image.into_iter().flatten() {
            for (s, v) in sums.iter_mut().zip(terms) {
                *s += v;
            }
            total += t;
            no_roi_images += usize::from(empty);
        }
        let (val_map, val_mar) = if val_set.is_empty() {
            (None, None)
        } else {
            let r = evaluate_model(&model, val_set, cfg.score_thresh, cfg.iobb_thresh)?;
            (Some(r.map), Some(r.mar))
        };
        let record = EpochRecord {
            epoch,
            steps,
            lr: sgd.lr,
            total: total / n,
            terms: LossTerms::from_array(sums.map(|s| s / n)),
            alpha: UncertaintyWeights::from_store(&model.params)?.alpha(),
            no_roi_images,
            val_map,
            val_mar,
        };
        observe(&record);
        history.push(record);

        let score = val_map.unwrap_or(f64::NEG_INFINITY);
        match &best {
            Some((b, _, _)) if val_map.is_some() && score <= *b => {}
            _ => best = Some((score, epoch, model.params.clone())),
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if val_map.is_some() && epoch - best_epoch >= cfg.patience {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome { model, best_epoch, history, stopped_early })
}

/// Forward and backward pass for one image; no gradients when the loss is
/// not finite.
fn image_step(model: &Model, s: &Sample, rng: &mut ChaCha8Rng) -> Result<([f64; 5], f64, bool, Option<Gradients>)> {
    let mut g = Graph::new();
    let input = ClinicalInput::new(Some(&s.clinical));
    let trunk = model.trunk(&mut g, &model.params, &s.image, &input)?;
    let plan = model.plan(&g, &trunk, &s.gts, rng)?;
    let (vars, total) = model.losses_on_trunk(&mut g, &model.params, &trunk, &plan)?;
    let terms = vars.values(&g).to_array();
    let t = g.value(total).item();
    if !t.is_finite() {
        return Ok((terms, t, vars.no_rois, None));
    }
    let grads = g.backward(total)?;
    Ok((terms, t, vars.no_rois, Some(grads)))
}
