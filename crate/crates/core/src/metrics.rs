//! IoBB matching, per-class confusion counts, AP/AR and threshold sweeps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detection::{AbnormalityClass, BBox, Detection, GroundTruthBox};
use crate::error::{Error, Result};

pub const DEFAULT_SCORE_THRESH: f64 = 0.05;
pub const DEFAULT_IOBB_THRESH: f64 = 0.5;

/// `area(pred ∩ gt) / area(pred)`. Not symmetric.
pub fn iobb(pred: &BBox, gt: &BBox) -> Result<f64> {
    pred.iobb(gt)
}

/// IoBB thresholds 0.1, 0.2, …, 0.9.
pub fn default_sweep() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    fn merge(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Outcome of matching one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub counts: [Counts; AbnormalityClass::COUNT],
    /// Per prediction: `None` below the score threshold, else whether it is a TP.
    pub pred_tp: Vec<Option<bool>>,
    /// Per ground truth: index of the matched prediction.
    pub gt_match: Vec<Option<usize>>,
}

fn check_thresh(name: &str, t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {t}")))
    }
}

/// Descending score, ties by input index.
fn score_rank(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

fn overlaps(pred: &BBox, gt: &BBox, thresh: f64) -> bool {
    pred.area() > 0.0 && pred.iobb(gt).is_ok_and(|v| v >= thresh)
}

fn augment(p: usize, edges: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &j in &edges[p] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        if owner[j].is_none_or(|q| augment(q, edges, owner, seen)) {
            owner[j] = Some(p);
            return true;
        }
    }
    false
}

/// Matches predictions to same-class ground truths with IoBB ≥ `iobb_thresh`,
/// each ground truth used at most once. Predictions are taken in descending
/// score and a prediction is kept matched once matched; a new prediction may
/// re-route earlier matches (augmenting path) to find a free ground truth.
/// The matched set is therefore as large as any assignment allows and, among
/// such sets, prefers higher scores.
pub fn match_detections(preds: &[Detection], gts: &[GroundTruthBox], score_thresh: f64, iobb_thresh: f64) -> Result<MatchResult> {
    check_thresh("score_thresh", score_thresh)?;
    check_thresh("iobb_thresh", iobb_thresh)?;
    let edges: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            let mut e: Vec<usize> =
                (0..gts.len()).filter(|&j| gts[j].class == p.class && overlaps(&p.bbox, &gts[j].bbox, iobb_thresh)).collect();
            e.sort_by(|&a, &b| {
                let va = p.bbox.iobb(&gts[a].bbox).unwrap_or(0.0);
                let vb = p.bbox.iobb(&gts[b].bbox).unwrap_or(0.0);
                vb.total_cmp(&va).then(a.cmp(&b))
            });
            e
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; gts.len()];
    let mut pred_tp = vec![None; preds.len()];
    for p in score_rank(preds) {
        if preds[p].score < score_thresh {
            continue;
        }
        let mut seen = vec![false; gts.len()];
        pred_tp[p] = Some(augment(p, &edges, &mut owner, &mut seen));
    }
    let mut counts = [Counts::default(); AbnormalityClass::COUNT];
    for (p, flag) in pred_tp.iter().enumerate() {
        match flag {
            Some(true) => counts[preds[p].class.index()].tp += 1,
            Some(false) => counts[preds[p].class.index()].fp += 1,
            None => {}
        }
    }
    for (j, o) in owner.iter().enumerate() {
        if o.is_none() {
            counts[gts[j].class.index()].fn_ += 1;
        }
    }
    Ok(MatchResult { counts, pred_tp, gt_match: owner })
}

/// One image's predictions and ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub preds: Vec<Detection>,
    pub gts: Vec<GroundTruthBox>,
}

/// `(recall, precision)` after each distinct score cut, deepest cut last.
pub fn pr_curve(images: &[ImageResult], class: AbnormalityClass, score_thresh: f64, iobb_thresh: f64) -> Result<Vec<(f64, f64)>> {
    let mut flags: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0;
    for im in images {
        let preds: Vec<Detection> = im.preds.iter().filter(|d| d.class == class).copied().collect();
        let gts: Vec<GroundTruthBox> = im.gts.iter().filter(|g| g.class == class).copied().collect();
        n_gt += gts.len();
        let m = match_detections(&preds, &gts, score_thresh, iobb_thresh)?;
        flags.extend(preds.iter().zip(&m.pred_tp).filter_map(|(d, f)| f.map(|tp| (d.score, tp))));
    }
    flags.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut n) = (0usize, 0usize);
    let mut i = 0;
    while i < flags.len() {
        let s = flags[i].0;
        while i < flags.len() && flags[i].0 == s {
            tp += usize::from(flags[i].1);
            n += 1;
            i += 1;
        }
        let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
        curve.push((recall, tp as f64 / n as f64));
    }
    Ok(curve)
}

/// All-point interpolated area: Σ (r_i − r_{i−1}) · max_{j ≥ i} p_j.
pub fn area_under(curve: &[(f64, f64)]) -> f64 {
    let mut env = vec![0.0; curve.len()];
    let mut best: f64 = 0.0;
    for i in (0..curve.len()).rev() {
        best = best.max(curve[i].1);
        env[i] = best;
    }
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        ap += (r - prev).max(0.0) * env[i];
        prev = prev.max(r);
    }
    ap
}

pub fn average_precision(images: &[ImageResult], class: AbnormalityClass, score_thresh: f64, iobb_thresh: f64) -> Result<f64> {
    Ok(area_under(&pr_curve(images, class, score_thresh, iobb_thresh)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: AbnormalityClass,
    pub gt: usize,
    #[serde(flatten)]
    pub counts: Counts,
    pub ap: f64,
    pub ar: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub iobb_thresh: f64,
    pub map: f64,
    pub mar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class: AbnormalityClass,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub score_thresh: f64,
    pub iobb_thresh: f64,
    pub classes: Vec<ClassReport>,
    /// Means over classes that have ground truth.
    pub map: f64,
    pub mar: f64,
    pub pr_curves: Vec<PrCurve>,
    pub sweep: Vec<SweepRow>,
    /// Resolved run configuration, echoed by the commands that produce reports.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

fn class_reports(images: &[ImageResult], score_thresh: f64, iobb_thresh: f64) -> Result<(Vec<ClassReport>, Vec<PrCurve>)> {
    let mut counts = [Counts::default(); AbnormalityClass::COUNT];
    for im in images {
        let m = match_detections(&im.preds, &im.gts, score_thresh, iobb_thresh)?;
        for (c, k) in counts.iter_mut().zip(&m.counts) {
            c.merge(k);
        }
    }
    let mut reports = Vec::new();
    let mut curves = Vec::new();
    for class in AbnormalityClass::ALL {
        let c = counts[class.index()];
        let gt = c.tp + c.fn_;
        let points = pr_curve(images, class, score_thresh, iobb_thresh)?;
        let ap = area_under(&points);
        let ar = if gt == 0 { 0.0 } else { c.tp as f64 / gt as f64 };
        reports.push(ClassReport { class, gt, counts: c, ap, ar });
        curves.push(PrCurve { class, points });
    }
    Ok((reports, curves))
}

fn means(reports: &[ClassReport]) -> (f64, f64) {
    let with_gt: Vec<&ClassReport> = reports.iter().filter(|r| r.gt > 0).collect();
    if with_gt.is_empty() {
        return (0.0, 0.0);
    }
    let n = with_gt.len() as f64;
    (with_gt.iter().map(|r| r.ap).sum::<f64>() / n, with_gt.iter().map(|r| r.ar).sum::<f64>() / n)
}

/// One `(threshold, mAP, mAR)` row per IoBB threshold.
pub fn sweep_iobb(images: &[ImageResult], score_thresh: f64, thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("sweep thresholds must be sorted ascending".into()));
    }
    thresholds
        .iter()
        .map(|&t| {
            let (reports, _) = class_reports(images, score_thresh, t)?;
            let (map, mar) = means(&reports);
            Ok(SweepRow { iobb_thresh: t, map, mar })
        })
        .collect()
}

pub fn evaluate(images: &[ImageResult], score_thresh: f64, iobb_thresh: f64, sweep: &[f64]) -> Result<EvalReport> {
    let (classes, pr_curves) = class_reports(images, score_thresh, iobb_thresh)?;
    let (map, mar) = means(&classes);
    Ok(EvalReport {
        score_thresh,
        iobb_thresh,
        classes,
        map,
        mar,
        pr_curves,
        sweep: sweep_iobb(images, score_thresh, sweep)?,
        config: serde_json::Value::Null,
    })
}

impl EvalReport {
    pub fn class(&self, class: AbnormalityClass) -> &ClassReport {
        &self.classes[class.index()]
    }

    /// Mean AP over the given classes.
    pub fn mean_ap(&self, classes: &[AbnormalityClass]) -> f64 {
        if classes.is_empty() {
            return 0.0;
        }
        classes.iter().map(|c| self.class(*c).ap).sum::<f64>() / classes.len() as f64
    }

    /// Per-class table: `class,gt,tp,fp,fn,ap,ar`, then a `mean` row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.write_csv_inner(w).map_err(|e| Error::csv("report", e))
    }

    fn write_csv_inner<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["class", "gt", "tp", "fp", "fn", "ap", "ar"])?;
        for r in &self.classes {
            out.write_record([
                r.class.name().to_string(),
                r.gt.to_string(),
                r.counts.tp.to_string(),
                r.counts.fp.to_string(),
                r.counts.fn_.to_string(),
                format!("{:.6}", r.ap),
                format!("{:.6}", r.ar),
            ])?;
        }
        out.write_record(["mean", "", "", "", "", &format!("{:.6}", self.map), &format!("{:.6}", self.mar)])?;
        out.flush()?;
        Ok(())
    }

    /// `class,recall,precision` rows.
    pub fn write_pr_csv<W: Write>(&self, w: W) -> Result<()> {
        self.write_pr_csv_inner(w).map_err(|e| Error::csv("pr curves", e))
    }

    fn write_pr_csv_inner<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["class", "recall", "precision"])?;
        for c in &self.pr_curves {
            for (r, p) in &c.points {
                out.write_record([c.class.name().to_string(), format!("{r:.6}"), format!("{p:.6}")])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// `iobb_thresh,map,mar` rows.
    pub fn write_sweep_csv<W: Write>(&self, w: W) -> Result<()> {
        self.write_sweep_csv_inner(w).map_err(|e| Error::csv("sweep", e))
    }

    fn write_sweep_csv_inner<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iobb_thresh", "map", "mar"])?;
        for r in &self.sweep {
            out.write_record([format!("{:.2}", r.iobb_thresh), format!("{:.6}", r.map), format!("{:.6}", r.mar)])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: AbnormalityClass, score: f64, b: BBox) -> Detection {
        Detection { class, score, bbox: b }
    }

    #[test]
    fn score_cut_drops_low_predictions() {
        let g = [GroundTruthBox { class: AbnormalityClass::Atelectasis, bbox: BBox::new(0.0, 0.0, 4.0, 4.0) }];
        let p = [det(AbnormalityClass::Atelectasis, 0.01, BBox::new(0.0, 0.0, 4.0, 4.0))];
        let m = match_detections(&p, &g, 0.05, 0.5).unwrap();
        assert_eq!(m.pred_tp, vec![None]);
        assert_eq!(m.counts[1], Counts { tp: 0, fp: 0, fn_: 1 });
    }

    #[test]
    fn later_prediction_reroutes_an_earlier_match() {
        // p0 overlaps both GTs, p1 only the first; greedy would strand p1.
        let a = AbnormalityClass::Atelectasis;
        let g = [
            GroundTruthBox { class: a, bbox: BBox::new(0.0, 0.0, 10.0, 10.0) },
            GroundTruthBox { class: a, bbox: BBox::new(0.0, 0.0, 20.0, 20.0) },
        ];
        let p = [det(a, 0.9, BBox::new(1.0, 1.0, 8.0, 8.0)), det(a, 0.8, BBox::new(12.0, 12.0, 8.0, 8.0))];
        let m = match_detections(&p, &g, 0.0, 0.5).unwrap();
        assert_eq!(m.counts[a.index()].tp, 2);
    }

    #[test]
    fn envelope_uses_later_higher_precision() {
        let ap = area_under(&[(0.5, 0.5), (1.0, 1.0)]);
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unsorted_sweep_is_rejected() {
        assert!(sweep_iobb(&[], 0.05, &[0.5, 0.1]).is_err());
    }
}
