use rand::Rng;
use rand::seq::SliceRandom;

use super::boxes::{AbnormalityClass, BBox, GroundTruthBox, encode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RoiTarget {
    Foreground { class: AbnormalityClass, gt: usize, deltas: [f64; 4] },
    Background,
    /// Overlap between the two thresholds; excluded from the losses.
    Ignore,
}

/// Index and IoU of the best-overlapping ground truth (lowest index on ties).
fn best_gt(b: &BBox, gts: &[GroundTruthBox]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, gt) in gts.iter().enumerate() {
        let iou = b.iou(&gt.bbox);
        if best.is_none_or(|(_, v)| iou > v) {
            best = Some((j, iou));
        }
    }
    best
}

/// IoU ≥ `fg_thresh` → foreground (closed bound), IoU < `bg_thresh` →
/// background, otherwise ignored.
pub fn assign_targets(proposals: &[BBox], gts: &[GroundTruthBox], fg_thresh: f64, bg_thresh: f64) -> Result<Vec<RoiTarget>> {
    if fg_thresh < bg_thresh {
        return Err(Error::InvalidArgument(format!("fg_thresh {fg_thresh} below bg_thresh {bg_thresh}")));
    }
    Ok(proposals
        .iter()
        .map(|p| match best_gt(p, gts) {
            Some((j, iou)) if iou >= fg_thresh => {
                RoiTarget::Foreground { class: gts[j].class, gt: j, deltas: encode(&gts[j].bbox, p) }
            }
            Some((_, iou)) if iou >= bg_thresh => RoiTarget::Ignore,
            _ => RoiTarget::Background,
        })
        .collect())
}

/// Binary `size × size` mask over `roi`: a cell is on when its center lies
/// inside the ground-truth box.
pub fn mask_target(roi: &BBox, gt: &BBox, size: usize) -> Vec<f64> {
    let mut m = Vec::with_capacity(size * size);
    for i in 0..size {
        let cy = roi.y + (i as f64 + 0.5) * roi.h / size as f64;
        for j in 0..size {
            let cx = roi.x + (j as f64 + 0.5) * roi.w / size as f64;
            let inside = cx >= gt.x && cx < gt.x2() && cy >= gt.y && cy < gt.y2();
            m.push(if inside { 1.0 } else { 0.0 });
        }
    }
    m
}

/// Per-anchor RPN label: 1 positive, 0 negative, -1 ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLabels {
    pub labels: Vec<i8>,
    pub matched: Vec<Option<usize>>,
}

/// IoU ≥ `pos` or best anchor for some ground truth → positive;
/// max IoU < `neg` → negative.
pub fn label_anchors(anchors: &[BBox], gts: &[GroundTruthBox], pos: f64, neg: f64) -> AnchorLabels {
    let mut labels = vec![-1i8; anchors.len()];
    let mut matched = vec![None; anchors.len()];
    for (a, b) in anchors.iter().enumerate() {
        match best_gt(b, gts) {
            Some((j, iou)) => {
                matched[a] = Some(j);
                if iou >= pos {
                    labels[a] = 1;
                } else if iou < neg {
                    labels[a] = 0;
                }
            }
            None => labels[a] = 0,
        }
    }
    for (j, gt) in gts.iter().enumerate() {
        let best = anchors.iter().map(|b| b.iou(&gt.bbox)).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (a, b) in anchors.iter().enumerate() {
            if b.iou(&gt.bbox) == best {
                labels[a] = 1;
                matched[a] = Some(j);
            }
        }
    }
    AnchorLabels { labels, matched }
}

/// Draws up to `batch` items, at most `batch · pos_fraction` from
/// `positives`, the rest from `negatives`. Results are sorted.
pub fn sample_balanced<R: Rng>(
    positives: &[usize],
    negatives: &[usize],
    batch: usize,
    pos_fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let max_pos = ((batch as f64) * pos_fraction).floor() as usize;
    let mut p = positives.to_vec();
    p.shuffle(rng);
    p.truncate(max_pos);
    let mut n = negatives.to_vec();
    n.shuffle(rng);
    n.truncate(batch - p.len());
    p.sort_unstable();
    n.sort_unstable();
    (p, n)
}
