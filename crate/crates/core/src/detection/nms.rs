use std::cmp::Ordering;

use super::boxes::{BBox, Proposal};

/// Indices sorted by descending score, ties broken by lower index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Greedy suppression; returns kept indices in score order. A box is
/// dropped when its IoU with an already kept box exceeds `thresh`.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if kept.iter().all(|&k| boxes[k].iou(&boxes[i]) <= thresh) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(props: &[Proposal], thresh: f64) -> Vec<Proposal> {
    let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = props.iter().map(|p| p.score).collect();
    nms_indices(&boxes, &scores, thresh).into_iter().map(|i| props[i]).collect()
}
