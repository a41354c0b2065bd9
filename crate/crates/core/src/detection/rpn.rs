use serde::{Deserialize, Serialize};

use super::anchors::AnchorGrid;
use super::boxes::{Proposal, decode_boxes};
use super::nms::{nms_indices, score_order};
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Graph, Init, ParamStore, Var, sigmoid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpnConfig {
    pub hidden: usize,
    pub pre_nms: usize,
    pub post_nms: usize,
    pub nms_thresh: f64,
    /// Proposals narrower or shorter than this (pixels) are dropped.
    pub min_size: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Anchors sampled per image for the objectness loss.
    pub batch: usize,
    pub pos_fraction: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            hidden: 32,
            pre_nms: 200,
            post_nms: 50,
            nms_thresh: 0.7,
            min_size: 1.0,
            pos_iou: 0.7,
            neg_iou: 0.3,
            batch: 64,
            pos_fraction: 0.5,
        }
    }
}

pub fn register_rpn(store: &mut ParamStore, channels: usize, cfg: &RpnConfig, per_cell: usize) -> Result<()> {
    nn::register_conv(store, "rpn.conv", channels, cfg.hidden, 3)?;
    store.register("rpn.obj.w", &[per_cell, cfg.hidden, 1, 1], Init::Normal(0.01))?;
    store.register("rpn.obj.b", &[per_cell], Init::Zeros)?;
    store.register("rpn.box.w", &[4 * per_cell, cfg.hidden, 1, 1], Init::Normal(0.01))?;
    store.register("rpn.box.b", &[4 * per_cell], Init::Zeros)
}

/// RPN outputs re-ordered to anchor order: `obj: [A]` logits and
/// `deltas: [4A]`.
#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    pub obj: Var,
    pub deltas: Var,
}

pub fn rpn_head(g: &mut Graph, store: &ParamStore, fused: Var, anchors: &AnchorGrid) -> Result<RpnOutput> {
    let (b, _, h, w) = g.value(fused).dims4()?;
    if b != 1 || h != anchors.h || w != anchors.w {
        return Err(Error::shape("rpn_forward", format!("anchors built for {}x{}, map is {h}x{w}", anchors.h, anchors.w)));
    }
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("empty anchor grid".into()));
    }
    let x = nn::conv(g, store, "rpn.conv", fused, 1, 1)?;
    let x = g.relu(x)?;
    let obj = nn::conv(g, store, "rpn.obj", x, 1, 0)?;
    let deltas = nn::conv(g, store, "rpn.box", x, 1, 0)?;
    let obj_idx: Vec<usize> = (0..anchors.len()).map(|a| anchors.map_index(a)).collect();
    let delta_idx: Vec<usize> =
        (0..anchors.len()).flat_map(|a| (0..4).map(move |j| (a, j))).map(|(a, j)| anchors.delta_index(a, j)).collect();
    Ok(RpnOutput { obj: g.gather(obj, &obj_idx)?, deltas: g.gather(deltas, &delta_idx)? })
}

/// Decodes every anchor, keeps the `pre_nms` best valid boxes, suppresses
/// overlaps and returns at most `post_nms` proposals by descending score.
pub fn generate_proposals(
    obj_logits: &[f64],
    deltas: &[f64],
    anchors: &AnchorGrid,
    cfg: &RpnConfig,
    img_w: f64,
    img_h: f64,
) -> Result<Vec<Proposal>> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("empty anchor grid".into()));
    }
    if obj_logits.len() != anchors.len() || deltas.len() != 4 * anchors.len() {
        return Err(Error::shape("generate_proposals", "outputs do not match anchor count"));
    }
    let scores: Vec<f64> = obj_logits.iter().map(|&l| sigmoid(l)).collect();
    let mut boxes = Vec::new();
    let mut kept_scores = Vec::new();
    for a in score_order(&scores) {
        if boxes.len() == cfg.pre_nms {
            break;
        }
        let d = [deltas[4 * a], deltas[4 * a + 1], deltas[4 * a + 2], deltas[4 * a + 3]];
        let b = decode_boxes(&anchors.boxes[a], d, img_w, img_h)?;
        if b.w >= cfg.min_size && b.h >= cfg.min_size {
            boxes.push(b);
            kept_scores.push(scores[a]);
        }
    }
    let keep = nms_indices(&boxes, &kept_scores, cfg.nms_thresh);
    Ok(keep.into_iter().take(cfg.post_nms).map(|i| Proposal { bbox: boxes[i], score: kept_scores[i] }).collect())
}

/// Head forward plus proposal generation from the current values.
pub fn rpn_forward(
    g: &mut Graph,
    store: &ParamStore,
    fused: Var,
    anchors: &AnchorGrid,
    cfg: &RpnConfig,
    img_w: f64,
    img_h: f64,
) -> Result<(RpnOutput, Vec<Proposal>)> {
    let out = rpn_head(g, store, fused, anchors)?;
    let props = generate_proposals(g.value(out.obj).data(), g.value(out.deltas).data(), anchors, cfg, img_w, img_h)?;
    Ok((out, props))
}

