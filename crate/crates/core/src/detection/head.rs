use serde::{Deserialize, Serialize};

use super::boxes::{AbnormalityClass, BBox};
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::kernels::CellRect;
use crate::tensor::{Graph, Init, ParamStore, Var};

pub const NUM_CLASSES: usize = AbnormalityClass::COUNT + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// RoIPool output side.
    pub pool: usize,
    pub hidden: usize,
    pub mask_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { pool: 7, hidden: 64, mask_channels: 8 }
    }
}

impl HeadConfig {
    pub fn mask_size(&self) -> usize {
        2 * self.pool
    }

    pub fn classifier_input(&self, channels: usize, clinical_len: Option<usize>) -> usize {
        channels * self.pool * self.pool + clinical_len.unwrap_or(0)
    }
}

/// `clinical_len` is the 1-D fusion width, `None` when the head is image-only.
pub fn register_head(store: &mut ParamStore, channels: usize, clinical_len: Option<usize>, cfg: &HeadConfig) -> Result<()> {
    let din = cfg.classifier_input(channels, clinical_len);
    nn::register_linear(store, "head.fc", din, cfg.hidden)?;
    store.register("head.cls.w", &[NUM_CLASSES, cfg.hidden], Init::Normal(0.01))?;
    store.register("head.cls.b", &[NUM_CLASSES], Init::Zeros)?;
    store.register("head.box.w", &[4 * AbnormalityClass::COUNT, cfg.hidden], Init::Normal(0.001))?;
    store.register("head.box.b", &[4 * AbnormalityClass::COUNT], Init::Zeros)?;
    nn::register_conv(store, "mask.conv", channels, cfg.mask_channels, 3)?;
    nn::register_deconv(store, "mask.up", cfg.mask_channels, AbnormalityClass::COUNT, 2)
}

/// Feature-map cells covered by `b`: `[floor(x1/s), ceil(x2/s))`, clamped to
/// the map and never smaller than one cell.
pub fn roi_rect(b: &BBox, stride: f64, map_h: usize, map_w: usize) -> CellRect {
    let span = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
        let a = ((lo / stride).floor().max(0.0) as usize).min(n - 1);
        let z = ((hi / stride).ceil().max(0.0) as usize).min(n);
        (a, z.max(a + 1))
    };
    let (x0, x1) = span(b.x, b.x2(), map_w);
    let (y0, y1) = span(b.y, b.y2(), map_h);
    CellRect { x0, y0, x1, y1 }
}

/// `[R, C, pool, pool]` max-pooled features for each box.
pub fn roi_pool(g: &mut Graph, fused: Var, boxes: &[BBox], stride: f64, pool: usize) -> Result<Var> {
    let (_, _, h, w) = g.value(fused).dims4()?;
    let rects: Vec<CellRect> = boxes.iter().map(|b| roi_rect(b, stride, h, w)).collect();
    g.roi_pool(fused, &rects, pool, pool)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[R, 6]`, background first.
    pub cls_logits: Var,
    /// `[R, 20]`: four deltas per abnormality class.
    pub box_deltas: Var,
    /// `[R, 5, 2·pool, 2·pool]`.
    pub mask_logits: Var,
}

/// Classifier over `Flatten(RoI) ∪ z` (or `Flatten(RoI)` alone) plus the
/// mask branch, which never sees `z`.
pub fn head_forward(g: &mut Graph, store: &ParamStore, rois: Var, z: Option<Var>) -> Result<HeadOutput> {
    let r = g.shape(rois)[0];
    let flat = g.flatten(rois)?;
    let input = match z {
        Some(z) => {
            if g.shape(z)[0] != 1 {
                return Err(Error::shape("head_forward", "clinical vector must be a single row"));
            }
            let zr = g.repeat_rows(z, r)?;
            g.concat(&[flat, zr], 1)?
        }
        None => flat,
    };
    let expected = store.get("head.fc.w")?.shape()[1];
    if g.shape(input)[1] != expected {
        return Err(Error::shape(
            "head_forward",
            format!("classifier expects {expected} inputs, got {}", g.shape(input)[1]),
        ));
    }
    let hid = nn::linear(g, store, "head.fc", input)?;
    let hid = g.relu(hid)?;
    let cls_logits = nn::linear(g, store, "head.cls", hid)?;
    let box_deltas = nn::linear(g, store, "head.box", hid)?;
    let m = nn::conv(g, store, "mask.conv", rois, 1, 1)?;
    let m = g.relu(m)?;
    let mask_logits = nn::deconv(g, store, "mask.up", m, 2, 0)?;
    Ok(HeadOutput { cls_logits, box_deltas, mask_logits })
}

/// Per-RoI prediction read back from the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput {
    pub class_scores: Vec<f64>,
    pub box_deltas: Vec<[f64; 4]>,
    pub mask_logits: Vec<f64>,
}

pub fn read_outputs(g: &mut Graph, out: &HeadOutput) -> Result<Vec<DetectionOutput>> {
    let probs = g.softmax(out.cls_logits)?;
    let p = g.value(probs).data();
    let d = g.value(out.box_deltas).data();
    let m = g.value(out.mask_logits).data();
    let r = g.shape(out.cls_logits)[0];
    let mlen = m.len() / r.max(1);
    Ok((0..r)
        .map(|i| DetectionOutput {
            class_scores: p[i * NUM_CLASSES..(i + 1) * NUM_CLASSES].to_vec(),
            box_deltas: (0..AbnormalityClass::COUNT)
                .map(|c| {
                    let o = i * 4 * AbnormalityClass::COUNT + 4 * c;
                    [d[o], d[o + 1], d[o + 2], d[o + 3]]
                })
                .collect(),
            mask_logits: m[i * mlen..(i + 1) * mlen].to_vec(),
        })
        .collect())
}
