//! The full detector in its four wiring modes.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::clinical::{ClinicalEncoder, ClinicalRecord, FeatureSet, MissingPolicy, NormalizationStats, SpatialConfig, spatialise};
use crate::detection::{
    AbnormalityClass, AnchorConfig, AnchorGrid, BBox, Detection, GroundTruthBox, HeadConfig, HeadOutput, Proposal, RoiTarget,
    RpnConfig, RpnOutput, assign_targets, decode_boxes, encode, generate_proposals, head_forward, label_anchors,
    mask_target, nms_indices, read_outputs, register_head, register_rpn, roi_pool, rpn_head, sample_balanced,
};
use crate::error::{Error, Result};
use crate::fusion::{BackboneConfig, FusionMethod, backbone_forward, fuse, fused_cnn, register_fusion};
use crate::tensor::{Graph, Init, ParamStore, Tensor, Var};
use crate::training::{LossTerms, LossVars, UW_PARAM, compute_losses, weighted_total};

/// Which fusion paths are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Image only.
    Baseline,
    /// Clinical vector joins only at the RoI classifier.
    Msf1d,
    /// Clinical pseudo-image fused only before the RPN.
    Msf3d,
    /// Both.
    #[default]
    Mdf,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Msf1d, Mode::Msf3d, Mode::Mdf];

    pub fn uses_1d(self) -> bool {
        matches!(self, Mode::Msf1d | Mode::Mdf)
    }

    pub fn uses_3d(self) -> bool {
        matches!(self, Mode::Msf3d | Mode::Mdf)
    }

    pub fn uses_clinical(self) -> bool {
        self != Mode::Baseline
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Msf1d => "msf1d",
            Mode::Msf3d => "msf3d",
            Mode::Mdf => "mdf",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}`")))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub fusion: FusionMethod,
    pub image_size: usize,
    pub spatial: SpatialConfig,
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub rpn: RpnConfig,
    pub head: HeadConfig,
    pub fg_thresh: f64,
    pub bg_thresh: f64,
    /// RoIs sampled per image for the head losses.
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub features: FeatureSet,
    pub missing: MissingPolicy,
    /// Per-class suppression threshold at inference.
    pub det_nms_thresh: f64,
    pub max_detections: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64×64 images, e = 6, 8×8×64 feature maps.
    pub fn desk() -> Self {
        ModelConfig {
            mode: Mode::Mdf,
            fusion: FusionMethod::ElementwiseSum,
            image_size: 64,
            spatial: SpatialConfig { e: 6, channels: 8, out_channels: 1 },
            backbone: BackboneConfig::desk(),
            anchors: AnchorConfig::default(),
            rpn: RpnConfig::default(),
            head: HeadConfig::default(),
            fg_thresh: 0.5,
            bg_thresh: 0.3,
            roi_batch: 16,
            roi_fg_fraction: 0.5,
            features: FeatureSet::all(),
            missing: MissingPolicy::Reject,
            det_nms_thresh: 0.5,
            max_detections: 100,
        }
    }

    /// 512×512 images, e = 9, 16×16×64 feature maps.
    pub fn paper() -> Self {
        ModelConfig {
            image_size: 512,
            spatial: SpatialConfig { e: 9, channels: 8, out_channels: 1 },
            backbone: BackboneConfig::paper(),
            anchors: AnchorConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn feature_map_size(&self) -> Result<usize> {
        self.backbone.output_size(self.image_size)
    }

    pub fn stride(&self) -> Result<f64> {
        Ok(self.image_size as f64 / self.feature_map_size()? as f64)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_map_size()?;
        if self.mode.uses_3d() {
            self.spatial.check_image_size(self.image_size)?;
            if self.spatial.out_channels != self.backbone.in_channels {
                return Err(Error::Config("pseudo-image channels must match the image channels".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.bg_thresh) || self.fg_thresh < self.bg_thresh || self.fg_thresh > 1.0 {
            return Err(Error::Config(format!("need 0 ≤ bg_thresh ≤ fg_thresh ≤ 1, got {} / {}", self.bg_thresh, self.fg_thresh)));
        }
        if self.roi_batch == 0 || self.rpn.batch == 0 || self.rpn.post_nms == 0 {
            return Err(Error::Config("sampling sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Clinical input handed to a forward pass; counts how often the model reads it.
#[derive(Debug)]
pub struct ClinicalInput<'a> {
    record: Option<&'a ClinicalRecord>,
    reads: Cell<usize>,
}

impl<'a> ClinicalInput<'a> {
    pub fn new(record: Option<&'a ClinicalRecord>) -> Self {
        ClinicalInput { record, reads: Cell::new(0) }
    }

    pub fn read(&self) -> Option<&'a ClinicalRecord> {
        self.reads.set(self.reads.get() + 1);
        self.record
    }

    pub fn reads(&self) -> usize {
        self.reads.get()
    }
}

/// Graph nodes shared by training and inference.
#[derive(Clone, Copy, Debug)]
pub struct Trunk {
    pub image_map: Var,
    pub clinical_map: Option<Var>,
    pub fused: Var,
    /// Clinical vector routed to the classifier, when 1-D fusion is on.
    pub z: Option<Var>,
    pub rpn: RpnOutput,
}

/// Positive RoI with its regression and mask targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundRoi {
    pub roi: usize,
    pub class: AbnormalityClass,
    pub deltas: [f64; 4],
    pub mask: Vec<f64>,
}

/// Every discrete choice of one training step, so the loss is a smooth
/// function of the parameters once the plan is fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    pub anchors: Vec<usize>,
    pub anchor_labels: Vec<f64>,
    pub pos_anchors: Vec<usize>,
    pub pos_anchor_deltas: Vec<[f64; 4]>,
    pub rois: Vec<BBox>,
    pub roi_labels: Vec<usize>,
    pub foreground: Vec<ForegroundRoi>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Option<ClinicalEncoder>,
    pub anchors: AnchorGrid,
    pub params: ParamStore,
}

impl Model {
    /// `stats` is required whenever the mode reads clinical data.
    pub fn new(cfg: ModelConfig, stats: Option<NormalizationStats>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let fmap = cfg.feature_map_size()?;
        let anchors = AnchorGrid::build(&cfg.anchors, fmap, fmap, cfg.stride()?)?;
        let encoder = if cfg.mode.uses_clinical() {
            let stats = stats.ok_or_else(|| Error::Config(format!("mode {} needs normalization statistics", cfg.mode)))?;
            Some(ClinicalEncoder::new(cfg.features.clone(), stats, cfg.missing))
        } else {
            None
        };
        let d = cfg.backbone.out_channels();
        let mut params = ParamStore::new(seed);
        if let Some(enc) = &encoder {
            enc.register(&mut params)?;
            if cfg.mode.uses_3d() {
                cfg.spatial.register(&mut params, enc.len())?;
                cfg.backbone.register(&mut params, "clin")?;
            }
        }
        cfg.backbone.register(&mut params, "img")?;
        register_fusion(&mut params, d, cfg.mode.uses_3d().then_some(cfg.fusion))?;
        register_rpn(&mut params, d, &cfg.rpn, anchors.per_cell)?;
        let zlen = encoder.as_ref().filter(|_| cfg.mode.uses_1d()).map(ClinicalEncoder::len);
        register_head(&mut params, d, zlen, &cfg.head)?;
        params.register(UW_PARAM, &[LossTerms::COUNT], Init::Zeros)?;
        Ok(Model { cfg, encoder, anchors, params })
    }

    pub fn image_tensor(&self, pixels: &[f64]) -> Result<Tensor> {
        let s = self.cfg.image_size;
        if pixels.len() != s * s {
            return Err(Error::shape("image", format!("expected {s}x{s} pixels, got {}", pixels.len())));
        }
        Tensor::new(vec![1, self.cfg.backbone.in_channels, s, s], pixels.to_vec())
    }

    pub fn trunk(&self, g: &mut Graph, store: &ParamStore, image: &Tensor, clinical: &ClinicalInput) -> Result<Trunk> {
        let s = self.cfg.image_size;
        if image.shape() != [1, self.cfg.backbone.in_channels, s, s] {
            return Err(Error::shape("model", format!("image must be [1, C, {s}, {s}], got {:?}", image.shape())));
        }
        let x = g.constant(image.clone())?;
        let image_map = backbone_forward(g, store, "img", &self.cfg.backbone, x)?;
        let z = match &self.encoder {
            Some(enc) => {
                let rec = clinical.read().ok_or_else(|| Error::MissingValue("clinical record".into()))?;
                let p = enc.prepare(rec)?;
                Some(enc.forward(g, store, &p)?)
            }
            None => None,
        };
        let (fused, clinical_map) = match z.filter(|_| self.cfg.mode.uses_3d()) {
            Some(z) => {
                let pseudo = spatialise(g, store, z, &self.cfg.spatial)?;
                let cmap = backbone_forward(g, store, "clin", &self.cfg.backbone, pseudo)?;
                (fuse(g, store, cmap, image_map, self.cfg.fusion)?, Some(cmap))
            }
            None => (fused_cnn(g, store, image_map)?, None),
        };
        let rpn = rpn_head(g, store, fused, &self.anchors)?;
        Ok(Trunk { image_map, clinical_map, fused, z: z.filter(|_| self.cfg.mode.uses_1d()), rpn })
    }

    pub fn proposals(&self, g: &Graph, trunk: &Trunk) -> Result<Vec<Proposal>> {
        let s = self.cfg.image_size as f64;
        generate_proposals(g.value(trunk.rpn.obj).data(), g.value(trunk.rpn.deltas).data(), &self.anchors, &self.cfg.rpn, s, s)
    }

    pub fn head(&self, g: &mut Graph, store: &ParamStore, trunk: &Trunk, boxes: &[BBox]) -> Result<HeadOutput> {
        let rois = roi_pool(g, trunk.fused, boxes, self.cfg.stride()?, self.cfg.head.pool)?;
        head_forward(g, store, rois, trunk.z)
    }

    /// Samples anchors and RoIs for one training image.
    pub fn plan<R: Rng>(&self, g: &Graph, trunk: &Trunk, gts: &[GroundTruthBox], rng: &mut R) -> Result<SamplingPlan> {
        let labels = label_anchors(&self.anchors.boxes, gts, self.cfg.rpn.pos_iou, self.cfg.rpn.neg_iou);
        let pos: Vec<usize> = (0..labels.labels.len()).filter(|&a| labels.labels[a] == 1).collect();
        let neg: Vec<usize> = (0..labels.labels.len()).filter(|&a| labels.labels[a] == 0).collect();
        let (pos, neg) = sample_balanced(&pos, &neg, self.cfg.rpn.batch, self.cfg.rpn.pos_fraction, rng);
        let mut anchors: Vec<(usize, f64)> = pos.iter().map(|&a| (a, 1.0)).chain(neg.iter().map(|&a| (a, 0.0))).collect();
        anchors.sort_by_key(|p| p.0);
        let pos_anchor_deltas = pos
            .iter()
            .map(|&a| encode(&gts[labels.matched[a].expect("positive anchor has a match")].bbox, &self.anchors.boxes[a]))
            .collect();

        let mut cands: Vec<BBox> = self.proposals(g, trunk)?.into_iter().map(|p| p.bbox).collect();
        cands.extend(gts.iter().map(|g| g.bbox));
        let targets = assign_targets(&cands, gts, self.cfg.fg_thresh, self.cfg.bg_thresh)?;
        let fg: Vec<usize> = (0..cands.len()).filter(|&i| matches!(targets[i], RoiTarget::Foreground { .. })).collect();
        let bg: Vec<usize> = (0..cands.len()).filter(|&i| targets[i] == RoiTarget::Background).collect();
        let (fg, bg) = sample_balanced(&fg, &bg, self.cfg.roi_batch, self.cfg.roi_fg_fraction, rng);

        let mask_size = self.cfg.head.mask_size();
        let mut plan = SamplingPlan {
            anchors: anchors.iter().map(|p| p.0).collect(),
            anchor_labels: anchors.iter().map(|p| p.1).collect(),
            pos_anchors: pos,
            pos_anchor_deltas,
            rois: Vec::new(),
            roi_labels: Vec::new(),
            foreground: Vec::new(),
        };
        for i in fg {
            if let RoiTarget::Foreground { class, gt, deltas } = targets[i] {
                plan.foreground.push(ForegroundRoi {
                    roi: plan.rois.len(),
                    class,
                    deltas,
                    mask: mask_target(&cands[i], &gts[gt].bbox, mask_size),
                });
                plan.rois.push(cands[i]);
                plan.roi_labels.push(class.index() + 1);
            }
        }
        for i in bg {
            plan.rois.push(cands[i]);
            plan.roi_labels.push(0);
        }
        Ok(plan)
    }

    /// Per-class detections above `score_thresh` after class-wise NMS.
    pub fn detect(&self, store: &ParamStore, image: &Tensor, clinical: &ClinicalInput, score_thresh: f64) -> Result<Vec<Detection>> {
        let mut g = Graph::new();
        let trunk = self.trunk(&mut g, store, image, clinical)?;
        let props = self.proposals(&g, &trunk)?;
        if props.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        let out = self.head(&mut g, store, &trunk, &boxes)?;
        let preds = read_outputs(&mut g, &out)?;
        let s = self.cfg.image_size as f64;
        let mut dets = Vec::new();
        for class in AbnormalityClass::ALL {
            let mut cb = Vec::new();
            let mut cs = Vec::new();
            for (p, pred) in boxes.iter().zip(&preds) {
                let score = pred.class_scores[class.index() + 1];
                if score < score_thresh {
                    continue;
                }
                let b = decode_boxes(p, pred.box_deltas[class.index()], s, s)?;
                if b.is_valid() {
                    cb.push(b);
                    cs.push(score);
                }
            }
            for i in nms_indices(&cb, &cs, self.cfg.det_nms_thresh) {
                dets.push(Detection { class, score: cs[i], bbox: cb[i] });
            }
        }
        dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class.cmp(&b.class)));
        dets.truncate(self.cfg.max_detections);
        Ok(dets)
    }
}

impl Model {
    /// Five-term loss and weighted total for one image under `plan`.
    pub fn losses_with_plan(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Tensor,
        clinical: &ClinicalInput,
        plan: &SamplingPlan,
    ) -> Result<(LossVars, Var)> {
        let trunk = self.trunk(g, store, image, clinical)?;
        self.losses_on_trunk(g, store, &trunk, plan)
    }

    pub fn losses_on_trunk(&self, g: &mut Graph, store: &ParamStore, trunk: &Trunk, plan: &SamplingPlan) -> Result<(LossVars, Var)> {
        let head = if plan.rois.is_empty() { None } else { Some(self.head(g, store, trunk, &plan.rois)?) };
        let vars = compute_losses(g, &trunk.rpn, head.as_ref(), plan)?;
        let total = weighted_total(g, store, &vars)?;
        Ok((vars, total))
    }
}

/// Metadata key holding the model configuration inside a checkpoint.
pub const CONFIG_KEY: &str = "model";
const NORM_PREFIX: &str = "norm.";

impl Model {
    /// Parameters plus normalization statistics; `extra` entries are merged
    /// into the metadata next to the model configuration.
    pub fn to_checkpoint(&self, extra: serde_json::Map<String, serde_json::Value>) -> Result<Checkpoint> {
        let mut meta = extra;
        meta.insert(CONFIG_KEY.into(), serde_json::to_value(&self.cfg)?);
        let mut ck = Checkpoint::from_store(serde_json::Value::Object(meta), &self.params);
        if let Some(enc) = &self.encoder {
            for (name, t) in enc.stats.to_tensors() {
                ck.insert(name, t);
            }
        }
        Ok(ck)
    }

    /// Rebuilds a model; every recorded tensor must match the configuration
    /// in name and shape.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(
            ck.meta.get(CONFIG_KEY).cloned().ok_or_else(|| Error::Format("checkpoint has no model config".into()))?,
        )?;
        Self::from_checkpoint_with(ck, cfg)
    }

    /// Loads the weights in `ck` into a model built from `cfg`.
    pub fn from_checkpoint_with(ck: &Checkpoint, cfg: ModelConfig) -> Result<Self> {
        let stats = if cfg.mode.uses_clinical() {
            Some(NormalizationStats::from_tensors(|n| ck.get(n).cloned()).map_err(|e| Error::CheckpointMismatch(e.to_string()))?)
        } else {
            None
        };
        let mut model = Model::new(cfg, stats, 0)?;
        for (name, t) in &ck.tensors {
            if name.starts_with(NORM_PREFIX) {
                continue;
            }
            let slot = model
                .params
                .get_mut(name)
                .map_err(|_| Error::CheckpointMismatch(format!("unexpected tensor `{name}`")))?;
            if slot.shape() != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "`{name}` has shape {:?}, configuration expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        if let Some(missing) = model.params.names().find(|n| !ck.tensors.contains_key(*n)) {
            return Err(Error::CheckpointMismatch(format!("missing tensor `{missing}`")));
        }
        Ok(model)
    }
}
