use serde::{Deserialize, Serialize};

use crate::detection::{AbnormalityClass, HeadOutput, RpnOutput};
use crate::error::{Error, Result};
use crate::model::SamplingPlan;
use crate::tensor::{Graph, ParamStore, Tensor, Var, smooth_l1_value};

/// Transition point of the regression loss.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Parameter holding `s = log α²`, one entry per loss term.
pub const UW_PARAM: &str = "uw.s";

/// Σ over coordinates of `0.5·d²/β` when `|d| < β`, else `|d| − 0.5·β`.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("smooth_l1", format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument("smooth_l1 beta must be positive".into()));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| smooth_l1_value(p - t, beta)).sum())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_cls: f64,
    pub l_bb: f64,
    pub l_mask: f64,
    pub l_obj_rpn: f64,
    pub l_bb_rpn: f64,
}

impl LossTerms {
    pub const COUNT: usize = 5;
    pub const NAMES: [&'static str; 5] = ["l_cls", "l_bb", "l_mask", "l_obj_rpn", "l_bb_rpn"];

    pub fn to_array(&self) -> [f64; 5] {
        [self.l_cls, self.l_bb, self.l_mask, self.l_obj_rpn, self.l_bb_rpn]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        LossTerms { l_cls: a[0], l_bb: a[1], l_mask: a[2], l_obj_rpn: a[3], l_bb_rpn: a[4] }
    }

    pub fn validate(&self) -> Result<()> {
        match self.to_array().iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            Some(i) => Err(Error::Numeric { op: Self::NAMES[i] }),
            None => Ok(()),
        }
    }
}

/// Trainable task weights, stored as `s = log α²` so α stays positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyWeights {
    pub log_var: [f64; 5],
}

impl UncertaintyWeights {
    pub fn from_alpha(alpha: [f64; 5]) -> Result<Self> {
        if alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidArgument(format!("alpha must be positive and finite, got {alpha:?}")));
        }
        Ok(UncertaintyWeights { log_var: alpha.map(|a| (a * a).ln()) })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let t = store.get(UW_PARAM)?;
        let log_var: [f64; 5] =
            t.data().try_into().map_err(|_| Error::shape("uncertainty weights", format!("{:?}", t.shape())))?;
        Ok(UncertaintyWeights { log_var })
    }

    pub fn alpha(&self) -> [f64; 5] {
        self.log_var.map(|s| (0.5 * s).exp())
    }

    /// ∂ total / ∂α_l for each term.
    pub fn grad_alpha(&self, terms: &LossTerms) -> [f64; 5] {
        let a = self.alpha();
        let l = terms.to_array();
        std::array::from_fn(|i| -l[i] / a[i].powi(3) + 2.0 / a[i])
    }
}

/// Σ_l l / (2α_l²) + log α_l².
pub fn total_loss(terms: &LossTerms, weights: &UncertaintyWeights) -> Result<f64> {
    terms.validate()?;
    let t: f64 = terms.to_array().iter().zip(&weights.log_var).map(|(l, s)| 0.5 * (-s).exp() * l + s).sum();
    if t.is_finite() { Ok(t) } else { Err(Error::Numeric { op: "total_loss" }) }
}

/// Scalar graph nodes for the five terms, in `LossTerms` order.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub terms: [Var; 5],
    /// Set when the image produced no RoI at all; the head terms are then 0.
    pub no_rois: bool,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossTerms {
        LossTerms::from_array(self.terms.map(|v| g.value(v).item()))
    }
}

fn zero(g: &mut Graph) -> Result<Var> {
    g.constant(Tensor::scalar(0.0))
}

/// The five terms for one image under a fixed sampling plan. Classification
/// terms are averaged over sampled RoIs / anchors, regression and mask terms
/// over positives; a term with nothing to average is exactly 0.
pub fn compute_losses(g: &mut Graph, rpn: &RpnOutput, head: Option<&HeadOutput>, plan: &SamplingPlan) -> Result<LossVars> {
    let l_obj_rpn = if plan.anchors.is_empty() {
        zero(g)?
    } else {
        let obj = g.gather(rpn.obj, &plan.anchors)?;
        let s = g.bce_with_logits(obj, &plan.anchor_labels)?;
        g.scale(s, 1.0 / plan.anchors.len() as f64)?
    };
    let l_bb_rpn = if plan.pos_anchors.is_empty() {
        zero(g)?
    } else {
        let idx: Vec<usize> = plan.pos_anchors.iter().flat_map(|&a| (0..4).map(move |j| 4 * a + j)).collect();
        let target: Vec<f64> = plan.pos_anchor_deltas.iter().flatten().copied().collect();
        let d = g.gather(rpn.deltas, &idx)?;
        let s = g.smooth_l1(d, &target, SMOOTH_L1_BETA)?;
        g.scale(s, 1.0 / plan.pos_anchors.len() as f64)?
    };

    let no_rois = plan.rois.is_empty();
    let (l_cls, l_bb, l_mask) = match head {
        Some(h) if !no_rois => {
            let r = plan.rois.len();
            if g.shape(h.cls_logits)[0] != r {
                return Err(Error::shape("compute_losses", "head output does not match the planned RoIs"));
            }
            let ce = g.cross_entropy(h.cls_logits, &plan.roi_labels)?;
            let l_cls = g.scale(ce, 1.0 / r as f64)?;
            if plan.foreground.is_empty() {
                (l_cls, zero(g)?, zero(g)?)
            } else {
                let nfg = plan.foreground.len() as f64;
                let k = AbnormalityClass::COUNT;
                let idx: Vec<usize> = plan
                    .foreground
                    .iter()
                    .flat_map(|f| (0..4).map(move |j| f.roi * 4 * k + 4 * f.class.index() + j))
                    .collect();
                let target: Vec<f64> = plan.foreground.iter().flat_map(|f| f.deltas).collect();
                let d = g.gather(h.box_deltas, &idx)?;
                let s = g.smooth_l1(d, &target, SMOOTH_L1_BETA)?;
                let l_bb = g.scale(s, 1.0 / nfg)?;

                let m2 = g.shape(h.mask_logits)[2] * g.shape(h.mask_logits)[3];
                let idx: Vec<usize> = plan
                    .foreground
                    .iter()
                    .flat_map(|f| {
                        let base = (f.roi * k + f.class.index()) * m2;
                        base..base + m2
                    })
                    .collect();
                let target: Vec<f64> = plan.foreground.iter().flat_map(|f| f.mask.iter().copied()).collect();
                if target.len() != idx.len() {
                    return Err(Error::shape("compute_losses", "mask target size differs from the mask head"));
                }
                let m = g.gather(h.mask_logits, &idx)?;
                let s = g.bce_with_logits(m, &target)?;
                let l_mask = g.scale(s, 1.0 / (nfg * m2 as f64))?;
                (l_cls, l_bb, l_mask)
            }
        }
        _ => (zero(g)?, zero(g)?, zero(g)?),
    };
    Ok(LossVars { terms: [l_cls, l_bb, l_mask, l_obj_rpn, l_bb_rpn], no_rois })
}

/// Graph version of `total_loss`, differentiable in θ and in `s`.
pub fn weighted_total(g: &mut Graph, store: &ParamStore, vars: &LossVars) -> Result<Var> {
    let terms = g.concat(&vars.terms, 0)?;
    let s = g.param(store, UW_PARAM)?;
    let neg = g.scale(s, -1.0)?;
    let w = g.exp(neg)?;
    let wl = g.mul(w, terms)?;
    let wl = g.scale(wl, 0.5)?;
    let t = g.add(wl, s)?;
    g.sum(t)
}
