use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box: top-left corner plus width and height, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x: x1, y: y1, w: x2 - x1, h: y2 - y1 }
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let iw = self.x2().min(o.x2()) - self.x.max(o.x);
        let ih = self.y2().min(o.y2()) - self.y.max(o.y);
        if iw <= 0.0 || ih <= 0.0 { 0.0 } else { iw * ih }
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 { 0.0 } else { inter / union }
    }

    /// Intersection over this box's own area.
    pub fn iobb(&self, gt: &BBox) -> Result<f64> {
        let a = self.area();
        if a <= 0.0 {
            return Err(Error::InvalidArgument("iobb: predicted box has zero area".into()));
        }
        Ok(self.intersection(gt) / a)
    }

    pub fn clip(&self, img_w: f64, img_h: f64) -> BBox {
        let x1 = self.x.clamp(0.0, img_w);
        let y1 = self.y.clamp(0.0, img_h);
        let x2 = self.x2().clamp(0.0, img_w);
        let y2 = self.y2().clamp(0.0, img_h);
        BBox::from_corners(x1, y1, x2, y2)
    }

    pub fn within(&self, img_w: f64, img_h: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x2() <= img_w && self.y2() <= img_h
    }
}

/// Largest log-scale delta accepted by [`decode`], as in common two-stage
/// detectors, so `exp` cannot overflow.
pub const DELTA_LOG_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Center offsets relative to the reference size, log size ratios.
pub fn encode(gt: &BBox, reference: &BBox) -> [f64; 4] {
    let (gx, gy) = gt.center();
    let (rx, ry) = reference.center();
    [(gx - rx) / reference.w, (gy - ry) / reference.h, (gt.w / reference.w).ln(), (gt.h / reference.h).ln()]
}

/// Inverse of [`encode`] (unclipped).
pub fn decode(reference: &BBox, d: [f64; 4]) -> Result<BBox> {
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { op: "decode_boxes" });
    }
    let (rx, ry) = reference.center();
    let cx = rx + d[0] * reference.w;
    let cy = ry + d[1] * reference.h;
    let w = reference.w * d[2].min(DELTA_LOG_CLAMP).exp();
    let h = reference.h * d[3].min(DELTA_LOG_CLAMP).exp();
    Ok(BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h))
}

/// [`decode`] followed by clipping to the image.
pub fn decode_boxes(reference: &BBox, d: [f64; 4], img_w: f64, img_h: f64) -> Result<BBox> {
    Ok(decode(reference, d)?.clip(img_w, img_h))
}

/// The five abnormality classes; detector label `i + 1`, background `0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AbnormalityClass {
    EnlargedCardiacSilhouette,
    Atelectasis,
    Consolidation,
    PleuralAbnormality,
    PulmonaryEdema,
}

impl AbnormalityClass {
    pub const ALL: [AbnormalityClass; 5] = [
        AbnormalityClass::EnlargedCardiacSilhouette,
        AbnormalityClass::Atelectasis,
        AbnormalityClass::Consolidation,
        AbnormalityClass::PleuralAbnormality,
        AbnormalityClass::PulmonaryEdema,
    ];
    pub const COUNT: usize = 5;
    /// The pair that share an appearance in the synthetic generator.
    pub const AMBIGUOUS: [AbnormalityClass; 2] = [AbnormalityClass::Consolidation, AbnormalityClass::PulmonaryEdema];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AbnormalityClass::EnlargedCardiacSilhouette => "Enlarged cardiac silhouette",
            AbnormalityClass::Atelectasis => "Atelectasis",
            AbnormalityClass::Consolidation => "Consolidation",
            AbnormalityClass::PleuralAbnormality => "Pleural abnormality",
            AbnormalityClass::PulmonaryEdema => "Pulmonary edema",
        }
    }
}

impl FromStr for AbnormalityClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', " ");
        Self::ALL
            .into_iter()
            .find(|c| c.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::UnknownCategory { feature: "label".into(), value: s.trim().into() })
    }
}

impl fmt::Display for AbnormalityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class: AbnormalityClass,
    #[serde(flatten)]
    pub bbox: BBox,
}

/// Candidate box with its objectness score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
}

/// Scored, classified box in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: AbnormalityClass,
    pub score: f64,
    #[serde(flatten)]
    pub bbox: BBox,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_deltas_return_reference() {
        let p = BBox::new(3.0, 4.0, 10.0, 6.0);
        assert_eq!(decode(&p, [0.0; 4]).unwrap(), p);
    }

    #[test]
    fn log_two_doubles_size() {
        let p = BBox::new(0.0, 0.0, 10.0, 10.0);
        let d = decode(&p, [0.0, 0.0, 2f64.ln(), 2f64.ln()]).unwrap();
        assert!((d.w - 20.0).abs() < 1e-12 && (d.h - 20.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_deltas_error() {
        let p = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert!(decode(&p, [f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn class_names_round_trip() {
        for c in AbnormalityClass::ALL {
            assert_eq!(c.name().parse::<AbnormalityClass>().unwrap(), c);
        }
        assert!("Nodule".parse::<AbnormalityClass>().is_err());
    }
}

