use serde::{Deserialize, Serialize};

use super::boxes::BBox;
use crate::error::{Error, Result};

/// Anchor side lengths (pixels) × aspect ratios (height / width).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub sizes: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig { sizes: vec![8.0, 16.0, 32.0], ratios: vec![0.5, 1.0, 2.0] }
    }
}

impl AnchorConfig {
    pub fn paper() -> Self {
        AnchorConfig { sizes: vec![64.0, 128.0, 256.0], ratios: vec![0.5, 1.0, 2.0] }
    }

    pub fn per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }
}

/// Anchors for every feature-map cell. Anchor `(y, x, k)` is stored at
/// `(y * w + x) * k_per_cell + k`, with `k = size_index * ratios + ratio_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub boxes: Vec<BBox>,
    pub per_cell: usize,
    pub h: usize,
    pub w: usize,
    pub stride: f64,
}

impl AnchorGrid {
    pub fn build(cfg: &AnchorConfig, h: usize, w: usize, stride: f64) -> Result<Self> {
        let k = cfg.per_cell();
        if k == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument("empty anchor grid".into()));
        }
        if cfg.sizes.iter().chain(&cfg.ratios).any(|v| !(*v > 0.0 && v.is_finite())) || !(stride > 0.0) {
            return Err(Error::Config("anchor sizes, ratios and stride must be positive".into()));
        }
        let mut boxes = Vec::with_capacity(h * w * k);
        for y in 0..h {
            for x in 0..w {
                let cx = (x as f64 + 0.5) * stride;
                let cy = (y as f64 + 0.5) * stride;
                for &s in &cfg.sizes {
                    for &r in &cfg.ratios {
                        let bw = s / r.sqrt();
                        let bh = s * r.sqrt();
                        boxes.push(BBox::new(cx - 0.5 * bw, cy - 0.5 * bh, bw, bh));
                    }
                }
            }
        }
        Ok(AnchorGrid { boxes, per_cell: k, h, w, stride })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Flat position in a `[1, K, H, W]` channel-major map for anchor `a`.
    pub fn map_index(&self, a: usize) -> usize {
        let k = a % self.per_cell;
        let cell = a / self.per_cell;
        k * self.h * self.w + cell
    }

    /// Flat position of delta `j` for anchor `a` in a `[1, 4K, H, W]` map.
    pub fn delta_index(&self, a: usize, j: usize) -> usize {
        let k = a % self.per_cell;
        let cell = a / self.per_cell;
        (k * 4 + j) * self.h * self.w + cell
    }
}
