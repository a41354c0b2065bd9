use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Graph, ParamStore, Var};

/// Stack of `e` (2×2 stride-2 deconv, 3×3 conv) layers lifting `[1, n]` to
/// a `[1, C, 2^e, 2^e]` pseudo-image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialConfig {
    pub e: usize,
    pub channels: usize,
    pub out_channels: usize,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig { e: 6, channels: 8, out_channels: 1 }
    }
}

impl SpatialConfig {
    pub fn output_size(&self) -> usize {
        1 << self.e
    }

    pub fn check_image_size(&self, size: usize) -> Result<()> {
        if self.e == 0 || self.e > 16 || self.output_size() != size {
            return Err(Error::Config(format!("spatialisation e={} cannot produce a {size}x{size} image", self.e)));
        }
        Ok(())
    }

    pub fn register(&self, store: &mut ParamStore, n: usize) -> Result<()> {
        for i in 0..self.e {
            let cin = if i == 0 { n } else { self.channels };
            let cout = if i + 1 == self.e { self.out_channels } else { self.channels };
            nn::register_deconv(store, &format!("spa.{i}.up"), cin, self.channels, 2)?;
            nn::register_conv(store, &format!("spa.{i}.conv"), self.channels, cout, 3)?;
        }
        Ok(())
    }
}

/// `z: [1, n]` → `[1, C, 2^e, 2^e]`. The last layer has no activation so
/// the pseudo-image is signed like a normalised image.
pub fn spatialise(g: &mut Graph, store: &ParamStore, z: Var, cfg: &SpatialConfig) -> Result<Var> {
    let n = match g.shape(z) {
        [1, n] => *n,
        s => return Err(Error::shape("spatialise", format!("expected [1, n], got {s:?}"))),
    };
    let mut x = g.reshape(z, &[1, n, 1, 1])?;
    for i in 0..cfg.e {
        x = nn::deconv(g, store, &format!("spa.{i}.up"), x, 2, 0)?;
        x = nn::conv(g, store, &format!("spa.{i}.conv"), x, 1, 1)?;
        if i + 1 < cfg.e {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}
