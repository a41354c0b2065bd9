//! Twin CNN backbones and the feature-map fusion block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Graph, ParamStore, Var};

/// Stack of 3×3 conv + relu stages; stage `i` has `channels[i]` outputs and
/// stride `strides[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl BackboneConfig {
    /// 64×64 → 8×8×64.
    pub fn desk() -> Self {
        BackboneConfig { in_channels: 1, channels: vec![8, 16, 32, 64], strides: vec![2, 2, 2, 1] }
    }

    /// 512×512 → 16×16×64.
    pub fn paper() -> Self {
        BackboneConfig { in_channels: 1, channels: vec![8, 16, 32, 64, 64], strides: vec![2; 5] }
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }

    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config("backbone needs one stride per stage".into()));
        }
        if self.strides.contains(&0) || self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("backbone strides and channels must be positive".into()));
        }
        Ok(())
    }

    /// Output spatial size for a square input.
    pub fn output_size(&self, size: usize) -> Result<usize> {
        self.validate()?;
        let mut s = size;
        for &st in &self.strides {
            if s % st != 0 {
                return Err(Error::Config(format!("input size {size} not divisible by stride schedule {:?}", self.strides)));
            }
            s /= st;
        }
        Ok(s)
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        self.validate()?;
        let mut cin = self.in_channels;
        for (i, &c) in self.channels.iter().enumerate() {
            nn::register_conv(store, &format!("{prefix}.{i}"), cin, c, 3)?;
            cin = c;
        }
        Ok(())
    }
}

pub fn backbone_forward(g: &mut Graph, store: &ParamStore, prefix: &str, cfg: &BackboneConfig, x: Var) -> Result<Var> {
    let (_, _, h, w) = g.value(x).dims4()?;
    if h != w {
        return Err(Error::shape("backbone_forward", format!("expects square input, got {h}x{w}")));
    }
    cfg.output_size(h)?;
    let mut x = x;
    for (i, &s) in cfg.strides.iter().enumerate() {
        x = nn::conv(g, store, &format!("{prefix}.{i}"), x, s, 1)?;
        x = g.relu(x)?;
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMethod {
    #[default]
    #[serde(rename = "sum", alias = "elementwise-sum")]
    ElementwiseSum,
    ConcatLinear,
    ConcatConv,
    Hadamard,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 4] =
        [FusionMethod::ElementwiseSum, FusionMethod::ConcatLinear, FusionMethod::ConcatConv, FusionMethod::Hadamard];

    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::ElementwiseSum => "sum",
            FusionMethod::ConcatLinear => "concat-linear",
            FusionMethod::ConcatConv => "concat-conv",
            FusionMethod::Hadamard => "hadamard",
        }
    }

    fn projection_kernel(self) -> Option<usize> {
        match self {
            FusionMethod::ConcatLinear => Some(1),
            FusionMethod::ConcatConv => Some(3),
            _ => None,
        }
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        FusionMethod::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "elementwise-sum" && *m == FusionMethod::ElementwiseSum))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown fusion method `{s}`")))
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const FUSED_LAYERS: usize = 2;

/// Registers the post-combine CNN and, for concat variants, the projection.
pub fn register_fusion(store: &mut ParamStore, channels: usize, method: Option<FusionMethod>) -> Result<()> {
    if let Some(k) = method.and_then(FusionMethod::projection_kernel) {
        nn::register_conv(store, "fuse.proj", 2 * channels, channels, k)?;
    }
    for i in 0..FUSED_LAYERS {
        nn::register_conv(store, &format!("fused.{i}"), channels, channels, 3)?;
    }
    Ok(())
}

/// The combine step alone: `C ⊕ I`, `C ⊙ I`, or a projection of `[C; I]`.
pub fn combine(g: &mut Graph, store: &ParamStore, clinical: Var, image: Var, method: FusionMethod) -> Result<Var> {
    if g.shape(clinical) != g.shape(image) {
        return Err(Error::shape(
            "fuse",
            format!("clinical map {:?} vs image map {:?}", g.shape(clinical), g.shape(image)),
        ));
    }
    match method {
        FusionMethod::ElementwiseSum => g.add(clinical, image),
        FusionMethod::Hadamard => g.mul(clinical, image),
        FusionMethod::ConcatLinear | FusionMethod::ConcatConv => {
            let cat = g.concat(&[clinical, image], 1)?;
            let pad = method.projection_kernel().expect("concat variant") / 2;
            nn::conv(g, store, "fuse.proj", cat, 1, pad)
        }
    }
}

/// Shape-preserving two-layer CNN applied after combining.
pub fn fused_cnn(g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
    let mut x = x;
    for i in 0..FUSED_LAYERS {
        x = nn::conv(g, store, &format!("fused.{i}"), x, 1, 1)?;
        x = g.relu(x)?;
    }
    Ok(x)
}

pub fn fuse(g: &mut Graph, store: &ParamStore, clinical: Var, image: Var, method: FusionMethod) -> Result<Var> {
    let z = combine(g, store, clinical, image, method)?;
    fused_cnn(g, store, z)
}
