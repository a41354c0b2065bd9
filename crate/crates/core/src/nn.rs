//! Named layer helpers over [`ParamStore`]: `{name}.w` / `{name}.b` pairs.

use crate::error::Result;
use crate::tensor::{Graph, Init, ParamStore, Var};

pub fn register_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
    let init = Init::Glorot { fan_in: cin * k * k, fan_out: cout * k * k };
    store.register(&format!("{name}.w"), &[cout, cin, k, k], init)?;
    store.register(&format!("{name}.b"), &[cout], Init::Zeros)
}

/// Transposed-conv kernel is `[cin, cout, k, k]`.
pub fn register_deconv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
    let init = Init::Glorot { fan_in: cin * k * k, fan_out: cout * k * k };
    store.register(&format!("{name}.w"), &[cin, cout, k, k], init)?;
    store.register(&format!("{name}.b"), &[cout], Init::Zeros)
}

pub fn register_linear(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<()> {
    store.register(&format!("{name}.w"), &[dout, din], Init::Glorot { fan_in: din, fan_out: dout })?;
    store.register(&format!("{name}.b"), &[dout], Init::Zeros)
}

pub fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

pub fn deconv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.deconv2d(x, w, Some(b), stride, pad)
}

pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}
