use indexmap::IndexMap;

use super::kernels::{self, CellRect, ConvGeom};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cout: usize },
    Deconv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cin: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Embedding { table: Var, indices: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Sum(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Gather { x: Var, indices: Vec<usize> },
    RepeatRows { x: Var },
    RoiPool { x: Var, argmax: Vec<usize> },
    SmoothL1 { pred: Var, target: Vec<f64>, beta: f64 },
    BceLogits { logits: Var, target: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A forward tape. Build it op by op, then call [`Graph::backward`] once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    consumed: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: IndexMap<String, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf created with
    /// `requires_grad`.
    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        self.leaves
            .get(v.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Graph(format!("node {} has no gradient", v.0)))
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        let v = self
            .params
            .get(name)
            .ok_or_else(|| Error::DetachedParameter(name.to_string()))?;
        self.leaves
            .get(v.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::DetachedParameter(name.to_string()))
    }

    /// Parameters that received a gradient, in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.leaves[v.0].as_ref().map(|t| (n.as_str(), t)))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Inserts a leaf; it takes part in backward iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let rg = t.is_grad_enabled();
        self.push("leaf", t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t.requires_grad(false))
    }

    /// Looks up (or inserts once) a trainable parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone().requires_grad(true);
        let v = self.leaf(t)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bsz, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if cin != wcin {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, kernel expects {wcin}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv2d", "bias length must equal output channels"));
            }
        }
        let geom = ConvGeom::conv(cin, h, wd, kh, kw, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {kh}x{kw} does not fit {h}x{wd} with pad {pad}, stride {stride}")))?;
        let mut out = vec![0.0; bsz * cout * geom.col_cols()];
        kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bsz, cout, &geom, &mut out);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), bsz, cout, geom.col_cols());
        }
        let t = Tensor::new(vec![bsz, cout, geom.out_h, geom.out_w], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom, cout }, ng)
    }

    /// Transposed convolution; kernel layout `[Cin, Cout, kh, kw]`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bsz, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, kh, kw) = self.value(w).dims4()?;
        if cin != wcin {
            return Err(Error::shape("deconv2d", format!("input has {cin} channels, kernel expects {wcin}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("deconv2d", "bias length must equal output channels"));
            }
        }
        let geom = ConvGeom::deconv(cout, h, wd, kh, kw, stride, pad)
            .ok_or_else(|| Error::shape("deconv2d", "non-positive output size"))?;
        let plane = geom.in_h * geom.in_w;
        let mut out = vec![0.0; bsz * cout * plane];
        kernels::deconv2d_forward(self.value(x).data(), self.value(w).data(), bsz, cin, &geom, &mut out);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), bsz, cout, plane);
        }
        let t = Tensor::new(vec![bsz, cout, geom.in_h, geom.in_w], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("deconv2d", t, Op::Deconv2d { x, w, b, geom, cin }, ng)
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (bsz, c, h, w) = self.value(x).dims4()?;
        if stride == 0 || kernel == 0 || kernel > h || kernel > w {
            return Err(Error::shape("maxpool2d", format!("kernel {kernel} on {h}x{w}")));
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(bsz * c * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..bsz * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for di in 0..kernel {
                        for dj in 0..kernel {
                            let idx = base + (i * stride + di) * w + j * stride + dj;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![bsz, c, oh, ow], out)?;
        let ng = self.needs(x);
        self.push("maxpool2d", t, Op::MaxPool2d { x, argmax }, ng)
    }

    /// `y = x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = match self.shape(x) {
            [n, d] => (*n, *d),
            s => return Err(Error::shape("linear", format!("input must be 2-D, got {s:?}"))),
        };
        let (dout, win) = match self.shape(w) {
            [o, i] => (*o, *i),
            s => return Err(Error::shape("linear", format!("weight must be 2-D, got {s:?}"))),
        };
        if din != win {
            return Err(Error::shape("linear", format!("input width {din} vs weight width {win}")));
        }
        let mut out = vec![0.0; n * dout];
        kernels::matmul_bt_acc(self.value(x).data(), self.value(w).data(), &mut out, n, dout, din);
        if let Some(b) = b {
            let bd = self.value(b).data();
            if bd.len() != dout {
                return Err(Error::shape("linear", "bias length must equal output width"));
            }
            for row in out.chunks_mut(dout) {
                kernels::axpy(1.0, bd, row);
            }
        }
        let t = Tensor::new(vec![n, dout], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("linear", t, Op::Linear { x, w, b }, ng)
    }

    /// Rows of `table: [V, D]` selected by `indices` → `[len, D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = match self.shape(table) {
            [v, d] => (*v, *d),
            s => return Err(Error::shape("embedding", format!("table must be 2-D, got {s:?}"))),
        };
        if indices.is_empty() {
            return Err(Error::shape("embedding", "no indices"));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::shape("embedding", format!("index {i} out of range for {v} rows")));
            }
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![indices.len(), d], out)?;
        let ng = self.needs(table);
        self.push("embedding", t, Op::Embedding { table, indices: indices.to_vec() }, ng)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(name, t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x);
        self.push(name, t, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x);
        self.push("softmax", t, Op::Softmax(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = inputs.iter().any(|v| self.needs(*v));
        self.push("concat", Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().requires_grad(false).reshape(shape.to_vec())?;
        let ng = self.needs(x);
        self.push("reshape", t, Op::Reshape(x), ng)
    }

    /// Flattens everything after the first axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let rest: usize = s[1..].iter().product();
        let n = s[0];
        self.reshape(x, &[n, rest.max(1)])
    }

    /// Picks flat elements of `x` → `[len]`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::shape("gather", "no indices"));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            out.push(*xd.get(i).ok_or_else(|| Error::shape("gather", format!("index {i} out of range")))?);
        }
        let ng = self.needs(x);
        self.push("gather", Tensor::from_vec(out), Op::Gather { x, indices: indices.to_vec() }, ng)
    }

    /// Tiles the flattened `x` into `rows` identical rows.
    pub fn repeat_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        if rows == 0 {
            return Err(Error::shape("repeat_rows", "zero rows"));
        }
        let d = self.value(x).numel();
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(self.value(x).data());
        }
        let ng = self.needs(x);
        self.push("repeat_rows", Tensor::new(vec![rows, d], out)?, Op::RepeatRows { x }, ng)
    }

    /// Max-pools each cell rectangle of `x: [1, C, H, W]` to `[R, C, ph, pw]`.
    pub fn roi_pool(&mut self, x: Var, rects: &[CellRect], ph: usize, pw: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if b != 1 {
            return Err(Error::shape("roi_pool", "expects a single-image feature map"));
        }
        if rects.is_empty() || ph == 0 || pw == 0 {
            return Err(Error::shape("roi_pool", "no regions or empty output grid"));
        }
        let mut out = Vec::with_capacity(rects.len() * c * ph * pw);
        let mut argmax = Vec::with_capacity(out.capacity());
        for r in rects {
            if r.x1 <= r.x0 || r.y1 <= r.y0 || r.x1 > w || r.y1 > h {
                return Err(Error::shape("roi_pool", format!("region {r:?} outside {h}x{w} map")));
            }
            kernels::roi_pool_one(self.value(x).data(), c, h, w, r, ph, pw, &mut out, &mut argmax);
        }
        let t = Tensor::new(vec![rects.len(), c, ph, pw], out)?;
        let ng = self.needs(x);
        self.push("roi_pool", t, Op::RoiPool { x, argmax }, ng)
    }

    /// Σ smooth-L1(pred − target) with transition point `beta`.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], beta: f64) -> Result<Var> {
        if self.value(pred).numel() != target.len() {
            return Err(Error::shape("smooth_l1", "prediction and target lengths differ"));
        }
        if beta <= 0.0 {
            return Err(Error::InvalidArgument("smooth_l1 beta must be positive".into()));
        }
        let s = self.value(pred).data().iter().zip(target).map(|(p, t)| smooth_l1_value(p - t, beta)).sum();
        let ng = self.needs(pred);
        self.push("smooth_l1", Tensor::scalar(s), Op::SmoothL1 { pred, target: target.to_vec(), beta }, ng)
    }

    /// Σ binary cross-entropy between `sigmoid(logits)` and `target ∈ [0,1]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        if self.value(logits).numel() != target.len() {
            return Err(Error::shape("bce_with_logits", "logit and target lengths differ"));
        }
        let s = self
            .value(logits)
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let ng = self.needs(logits);
        self.push("bce_with_logits", Tensor::scalar(s), Op::BceLogits { logits, target: target.to_vec() }, ng)
    }

    /// Σ_rows −log softmax(logits)[label] for `logits: [N, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = match self.shape(logits) {
            [n, c] => (*n, *c),
            s => return Err(Error::shape("cross_entropy", format!("logits must be 2-D, got {s:?}"))),
        };
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape("cross_entropy", "labels do not match logits"));
        }
        let ld = self.value(logits).data();
        let s = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let row = &ld[i * c..(i + 1) * c];
                log_sum_exp(row) - row[l]
            })
            .sum();
        let ng = self.needs(logits);
        self.push("cross_entropy", Tensor::scalar(s), Op::CrossEntropy { logits, labels: labels.to_vec() }, ng)
    }

    /// Reverse pass from a scalar `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Graph("backward already ran on this graph; run a new forward pass".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Graph(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        let take = |grads: &mut Vec<Option<Vec<f64>>>, v: Var| -> Option<Vec<f64>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; nodes[v.0].value.numel()]))
        };

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), gy)?);
                }
                Op::Conv2d { x, w, b, geom, cout } => {
                    let bsz = node.value.shape()[0];
                    let mut gx = take(&mut grads, *x);
                    let mut gw = take(&mut grads, *w);
                    kernels::conv2d_backward(val(*x), val(*w), &gy, bsz, *cout, geom, gx.as_deref_mut(), gw.as_deref_mut());
                    put(&mut grads, *x, gx);
                    put(&mut grads, *w, gw);
                    if let Some(b) = b {
                        let mut gb = take(&mut grads, *b);
                        if let Some(gb) = gb.as_deref_mut() {
                            channel_sums(&gy, bsz, *cout, geom.col_cols(), gb);
                        }
                        put(&mut grads, *b, gb);
                    }
                }
                Op::Deconv2d { x, w, b, geom, cin } => {
                    let bsz = node.value.shape()[0];
                    let mut gx = take(&mut grads, *x);
                    let mut gw = take(&mut grads, *w);
                    kernels::deconv2d_backward(val(*x), val(*w), &gy, bsz, *cin, geom, gx.as_deref_mut(), gw.as_deref_mut());
                    put(&mut grads, *x, gx);
                    put(&mut grads, *w, gw);
                    if let Some(b) = b {
                        let mut gb = take(&mut grads, *b);
                        if let Some(gb) = gb.as_deref_mut() {
                            channel_sums(&gy, bsz, geom.channels, geom.in_h * geom.in_w, gb);
                        }
                        put(&mut grads, *b, gb);
                    }
                }
                Op::MaxPool2d { x, argmax } | Op::RoiPool { x, argmax } => {
                    let mut gx = take(&mut grads, *x);
                    if let Some(g) = gx.as_deref_mut() {
                        for (o, &src) in argmax.iter().enumerate() {
                            g[src] += gy[o];
                        }
                    }
                    put(&mut grads, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let (n, din) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    let dout = nodes[w.0].value.shape()[0];
                    let mut gx = take(&mut grads, *x);
                    if let Some(g) = gx.as_deref_mut() {
                        kernels::matmul_acc(&gy, val(*w), g, n, dout, din);
                    }
                    put(&mut grads, *x, gx);
                    let mut gw = take(&mut grads, *w);
                    if let Some(g) = gw.as_deref_mut() {
                        kernels::matmul_at_acc(&gy, val(*x), g, n, dout, din);
                    }
                    put(&mut grads, *w, gw);
                    if let Some(b) = b {
                        let mut gb = take(&mut grads, *b);
                        if let Some(g) = gb.as_deref_mut() {
                            for row in gy.chunks(dout) {
                                kernels::axpy(1.0, row, g);
                            }
                        }
                        put(&mut grads, *b, gb);
                    }
                }
                Op::Embedding { table, indices } => {
                    let d = nodes[table.0].value.shape()[1];
                    let mut gt = take(&mut grads, *table);
                    if let Some(g) = gt.as_deref_mut() {
                        for (r, &idx) in indices.iter().enumerate() {
                            kernels::axpy(1.0, &gy[r * d..(r + 1) * d], &mut g[idx * d..(idx + 1) * d]);
                        }
                    }
                    put(&mut grads, *table, gt);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    accumulate(&mut grads, nodes, *a, |g| kernels::axpy(1.0, &gy, g));
                    accumulate(&mut grads, nodes, *b, |g| kernels::axpy(sign, &gy, g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                    accumulate(&mut grads, nodes, *a, |g| {
                        for k in 0..g.len() {
                            g[k] += gy[k] * bv[k];
                        }
                    });
                    accumulate(&mut grads, nodes, *b, |g| {
                        for k in 0..g.len() {
                            g[k] += gy[k] * av[k];
                        }
                    });
                }
                Op::Scale(x, c) => accumulate(&mut grads, nodes, *x, |g| kernels::axpy(*c, &gy, g)),
                Op::AddScalar(x) | Op::Reshape(x) => accumulate(&mut grads, nodes, *x, |g| kernels::axpy(1.0, &gy, g)),
                Op::Exp(x) | Op::Sigmoid(x) | Op::Relu(x) => {
                    let y = node.value.data();
                    let xv = val(*x);
                    let kind = &node.op;
                    accumulate(&mut grads, nodes, *x, |g| {
                        for k in 0..g.len() {
                            let d = match kind {
                                Op::Exp(_) => y[k],
                                Op::Sigmoid(_) => y[k] * (1.0 - y[k]),
                                _ => f64::from(u8::from(xv[k] > 0.0)),
                            };
                            g[k] += gy[k] * d;
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap_or(&1);
                    accumulate(&mut grads, nodes, *x, |g| {
                        for r in 0..y.len() / d {
                            let (ys, gs) = (&y[r * d..(r + 1) * d], &gy[r * d..(r + 1) * d]);
                            let inner = kernels::dot(ys, gs);
                            for k in 0..d {
                                g[r * d + k] += ys[k] * (gs[k] - inner);
                            }
                        }
                    });
                }
                Op::Sum(x) => accumulate(&mut grads, nodes, *x, |g| g.iter_mut().for_each(|v| *v += gy[0])),
                Op::Concat { inputs, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis] * inner;
                    let mut offset = 0;
                    for v in inputs {
                        let len = nodes[v.0].value.shape()[*axis] * inner;
                        accumulate(&mut grads, nodes, *v, |g| {
                            for o in 0..outer {
                                kernels::axpy(1.0, &gy[o * total + offset..o * total + offset + len], &mut g[o * len..(o + 1) * len]);
                            }
                        });
                        offset += len;
                    }
                }
                Op::Gather { x, indices } => accumulate(&mut grads, nodes, *x, |g| {
                    for (o, &i) in indices.iter().enumerate() {
                        g[i] += gy[o];
                    }
                }),
                Op::RepeatRows { x } => accumulate(&mut grads, nodes, *x, |g| {
                    for row in gy.chunks(g.len()) {
                        kernels::axpy(1.0, row, g);
                    }
                }),
                Op::SmoothL1 { pred, target, beta } => {
                    let p = val(*pred);
                    accumulate(&mut grads, nodes, *pred, |g| {
                        for k in 0..g.len() {
                            let d = p[k] - target[k];
                            let dd = if d.abs() < *beta { d / beta } else { d.signum() };
                            g[k] += gy[0] * dd;
                        }
                    });
                }
                Op::BceLogits { logits, target } => {
                    let z = val(*logits);
                    accumulate(&mut grads, nodes, *logits, |g| {
                        for k in 0..g.len() {
                            g[k] += gy[0] * (sigmoid(z[k]) - target[k]);
                        }
                    });
                }
                Op::CrossEntropy { logits, labels } => {
                    let z = val(*logits);
                    let c = nodes[logits.0].value.shape()[1];
                    accumulate(&mut grads, nodes, *logits, |g| {
                        for (r, &l) in labels.iter().enumerate() {
                            let mut p = z[r * c..(r + 1) * c].to_vec();
                            softmax_in_place(&mut p);
                            p[l] -= 1.0;
                            kernels::axpy(gy[0], &p, &mut g[r * c..(r + 1) * c]);
                        }
                    });
                }
            }
        }
        Ok(Gradients { leaves, params: self.params.clone() })
    }
}

fn put(grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
    if g.is_some() {
        grads[v.0] = g;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], batch: usize, c: usize, plane: usize) {
    for b in 0..batch {
        for ch in 0..c {
            let s = &mut out[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            s.iter_mut().for_each(|v| *v += bias[ch]);
        }
    }
}

fn channel_sums(gy: &[f64], batch: usize, c: usize, plane: usize, out: &mut [f64]) {
    for b in 0..batch {
        for ch in 0..c {
            out[ch] += gy[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

pub fn smooth_l1_value(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta { 0.5 * d * d / beta } else { a - 0.5 * beta }
}
