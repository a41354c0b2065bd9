//! Raw slice kernels behind the differentiable ops.
//!
//! Convolution is lowered to im2col + row-axpy products. Transposed
//! convolution reuses the same column layout with the roles of input and
//! output swapped, so the two are exact adjoints of each other.

/// Geometry of a 2-D correlation `in_h × in_w → out_h × out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution; `None` if the kernel does not fit.
    pub fn conv(channels: usize, in_h: usize, in_w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kh > in_h + 2 * pad || kw > in_w + 2 * pad {
            return None;
        }
        Some(ConvGeom {
            channels,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Geometry of the correlation whose adjoint is a transposed convolution
    /// from `h × w` up to `(h-1)·stride - 2·pad + k`.
    pub fn deconv(channels: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h == 0 || w == 0 {
            return None;
        }
        let big_h = ((h - 1) * stride + kh).checked_sub(2 * pad)?;
        let big_w = ((w - 1) * stride + kw).checked_sub(2 * pad)?;
        if big_h == 0 || big_w == 0 {
            return None;
        }
        Some(ConvGeom {
            channels,
            in_h: big_h,
            in_w: big_w,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: w,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output positions `[lo, hi)` along one axis whose tap `k` lands inside
    /// `0..len`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k { (self.pad - k).div_ceil(s) } else { 0 };
        let hi = if len + self.pad > k { ((len - 1 + self.pad - k) / s + 1).min(out_len) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Unfolds one image `[C, in_h, in_w]` into `[C·kh·kw, out_h·out_w]`.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.col_cols();
    cols.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            let (oh_lo, oh_hi) = g.valid_range(ki, g.in_h, g.out_h);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                let (ow_lo, ow_hi) = g.valid_range(kj, g.in_w, g.out_w);
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + ki - g.pad;
                    let src = &plane[ih * g.in_w..(ih + 1) * g.in_w];
                    let d = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if g.stride == 1 {
                        let off = ow_lo + kj - g.pad;
                        d[ow_lo..ow_hi].copy_from_slice(&src[off..off + (ow_hi - ow_lo)]);
                    } else {
                        for ow in ow_lo..ow_hi {
                            d[ow] = src[ow * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[C, in_h, in_w]`.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            let (oh_lo, oh_hi) = g.valid_range(ki, g.in_h, g.out_h);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                let (ow_lo, ow_hi) = g.valid_range(kj, g.in_w, g.out_w);
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + ki - g.pad;
                    let dst = &mut plane[ih * g.in_w..(ih + 1) * g.in_w];
                    let s = &src[oh * g.out_w..(oh + 1) * g.out_w];
                    for ow in ow_lo..ow_hi {
                        dst[ow * g.stride + kj - g.pad] += s[ow];
                    }
                }
            }
        }
    }
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise the reduction.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `out[m, :] += Σ_k a[m, k] · b[k, :]` with `a: [m, k]`, `b: [k, n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

/// `out[k, :] += Σ_m a[m, k] · b[m, :]` with `a: [m, k]`, `b: [m, n]`.
pub fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, brow, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

/// `out[m, k] += Σ_n a[m, n] · b[k, n]` with `a: [m, n]`, `b: [k, n]`.
pub fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// Batched forward correlation. `w: [Cout, Cin·kh·kw]`.
pub fn conv2d_forward(x: &[f64], w: &[f64], batch: usize, cout: usize, g: &ConvGeom, out: &mut [f64]) {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_sz = g.channels * g.in_h * g.in_w;
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..batch {
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        matmul_acc(w, &cols, &mut out[b * cout * ncol..(b + 1) * cout * ncol], cout, rows, ncol);
    }
}

/// Gradients of [`conv2d_forward`]; either output slot may be skipped.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    batch: usize,
    cout: usize,
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_sz = g.channels * g.in_h * g.in_w;
    let mut cols = vec![0.0; rows * ncol];
    let mut dcols = vec![0.0; rows * ncol];
    for b in 0..batch {
        let dyb = &dy[b * cout * ncol..(b + 1) * cout * ncol];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
            matmul_bt_acc(dyb, &cols, dw, cout, rows, ncol);
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcols.iter_mut().for_each(|v| *v = 0.0);
            matmul_at_acc(w, dyb, &mut dcols, cout, rows, ncol);
            col2im(&dcols, g, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
}

/// Batched transposed convolution. `x: [B, Cin, h, w]`, `w: [Cin, Cout·kh·kw]`,
/// `g` built by [`ConvGeom::deconv`] with `channels = Cout`.
pub fn deconv2d_forward(x: &[f64], w: &[f64], batch: usize, cin: usize, g: &ConvGeom, out: &mut [f64]) {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let out_sz = g.channels * g.in_h * g.in_w;
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..batch {
        cols.iter_mut().for_each(|v| *v = 0.0);
        matmul_at_acc(w, &x[b * cin * ncol..(b + 1) * cin * ncol], &mut cols, cin, rows, ncol);
        col2im(&cols, g, &mut out[b * out_sz..(b + 1) * out_sz]);
    }
}

pub fn deconv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    batch: usize,
    cin: usize,
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let out_sz = g.channels * g.in_h * g.in_w;
    let mut dcols = vec![0.0; rows * ncol];
    for b in 0..batch {
        im2col(&dy[b * out_sz..(b + 1) * out_sz], g, &mut dcols);
        if let Some(dx) = dx.as_deref_mut() {
            matmul_acc(w, &dcols, &mut dx[b * cin * ncol..(b + 1) * cin * ncol], cin, rows, ncol);
        }
        if let Some(dw) = dw.as_deref_mut() {
            matmul_bt_acc(&x[b * cin * ncol..(b + 1) * cin * ncol], &dcols, dw, cin, rows, ncol);
        }
    }
}

/// Integer footprint of a region on a feature map: cells `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Bin `i` of `n` over `[start, start + len)`; never empty.
pub fn pool_bin(start: usize, len: usize, i: usize, n: usize) -> (usize, usize) {
    let lo = start + (i * len) / n;
    let hi = start + ((i + 1) * len).div_ceil(n);
    (lo, hi.max(lo + 1))
}

/// Max-pools each rect of `x: [C, H, W]` into `[C, ph, pw]` cells, appending
/// to `out` and recording flat argmax indices into `x`.
pub fn roi_pool_one(x: &[f64], c: usize, h: usize, w: usize, r: &CellRect, ph: usize, pw: usize, out: &mut Vec<f64>, argmax: &mut Vec<usize>) {
    for ch in 0..c {
        let plane = ch * h * w;
        for i in 0..ph {
            let (y0, y1) = pool_bin(r.y0, r.y1 - r.y0, i, ph);
            for j in 0..pw {
                let (x0, x1) = pool_bin(r.x0, r.x1 - r.x0, j, pw);
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = plane + y0 * w + x0;
                for yy in y0..y1.min(h) {
                    for xx in x0..x1.min(w) {
                        let idx = plane + yy * w + xx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(x[best_idx]);
                argmax.push(best_idx);
            }
        }
    }
}
