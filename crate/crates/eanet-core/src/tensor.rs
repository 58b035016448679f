//! Tensor primitives on `[C, H, W]` feature maps: convolution (im2col +
//! matrix multiply), max pooling, local response normalization, ReLU,
//! fully connected layers, and softmax.
//!
//! Forward functions return whatever their backward pass needs; every
//! backward pass is checked against finite differences in the tests.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};

/// Stride and padding for a convolution. `pad_before`/`pad_after` apply to
/// both spatial dimensions, so a 4x4 kernel with pad (1, 2) preserves the
/// input size at stride 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub pad_before: usize,
    pub pad_after: usize,
}

impl ConvCfg {
    /// Symmetric padding on all sides.
    pub fn new(stride: usize, pad: usize) -> Self {
        assert!(stride >= 1, "stride must be >= 1");
        Self {
            stride,
            pad_before: pad,
            pad_after: pad,
        }
    }

    pub fn asymmetric(stride: usize, pad_before: usize, pad_after: usize) -> Self {
        assert!(stride >= 1, "stride must be >= 1");
        Self {
            stride,
            pad_before,
            pad_after,
        }
    }

    pub fn out_dim(&self, in_dim: usize, k: usize) -> usize {
        (in_dim + self.pad_before + self.pad_after - k) / self.stride + 1
    }
}

/// Output positions whose input tap `o * stride + k_off - pad` lands inside
/// `[0, in_dim)`, as a half-open range of output indices.
fn valid_out_range(k_off: usize, pad: usize, stride: usize, in_dim: usize, out_dim: usize) -> (usize, usize) {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let hi = if in_dim + pad > k_off {
        ((in_dim + pad - k_off - 1) / stride + 1).min(out_dim)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col(x: &Array3<f64>, kh: usize, kw: usize, cfg: ConvCfg, oh: usize, ow: usize) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c_in * kh * kw, oh * ow));
    let xs = x.as_slice().expect("feature maps are standard layout");
    let cs = cols.as_slice_mut().expect("freshly allocated");
    let (s, p) = (cfg.stride, cfg.pad_before);
    for c in 0..c_in {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_out_range(ky, p, s, h, oh);
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let (ox_lo, ox_hi) = valid_out_range(kx, p, s, w, ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let src_base = (c * h + iy) * w + kx + ox_lo * s - p;
                    let dst_base = row * (oh * ow) + oy * ow;
                    if s == 1 {
                        let n = ox_hi - ox_lo;
                        cs[dst_base + ox_lo..dst_base + ox_hi]
                            .copy_from_slice(&xs[src_base..src_base + n]);
                    } else {
                        let src = &xs[src_base..];
                        let dst = &mut cs[dst_base + ox_lo..dst_base + ox_hi];
                        for (d, sv) in dst.iter_mut().zip(src.iter().step_by(s)) {
                            *d = *sv;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add transpose of [`im2col`].
fn col2im(
    cols: &Array2<f64>,
    shape: (usize, usize, usize),
    kh: usize,
    kw: usize,
    cfg: ConvCfg,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let (c_in, h, w) = shape;
    let mut x = Array3::<f64>::zeros(shape);
    let xs = x.as_slice_mut().expect("freshly allocated");
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let (s, p) = (cfg.stride, cfg.pad_before);
    for c in 0..c_in {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_out_range(ky, p, s, h, oh);
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let (ox_lo, ox_hi) = valid_out_range(kx, p, s, w, ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let dst_base = (c * h + iy) * w + kx + ox_lo * s - p;
                    let src_base = row * (oh * ow) + oy * ow;
                    let src = &cs[src_base + ox_lo..src_base + ox_hi];
                    if s == 1 {
                        for (d, sv) in xs[dst_base..dst_base + src.len()].iter_mut().zip(src) {
                            *d += *sv;
                        }
                    } else {
                        let dst = &mut xs[dst_base..];
                        for (d, sv) in dst.iter_mut().step_by(s).zip(src) {
                            *d += *sv;
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution of `x` `[C_in, H, W]` with kernel `w` `[C_out, C_in, Kh, Kw]`.
pub fn conv2d_forward(
    x: &Array3<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    cfg: ConvCfg,
) -> Result<Array3<f64>> {
    let (c_in, h, w_in) = x.dim();
    let (c_out, wc_in, kh, kw) = w.dim();
    if wc_in != c_in {
        return Err(Error::DimensionMismatch {
            context: "conv input channels",
            expected: wc_in,
            got: c_in,
        });
    }
    if b.len() != c_out {
        return Err(Error::DimensionMismatch {
            context: "conv bias length",
            expected: c_out,
            got: b.len(),
        });
    }
    let h_pad = h + cfg.pad_before + cfg.pad_after;
    let w_pad = w_in + cfg.pad_before + cfg.pad_after;
    if h_pad < kh || w_pad < kw {
        return Err(Error::InputSmallerThanKernel {
            context: "conv2d",
            got: h,
            got2: w_in,
            kernel: kh.max(kw),
        });
    }
    let oh = cfg.out_dim(h, kh);
    let ow = cfg.out_dim(w_in, kw);
    let cols = im2col(x, kh, kw, cfg, oh, ow);
    let wmat = w
        .view()
        .into_shape_with_order((c_out, c_in * kh * kw))
        .expect("kernel is standard layout");
    let mut out = wmat.dot(&cols);
    for (mut row, &bi) in out.rows_mut().into_iter().zip(b.iter()) {
        row += bi;
    }
    Ok(out
        .into_shape_with_order((c_out, oh, ow))
        .expect("contiguous"))
}

/// Gradients of a scalar loss w.r.t. conv input, kernel, and bias.
pub fn conv2d_backward(
    x: &Array3<f64>,
    w: &Array4<f64>,
    cfg: ConvCfg,
    grad_out: &Array3<f64>,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (c_in, _, _) = x.dim();
    let (c_out, _, kh, kw) = w.dim();
    let (go_c, oh, ow) = grad_out.dim();
    assert_eq!(go_c, c_out, "grad_out channels");
    let cols = im2col(x, kh, kw, cfg, oh, ow);
    let go = grad_out
        .view()
        .into_shape_with_order((c_out, oh * ow))
        .expect("contiguous");
    let grad_b = go.sum_axis(Axis(1));
    let grad_w = go
        .dot(&cols.t())
        .into_shape_with_order((c_out, c_in, kh, kw))
        .expect("contiguous");
    let wmat = w
        .view()
        .into_shape_with_order((c_out, c_in * kh * kw))
        .expect("kernel is standard layout");
    let grad_cols = wmat.t().dot(&go);
    let grad_x = col2im(&grad_cols, x.dim(), kh, kw, cfg, oh, ow);
    (grad_x, grad_w, grad_b)
}

/// Elementwise max(x, 0). Non-positive inputs map to +0.0 exactly, so a
/// later residual add of zero cannot flip a sign bit.
pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient mask: passes where the forward input was strictly positive.
pub fn relu_backward(x: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(x, |gv, &xv| {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

/// Max pooling with square window `k` and the given stride (no padding).
/// Returns the pooled map and, per output cell, the flat `h * W + w` index
/// of the winning input within its channel.
pub fn maxpool2d_forward(x: &Array3<f64>, k: usize, stride: usize) -> (Array3<f64>, Array3<usize>) {
    let (c, h, w) = x.dim();
    assert!(h >= k && w >= k, "pool window {k} larger than input {h}x{w}");
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut arg = Array3::<usize>::zeros((c, oh, ow));
    let xs = x.as_slice().expect("feature maps are standard layout");
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..k {
                    let iy = oy * stride + ky;
                    let row = &plane[iy * w + ox * stride..iy * w + ox * stride + k];
                    for (kx, &v) in row.iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = iy * w + ox * stride + kx;
                        }
                    }
                }
                out[[ci, oy, ox]] = best;
                arg[[ci, oy, ox]] = best_idx;
            }
        }
    }
    (out, arg)
}

/// Scatter pooled gradients back to the winning input positions.
pub fn maxpool2d_backward(
    argmax: &Array3<usize>,
    in_shape: (usize, usize, usize),
    grad_out: &Array3<f64>,
) -> Array3<f64> {
    let mut gx = Array3::<f64>::zeros(in_shape);
    let w = in_shape.2;
    for ((c, oy, ox), g) in grad_out.indexed_iter() {
        let flat = argmax[[c, oy, ox]];
        gx[[c, flat / w, flat % w]] += *g;
    }
    gx
}

/// Local response normalization across channels:
/// `y[c] = x[c] / (k + alpha/n * sum_{c' in window(c)} x[c']^2)^beta`
/// with a window of `n` channels centered on `c` and clamped at the edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnParams {
    pub n: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            n: 5,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

fn lrn_window(c: usize, channels: usize, n: usize) -> (usize, usize) {
    let lo = c.saturating_sub(n / 2);
    let hi = (c + n / 2).min(channels - 1);
    (lo, hi)
}

/// Squared-sum scale term `k + alpha/n * sum x^2` per element.
fn lrn_scale(x: &Array3<f64>, p: LrnParams) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut s = Array3::<f64>::zeros((c, h, w));
    let coeff = p.alpha / p.n as f64;
    for ci in 0..c {
        let (lo, hi) = lrn_window(ci, c, p.n);
        for y in 0..h {
            for xw in 0..w {
                let mut sum = 0.0;
                for cj in lo..=hi {
                    let v = x[[cj, y, xw]];
                    sum += v * v;
                }
                s[[ci, y, xw]] = p.k + coeff * sum;
            }
        }
    }
    s
}

pub fn lrn_forward(x: &Array3<f64>, p: LrnParams) -> Array3<f64> {
    let s = lrn_scale(x, p);
    let mut out = x.clone();
    out.zip_mut_with(&s, |v, &sv| *v /= sv.powf(p.beta));
    out
}

pub fn lrn_backward(x: &Array3<f64>, p: LrnParams, grad_out: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let s = lrn_scale(x, p);
    let coeff = p.alpha / p.n as f64;
    let mut gx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        let (lo, hi) = lrn_window(ci, c, p.n);
        for y in 0..h {
            for xw in 0..w {
                let sv = s[[ci, y, xw]];
                let g = grad_out[[ci, y, xw]];
                gx[[ci, y, xw]] += g * sv.powf(-p.beta);
                // d y[ci] / d x[cj] for cj inside ci's window.
                let common = g * x[[ci, y, xw]] * (-p.beta) * sv.powf(-p.beta - 1.0) * coeff * 2.0;
                for cj in lo..=hi {
                    gx[[cj, y, xw]] += common * x[[cj, y, xw]];
                }
            }
        }
    }
    gx
}

/// Fully connected layer: `w [out, in] * x + b`.
pub fn linear_forward(x: &Array1<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    assert_eq!(x.len(), w.ncols(), "linear input length");
    assert_eq!(b.len(), w.nrows(), "linear bias length");
    w.dot(x) + b
}

pub fn linear_backward(
    x: &Array1<f64>,
    w: &Array2<f64>,
    grad_out: &Array1<f64>,
) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
    let grad_x = w.t().dot(grad_out);
    let grad_w = grad_out
        .view()
        .insert_axis(Axis(1))
        .dot(&x.view().insert_axis(Axis(0)));
    (grad_x, grad_w, grad_out.clone())
}

/// Numerically stable softmax over a slice.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Backward through softmax given its output `s` and upstream grads.
pub fn softmax_backward(s: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let dot: f64 = s.iter().zip(grad_out).map(|(si, gi)| si * gi).sum();
    s.iter()
        .zip(grad_out)
        .map(|(si, gi)| si * (gi - dot))
        .collect()
}
