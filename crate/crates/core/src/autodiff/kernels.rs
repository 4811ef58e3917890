//! Forward and backward kernels on flat NHWC buffers.
//!
//! Everything here works on plain slices; shape validation happens in the
//! tape before a kernel is called.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output spatial size is `ceil(in / stride)`; extra padding goes bottom/right.
    Same,
    /// No padding; output is `(in - k) / stride + 1`.
    Valid,
}

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weights: &[usize],
        bias: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let &[n, h, w, cin] = input else {
            return Err(Error::Rank {
                op: "conv2d",
                expected: 4,
                got: input.to_vec(),
            });
        };
        let &[kh, kw, wcin, cout] = weights else {
            return Err(Error::Rank {
                op: "conv2d",
                expected: 4,
                got: weights.to_vec(),
            });
        };
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        if wcin != cin {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "in_channels",
                expected: wcin,
                got: cin,
            });
        }
        if bias != [cout] {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "bias",
                expected: cout,
                got: bias.iter().product(),
            });
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if kh > h {
                    return Err(Error::Shape {
                        op: "conv2d",
                        dim: "height",
                        expected: kh,
                        got: h,
                    });
                }
                if kw > w {
                    return Err(Error::Shape {
                        op: "conv2d",
                        dim: "width",
                        expected: kw,
                        got: w,
                    });
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(Self {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.oh, self.ow, self.cout]
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Input offset of patch element (ky, kx) for output (b, oy, ox), if in bounds.
    #[inline]
    fn source(&self, b: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.h && ix < self.w).then(|| ((b * self.h + iy) * self.w + ix) * self.cin)
    }
}

/// Unrolls patches into a `(n·oh·ow) × (kh·kw·cin)` matrix.
fn im2col<'a, T: Scalar>(input: &'a [T], g: &ConvGeom) -> Cow<'a, [T]> {
    if g.is_pointwise() {
        return Cow::Borrowed(input);
    }
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let mut row = 0;
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some(src) = g.source(b, oy, ox, ky, kx) {
                            let off = (ky * g.kw + kx) * g.cin;
                            dst[off..off + g.cin].copy_from_slice(&input[src..src + g.cin]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Cow::Owned(cols)
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dinput: &mut [T]) {
    let patch = g.patch();
    let mut row = 0;
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some(dst) = g.source(b, oy, ox, ky, kx) {
                            let off = (ky * g.kw + kx) * g.cin;
                            for c in 0..g.cin {
                                dinput[dst + c] += src[off + c];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(o, &b)| *o += b);
    }
}

fn column_sums<T: Scalar>(m: &[T], cols: usize) -> Vec<T> {
    let mut s = vec![T::zero(); cols];
    for row in m.chunks_exact(cols) {
        s.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
    }
    s
}

pub fn conv2d_forward<T: Scalar>(input: &[T], weights: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = im2col(input, g);
    let mut out = vec![T::zero(); g.rows() * g.cout];
    T::gemm(
        g.rows(),
        g.patch(),
        g.cout,
        &cols,
        false,
        weights,
        false,
        &mut out,
        false,
    );
    add_bias(&mut out, bias);
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weights: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    weights: &[T],
    g: &ConvGeom,
    dout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let (rows, patch) = (g.rows(), g.patch());
    let dweights = need[1].then(|| {
        let cols = im2col(input, g);
        let mut dw = vec![T::zero(); patch * g.cout];
        T::gemm(
            patch, rows, g.cout, &cols, true, dout, false, &mut dw, false,
        );
        dw
    });
    let dinput = need[0].then(|| {
        let mut dcols = vec![T::zero(); rows * patch];
        T::gemm(
            rows, g.cout, patch, dout, false, weights, true, &mut dcols, false,
        );
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![T::zero(); input.len()];
            col2im_add(&dcols, g, &mut dx);
            dx
        }
    });
    let dbias = need[2].then(|| column_sums(dout, g.cout));
    ConvGrads {
        input: dinput,
        weights: dweights,
        bias: dbias,
    }
}

pub fn dense_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], n: usize, d: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    T::gemm(n, d, k, x, false, w, false, &mut out, false);
    add_bias(&mut out, b);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    n: usize,
    d: usize,
    k: usize,
    dout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let dx = need[0].then(|| {
        let mut dx = vec![T::zero(); n * d];
        T::gemm(n, k, d, dout, false, w, true, &mut dx, false);
        dx
    });
    let dw = need[1].then(|| {
        let mut dw = vec![T::zero(); d * k];
        T::gemm(d, n, k, x, true, dout, false, &mut dw, false);
        dw
    });
    let db = need[2].then(|| column_sums(dout, k));
    ConvGrads {
        input: dx,
        weights: dw,
        bias: db,
    }
}

/// 2×2 stride-2 max pooling; returns outputs and the flat input index each
/// output came from. Ties keep the first maximum in row-major window order.
pub fn maxpool2_forward<T: Scalar>(
    input: &[T],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(out.capacity());
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let at =
                        |dy: usize, dx: usize| ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    let mut best = at(0, 0);
                    for idx in [at(0, 1), at(1, 0), at(1, 1)] {
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                    out.push(input[best]);
                    argmax.push(best);
                }
            }
        }
    }
    (out, argmax)
}

/// Per-row cross-entropy of `softmax(logits)` against `labels`, averaged.
/// Returns the mean loss and the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], k: usize) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for ((row, p), &label) in logits
        .chunks_exact(k)
        .zip(probs.chunks_exact_mut(k))
        .zip(labels)
    {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (pi, &v) in p.iter_mut().zip(row) {
            *pi = (v - max).exp();
            z += *pi;
        }
        p.iter_mut().for_each(|pi| *pi /= z);
        total += z.ln() - (row[label] - max);
    }
    (total / T::from_usize(labels.len()).unwrap(), probs)
}
