//! Numeric kernels: matrix products, 2-D cross-correlation and its adjoints,
//! pooling, and the sign convention shared by every LRP rule.
//!
//! The `*_raw` functions operate on flat slices and accumulate into their
//! output; the autodiff graph calls them directly to avoid re-validating
//! shapes it already knows.

use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Stride and zero padding of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::new(1, 0)
    }
}

/// `floor((extent + 2p - k) / stride) + 1`, or an error when the kernel does not fit.
pub fn conv_output_extent(extent: usize, kernel: usize, geom: ConvGeometry) -> Result<usize> {
    if geom.stride == 0 {
        return Err(dim_err!("stride must be at least 1"));
    }
    let padded = extent + 2 * geom.padding;
    if kernel == 0 || kernel > padded {
        return Err(dim_err!(
            "kernel extent {kernel} does not fit padded input extent {padded}"
        ));
    }
    Ok((padded - kernel) / geom.stride + 1)
}

/// LRP sign convention: `1` for `x >= 0`, `-1` otherwise.
pub fn stable_sign(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::Numeric("stable_sign of NaN".into()));
    }
    Ok(if x >= 0.0 { 1.0 } else { -1.0 })
}

#[inline]
pub(crate) fn sign0(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        s => return Err(dim_err!("matmul lhs must be 2-D, got {:?}", s)),
    };
    let (k2, n) = match b.shape() {
        [k2, n] => (*k2, *n),
        s => return Err(dim_err!("matmul rhs must be 2-D, got {:?}", s)),
    };
    if k != k2 {
        return Err(dim_err!("matmul inner extents differ: {k} vs {k2}"));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `out[o] += Σ_i w[o, i] x[i]` for a row-major `rows × cols` matrix.
pub(crate) fn matvec_raw(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    let _ = rows;
}

/// `out[i] += Σ_o w[o, i] s[o]`.
pub(crate) fn matvec_t_raw(w: &[f64], cols: usize, s: &[f64], out: &mut [f64]) {
    for (row, &sv) in w.chunks_exact(cols).zip(s) {
        if sv == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += wv * sv;
        }
    }
}

/// `gw[o, i] += g[o] x[i]`.
pub(crate) fn outer_acc_raw(g: &[f64], x: &[f64], gw: &mut [f64]) {
    for (row, &gv) in gw.chunks_exact_mut(x.len()).zip(g) {
        if gv == 0.0 {
            continue;
        }
        for (o, &xv) in row.iter_mut().zip(x) {
            *o += gv * xv;
        }
    }
}

/// Shape bookkeeping shared by the convolution kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    pub fn new(input: (usize, usize, usize), weights: &[usize], geom: ConvGeometry) -> Result<Self> {
        let (f, wc, kh, kw) = match weights {
            [f, c, kh, kw] => (*f, *c, *kh, *kw),
            s => return Err(dim_err!("conv weights must be F×C×kh×kw, got {:?}", s)),
        };
        let (c, h, w) = input;
        if wc != c {
            return Err(dim_err!(
                "conv weights expect {wc} input channels, input has {c}"
            ));
        }
        let oh = conv_output_extent(h, kh, geom)?;
        let ow = conv_output_extent(w, kw, geom)?;
        Ok(Self { c, h, w, f, kh, kw, oh, ow, geom })
    }

    pub fn out_len(&self) -> usize {
        self.f * self.oh * self.ow
    }

    pub fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Output indices whose tap `k` lands inside an input extent `n`.
    #[inline]
    fn valid_range(&self, k: usize, n: usize, out_n: usize) -> (usize, usize) {
        let (s, p) = (self.geom.stride, self.geom.padding);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if n + p > k { ((n - 1 + p - k) / s + 1).min(out_n) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Visits every `(weight index, output row slice, input row offsets)` tap.
    /// `f(w_idx, out_base, in_base, ow_lo, ow_hi)` receives flat bases; the
    /// caller indexes `out_base + ow` and `in_base + ow * stride`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (s, p) = (self.geom.stride, self.geom.padding);
        for fo in 0..self.f {
            for ci in 0..self.c {
                for ki in 0..self.kh {
                    let (oh_lo, oh_hi) = self.valid_range(ki, self.h, self.oh);
                    for kj in 0..self.kw {
                        let (ow_lo, ow_hi) = self.valid_range(kj, self.w, self.ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let w_idx = ((fo * self.c + ci) * self.kh + ki) * self.kw + kj;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + ki - p;
                            let out_base = (fo * self.oh + oh) * self.ow;
                            // in index = in_base + ow * s, with in_base possibly "negative" before ow_lo
                            let in_base = (ci * self.h + ih) * self.w + kj;
                            f(w_idx, out_base, in_base, ow_lo, ow_hi);
                        }
                    }
                }
            }
        }
    }

    /// `out += conv(x, w)` without bias.
    pub fn forward_raw(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let (s, p) = (self.geom.stride, self.geom.padding);
        self.for_each_tap(|wi, ob, ib, lo, hi| {
            let wv = w[wi];
            if wv == 0.0 {
                return;
            }
            for ow in lo..hi {
                out[ob + ow] += wv * x[ib + ow * s - p];
            }
        });
    }

    /// `gin += convᵀ(g, w)`: the adjoint of `forward_raw` in its input.
    pub fn adjoint_raw(&self, g: &[f64], w: &[f64], gin: &mut [f64]) {
        let (s, p) = (self.geom.stride, self.geom.padding);
        self.for_each_tap(|wi, ob, ib, lo, hi| {
            let wv = w[wi];
            if wv == 0.0 {
                return;
            }
            for ow in lo..hi {
                gin[ib + ow * s - p] += wv * g[ob + ow];
            }
        });
    }

    /// `gw += ∂⟨g, conv(x, w)⟩/∂w`.
    pub fn weight_grad_raw(&self, g: &[f64], x: &[f64], gw: &mut [f64]) {
        let (s, p) = (self.geom.stride, self.geom.padding);
        self.for_each_tap(|wi, ob, ib, lo, hi| {
            let mut acc = 0.0;
            for ow in lo..hi {
                acc += g[ob + ow] * x[ib + ow * s - p];
            }
            gw[wi] += acc;
        });
    }
}

fn chw_of(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(dim_err!("{what} must be C×H×W, got {:?}", s)),
    }
}

/// Cross-correlation plus per-filter bias.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let dims = ConvDims::new(chw_of(input, "conv2d input")?, weights.shape(), geom)?;
    if bias.len() != dims.f {
        return Err(dim_err!(
            "conv2d bias has {} entries for {} filters",
            bias.len(),
            dims.f
        ));
    }
    let mut out = vec![0.0; dims.out_len()];
    for (chunk, &b) in out.chunks_exact_mut(dims.oh * dims.ow).zip(bias.data()) {
        chunk.fill(b);
    }
    dims.forward_raw(input.data(), weights.data(), &mut out);
    Ok(Tensor::from_parts(vec![dims.f, dims.oh, dims.ow], out))
}

/// Adjoint of a bias-free [`conv2d`] on an input of spatial size `input_hw`.
pub fn transposed_conv2d(
    grad_like: &Tensor,
    weights: &Tensor,
    geom: ConvGeometry,
    input_hw: (usize, usize),
) -> Result<Tensor> {
    let c = match weights.shape() {
        [_, c, _, _] => *c,
        s => return Err(dim_err!("conv weights must be F×C×kh×kw, got {:?}", s)),
    };
    let dims = ConvDims::new((c, input_hw.0, input_hw.1), weights.shape(), geom)?;
    if grad_like.shape() != [dims.f, dims.oh, dims.ow] {
        return Err(dim_err!(
            "transposed conv expects {:?}, got {:?}",
            [dims.f, dims.oh, dims.ow],
            grad_like.shape()
        ));
    }
    let mut out = vec![0.0; dims.in_len()];
    dims.adjoint_raw(grad_like.data(), weights.data(), &mut out);
    Ok(Tensor::from_parts(vec![c, input_hw.0, input_hw.1], out))
}

/// Winning flat input index for every max-pool output cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgmaxIndices {
    pub indices: Vec<usize>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

pub(crate) fn pool_dims(
    input: (usize, usize, usize),
    window: usize,
    stride: usize,
) -> Result<(usize, usize)> {
    let geom = ConvGeometry::new(stride, 0);
    Ok((
        conv_output_extent(input.1, window, geom)?,
        conv_output_extent(input.2, window, geom)?,
    ))
}

/// Max pooling over `window × window` cells; ties go to the first row-major element.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, ArgmaxIndices)> {
    let (c, h, w) = chw_of(input, "maxpool2d input")?;
    let (oh, ow) = pool_dims((c, h, w), window, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (ci * h + i * stride) * w + j * stride;
                for di in 0..window {
                    for dj in 0..window {
                        let k = (ci * h + i * stride + di) * w + j * stride + dj;
                        if x[k] > x[best] {
                            best = k;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![c, oh, ow], out),
        ArgmaxIndices {
            indices: idx,
            input_shape: vec![c, h, w],
            output_shape: vec![c, oh, ow],
        },
    ))
}

pub fn avgpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (c, h, w) = chw_of(input, "avgpool2d input")?;
    let (oh, ow) = pool_dims((c, h, w), window, stride)?;
    let x = input.data();
    let area = (window * window) as f64;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for di in 0..window {
                    for dj in 0..window {
                        acc += x[(ci * h + i * stride + di) * w + j * stride + dj];
                    }
                }
                out.push(acc / area);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}
