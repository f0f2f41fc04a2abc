//! Raw forward/backward kernels over NCHW buffers.
//!
//! Convolutions lay the patches of the whole batch side by side and issue a
//! single matrix product, so batch reductions happen inside the GEMM's inner
//! loop. The GEMM only splits work across output blocks, which keeps results
//! independent of the thread count.

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{gemm, Element, IntTensor, Mat, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output positions `o` along one axis for which `o*stride + k - pad`
    /// lands inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(s)
        } else {
            0
        };
        let hi = (extent + self.pad).saturating_sub(k).div_ceil(s).min(out);
        (lo.min(hi), hi)
    }
}

/// Writes the patch matrix of one sample into columns `off..off + out_h*out_w`
/// of `cols`, a row-major matrix with row length `ld`.
fn im2col<F: Element>(input: &[F], g: &Geometry, cols: &mut [F], ld: usize, off: usize) {
    let (h, w, k, s) = (g.height, g.width, g.kernel, g.stride);
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ki, h, g.out_h);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + ncol];
                let (ox_lo, ox_hi) = g.valid_range(kj, w, g.out_w);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        line.fill(F::zero());
                        continue;
                    }
                    let iy = oy * s + ki - g.pad;
                    let src = &plane[iy * w..(iy + 1) * w];
                    line[..ox_lo].fill(F::zero());
                    line[ox_hi..].fill(F::zero());
                    if s == 1 {
                        let ix0 = ox_lo + kj - g.pad;
                        line[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            line[ox] = src[ox * s + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `out` (not cleared).
fn col2im<F: Element>(cols: &[F], g: &Geometry, out: &mut [F], ld: usize, off: usize) {
    let (h, w, k, s) = (g.height, g.width, g.kernel, g.stride);
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ki, h, g.out_h);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld + off..row * ld + off + ncol];
                let (ox_lo, ox_hi) = g.valid_range(kj, w, g.out_w);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ki - g.pad;
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if s == 1 {
                        let ix0 = ox_lo + kj - g.pad;
                        for (d, &v) in dst[ix0..ix0 + (ox_hi - ox_lo)].iter_mut().zip(&line[ox_lo..ox_hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox * s + kj - g.pad] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Patch matrices of all samples side by side: `[rows, n * out_plane]`.
fn batch_im2col<F: Element>(x: &[F], n: usize, g: &Geometry) -> Vec<F> {
    let in_len = g.channels * g.height * g.width;
    let plane = g.col_cols();
    let ld = n * plane;
    let mut cols = vec![F::zero(); g.col_rows() * ld];
    for i in 0..n {
        im2col(&x[i * in_len..(i + 1) * in_len], g, &mut cols, ld, i * plane);
    }
    cols
}

/// Adjoint of [`batch_im2col`].
fn batch_col2im<F: Element>(cols: &[F], n: usize, g: &Geometry) -> Vec<F> {
    let in_len = g.channels * g.height * g.width;
    let plane = g.col_cols();
    let mut out = vec![F::zero(); n * in_len];
    for (i, chunk) in out.chunks_mut(in_len).enumerate() {
        col2im(cols, g, chunk, n * plane, i * plane);
    }
    out
}

/// `[n, c, plane]` to channel-major `[c, n * plane]`.
fn to_channel_major<F: Element>(x: &[F], n: usize, c: usize, plane: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let src = &x[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            out[(ch * n + i) * plane..(ch * n + i + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`to_channel_major`].
fn from_channel_major<F: Element>(x: &[F], n: usize, c: usize, plane: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let src = &x[(ch * n + i) * plane..(ch * n + i + 1) * plane];
            out[(i * c + ch) * plane..(i * c + ch + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (extent + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(invalid!("stride must be at least 1"));
    }
    Ok(())
}

/// Validated shape of a convolution weight `[out, in, k, k]`.
fn weight_dims<F: Element>(w: &Tensor<F>) -> Result<(usize, usize, usize)> {
    let (o, i, kh, kw) = w.dims4()?;
    if kh != kw {
        return Err(shape_err!("kernels must be square, got {kh}x{kw}"));
    }
    Ok((o, i, kh))
}

fn check_bias<F: Element>(bias: Option<&Tensor<F>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(shape_err!(
                "bias shape {:?} does not match {channels} channels",
                b.shape()
            ));
        }
    }
    Ok(())
}

fn add_bias<F: Element>(out: &mut [F], bias: Option<&Tensor<F>>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data().iter().cycle()) {
            for v in chunk {
                *v += bv;
            }
        }
    }
}

fn row_sums<F: Element>(m: &[F], rows: usize) -> Vec<F> {
    let len = m.len() / rows;
    m.chunks(len).map(|r| r.iter().copied().sum()).collect()
}

pub(crate) struct ConvGrads<F> {
    pub input: Option<Tensor<F>>,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

fn conv_geometry<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, Geometry)> {
    check_stride(stride)?;
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, wcin, k) = weight_dims(w)?;
    if wcin != cin {
        return Err(shape_err!(
            "convolution expects {wcin} input channels, got {cin}"
        ));
    }
    let (out_h, out_w) = match (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(shape_err!(
                "kernel {k} with padding {pad} does not fit input {h}x{wd}"
            ))
        }
    };
    Ok((
        n,
        cout,
        Geometry {
            channels: cin,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
            out_h,
            out_w,
        },
    ))
}

pub(crate) fn conv2d<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let (n, cout, g) = conv_geometry(x, w, stride, pad)?;
    check_bias(bias, cout)?;
    let plane = g.col_cols();
    let cols = batch_im2col(x.data(), n, &g);
    let mut out = vec![F::zero(); cout * n * plane];
    gemm(
        Mat::new(w.data(), cout, g.col_rows()),
        Mat::new(&cols, g.col_rows(), n * plane),
        F::zero(),
        &mut out,
    );
    let mut out = from_channel_major(&out, n, cout, plane);
    add_bias(&mut out, bias, plane);
    Tensor::new(&[n, cout, g.out_h, g.out_w], out)
}

pub(crate) fn conv2d_backward<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads<F>> {
    let (n, cout, g) = conv_geometry(x, w, stride, pad)?;
    if grad_out.shape() != [n, cout, g.out_h, g.out_w] {
        return Err(shape_err!("conv gradient has shape {:?}", grad_out.shape()));
    }
    let plane = g.col_cols();
    let rows = g.col_rows();
    let mut cols = batch_im2col(x.data(), n, &g);
    let gcm = to_channel_major(grad_out.data(), n, cout, plane);
    let gmat = Mat::new(&gcm, cout, n * plane);
    let mut dw = vec![F::zero(); cout * rows];
    gemm(gmat, Mat::new(&cols, rows, n * plane).t(), F::zero(), &mut dw);
    let input = if need_input {
        gemm(Mat::new(w.data(), cout, rows).t(), gmat, F::zero(), &mut cols);
        Some(Tensor::new(x.shape(), batch_col2im(&cols, n, &g))?)
    } else {
        None
    };
    Ok(ConvGrads {
        input,
        weight: Tensor::new(w.shape(), dw)?,
        bias: Tensor::new(&[cout], row_sums(&gcm, cout))?,
    })
}

/// Geometry of the convolution whose data-gradient a transposed convolution
/// computes: that convolution maps the transposed output back to `x`.
fn transposed_geometry<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, Geometry)> {
    check_stride(stride)?;
    let (n, cx, h, wd) = x.dims4()?;
    let (wcx, cy, k) = weight_dims(w)?;
    if wcx != cx {
        return Err(shape_err!(
            "transposed convolution expects {wcx} input channels, got {cx}"
        ));
    }
    let grow = |e: usize| ((e - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
    let (oh, ow) = match (grow(h), grow(wd)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err!("padding {pad} too large for kernel {k}")),
    };
    if conv_out(oh, k, stride, pad) != Some(h) || conv_out(ow, k, stride, pad) != Some(wd) {
        return Err(shape_err!(
            "transposed convolution geometry k={k} s={stride} p={pad} is not invertible"
        ));
    }
    Ok((
        n,
        cx,
        cy,
        Geometry {
            channels: cy,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        },
    ))
}

pub(crate) fn conv_transpose2d<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let (n, cx, cy, g) = transposed_geometry(x, w, stride, pad)?;
    check_bias(bias, cy)?;
    let in_plane = g.col_cols();
    let xcm = to_channel_major(x.data(), n, cx, in_plane);
    let mut cols = vec![F::zero(); g.col_rows() * n * in_plane];
    gemm(
        Mat::new(w.data(), cx, g.col_rows()).t(),
        Mat::new(&xcm, cx, n * in_plane),
        F::zero(),
        &mut cols,
    );
    let mut out = batch_col2im(&cols, n, &g);
    add_bias(&mut out, bias, g.height * g.width);
    Tensor::new(&[n, cy, g.height, g.width], out)
}

pub(crate) fn conv_transpose2d_backward<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads<F>> {
    let (n, cx, cy, g) = transposed_geometry(x, w, stride, pad)?;
    if grad_out.shape() != [n, cy, g.height, g.width] {
        return Err(shape_err!(
            "transposed conv gradient has shape {:?}",
            grad_out.shape()
        ));
    }
    let in_plane = g.col_cols();
    let rows = g.col_rows();
    let cols = batch_im2col(grad_out.data(), n, &g);
    let cmat = Mat::new(&cols, rows, n * in_plane);
    let xcm = to_channel_major(x.data(), n, cx, in_plane);
    let mut dw = vec![F::zero(); cx * rows];
    gemm(Mat::new(&xcm, cx, n * in_plane), cmat.t(), F::zero(), &mut dw);
    let input = if need_input {
        let mut d = vec![F::zero(); cx * n * in_plane];
        gemm(Mat::new(w.data(), cx, rows), cmat, F::zero(), &mut d);
        Some(Tensor::new(x.shape(), from_channel_major(&d, n, cx, in_plane))?)
    } else {
        None
    };
    let gcm = to_channel_major(grad_out.data(), n, cy, g.height * g.width);
    Ok(ConvGrads {
        input,
        weight: Tensor::new(w.shape(), dw)?,
        bias: Tensor::new(&[cy], row_sums(&gcm, cy))?,
    })
}

/// Non-overlapping 2x2 max pooling. Indices are the within-window flat
/// position `2*dy + dx` of the maximum; ties go to the smallest position.
pub(crate) fn maxpool2x2<F: Element>(x: &Tensor<F>) -> Result<(Tensor<F>, IntTensor)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("2x2 pooling needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * w + 2 * ox;
                let window = [plane[base], plane[base + 1], plane[base + w], plane[base + w + 1]];
                let mut best = 0;
                for p in 1..4 {
                    if window[p] > window[best] {
                        best = p;
                    }
                }
                out.push(window[best]);
                idx.push(best as u8);
            }
        }
    }
    Ok((
        Tensor::new(&[n, c, oh, ow], out)?,
        IntTensor::new(&[n, c, oh, ow], idx)?,
    ))
}

/// Scatter `y` to the stored window positions of a `2x` larger map.
pub(crate) fn max_unpool2x2<F: Element>(
    y: &Tensor<F>,
    indices: &IntTensor,
    out_shape: &[usize],
) -> Result<Tensor<F>> {
    let (n, c, h, w) = y.dims4()?;
    if indices.shape() != y.shape() {
        return Err(shape_err!(
            "pool indices {:?} do not match values {:?}",
            indices.shape(),
            y.shape()
        ));
    }
    if out_shape != [n, c, 2 * h, 2 * w] {
        return Err(shape_err!(
            "unpool target {out_shape:?} is not the 2x upsampling of {:?}",
            y.shape()
        ));
    }
    let ow = 2 * w;
    let mut out = vec![F::zero(); n * c * 4 * h * w];
    for (p, (vals, ids)) in y.data().chunks(h * w).zip(indices.data().chunks(h * w)).enumerate() {
        let plane = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for oy in 0..h {
            for ox in 0..w {
                let k = ids[oy * w + ox];
                if k > 3 {
                    return Err(Error::Corruption(format!(
                        "pool index {k} outside its 2x2 window"
                    )));
                }
                let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                plane[(2 * oy + dy) * ow + 2 * ox + dx] = vals[oy * w + ox];
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Picks `full` at the stored position of every 2x2 window; the adjoint of
/// [`max_unpool2x2`].
pub(crate) fn gather_windows<F: Element>(full: &Tensor<F>, indices: &IntTensor) -> Result<Tensor<F>> {
    let (n, c, h, w) = full.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    if indices.shape() != [n, c, oh, ow] {
        return Err(shape_err!("pool indices {:?} do not match", indices.shape()));
    }
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for (plane, ids) in full.data().chunks(h * w).zip(indices.data().chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let k = ids[oy * ow + ox] as usize;
                out.push(plane[(2 * oy + k / 2) * w + 2 * ox + k % 2]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Per-channel batch statistics: mean and biased variance over `N, H, W`.
pub(crate) fn channel_stats<F: Element>(x: &Tensor<F>) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let count = n * plane;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            s += x.data()[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count as f64;
        let mut q = 0.0;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            q += x.data()[off..off + plane]
                .iter()
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count as f64;
    }
    Ok((mean, var, count))
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel.
pub(crate) fn affine_normalize<F: Element>(
    x: &Tensor<F>,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || inv_std.len() != c {
        return Err(shape_err!("batchnorm parameters do not match {c} channels"));
    }
    let plane = h * w;
    let mut out = x.clone();
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            let m = F::of_f64(mean[ch]);
            let s = F::of_f64(inv_std[ch]);
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for v in &mut out.data_mut()[off..off + plane] {
                *v = g * ((*v - m) * s) + b;
            }
        }
    }
    Ok(out)
}

/// Per-channel sums `Σ g` and `Σ g·(x - mean)·inv_std`.
pub(crate) fn bn_reductions<F: Element>(
    x: &Tensor<F>,
    grad: &Tensor<F>,
    mean: &[f64],
    inv_std: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            for (xv, gv) in x.data()[off..off + plane].iter().zip(&grad.data()[off..off + plane]) {
                let g = gv.as_f64();
                sum_g[ch] += g;
                sum_gx[ch] += g * (xv.as_f64() - mean[ch]) * inv_std[ch];
            }
        }
    }
    Ok((sum_g, sum_gx))
}

/// Input gradient of training-mode batchnorm.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_train_input_grad<F: Element>(
    x: &Tensor<F>,
    grad: &Tensor<F>,
    gamma: &Tensor<F>,
    mean: &[f64],
    inv_std: &[f64],
    sum_g: &[f64],
    sum_gx: &[f64],
    count: usize,
) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let m = count as f64;
    let mut out = grad.clone();
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            let g = gamma.data()[ch].as_f64();
            let k = g * inv_std[ch] / m;
            for (o, xv) in out.data_mut()[off..off + plane]
                .iter_mut()
                .zip(&x.data()[off..off + plane])
            {
                let xhat = (xv.as_f64() - mean[ch]) * inv_std[ch];
                *o = F::of_f64(k * (m * o.as_f64() - sum_g[ch] - xhat * sum_gx[ch]));
            }
        }
    }
    Ok(out)
}

/// Per-channel scaling `grad * gamma * inv_std` (eval-mode batchnorm).
pub(crate) fn bn_eval_input_grad<F: Element>(
    grad: &Tensor<F>,
    gamma: &Tensor<F>,
    inv_std: &[f64],
) -> Result<Tensor<F>> {
    let (_, _, h, w) = grad.dims4()?;
    let plane = h * w;
    let mut out = grad.clone();
    let scale: Vec<F> = gamma.data().iter().zip(inv_std).map(|(&g, &s)| g * F::of_f64(s)).collect();
    for (plane_data, &s) in out.data_mut().chunks_mut(plane).zip(scale.iter().cycle()) {
        for v in plane_data {
            *v *= s;
        }
    }
    Ok(out)
}

/// Per-pixel softmax over the channel axis, stabilized by the pixel max.
pub(crate) fn softmax_channels<F: Element>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, k, h, w) = logits.dims4()?;
    let plane = h * w;
    let mut out = logits.clone();
    let d = out.data_mut();
    for i in 0..n {
        let base = i * k * plane;
        for p in 0..plane {
            let mut m = F::neg_infinity();
            for c in 0..k {
                m = m.max(d[base + c * plane + p]);
            }
            let mut z = F::zero();
            for c in 0..k {
                let e = (d[base + c * plane + p] - m).exp();
                d[base + c * plane + p] = e;
                z += e;
            }
            for c in 0..k {
                d[base + c * plane + p] = d[base + c * plane + p] / z;
            }
        }
    }
    Ok(out)
}

/// Mean cross-entropy of per-pixel softmax against integer targets.
pub(crate) fn softmax_ce<F: Element>(
    logits: &Tensor<F>,
    target: &IntTensor,
) -> Result<(F, Tensor<F>)> {
    let (n, k, h, w) = logits.dims4()?;
    if target.shape() != [n, h, w] {
        return Err(shape_err!(
            "target shape {:?} does not match logits {:?}",
            target.shape(),
            logits.shape()
        ));
    }
    if let Some(&bad) = target.data().iter().find(|&&t| t as usize >= k) {
        return Err(invalid!("target class {bad} out of range for {k} classes"));
    }
    let probs = softmax_channels(logits)?;
    let plane = h * w;
    let mut total = 0.0f64;
    for i in 0..n {
        for p in 0..plane {
            let t = target.data()[i * plane + p] as usize;
            let pt = probs.data()[(i * k + t) * plane + p].as_f64();
            total -= pt.max(1e-12).ln();
        }
    }
    Ok((F::of_f64(total / (n * plane) as f64), probs))
}

pub(crate) fn softmax_ce_grad<F: Element>(probs: &Tensor<F>, target: &IntTensor, upstream: F) -> Tensor<F> {
    let (n, k, h, w) = probs.dims4().expect("rank-4 probabilities");
    let plane = h * w;
    let scale = upstream / F::of_f64((n * plane) as f64);
    let mut g = probs.clone();
    let d = g.data_mut();
    for i in 0..n {
        for p in 0..plane {
            let t = target.data()[i * plane + p] as usize;
            d[(i * k + t) * plane + p] -= F::one();
        }
    }
    for v in d.iter_mut() {
        *v *= scale;
    }
    g
}

/// Source taps for align-corners-false bilinear resampling along one axis.
fn bilinear_taps(out: usize, extent: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_upsample<F: Element>(x: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    if factor == 0 {
        return Err(invalid!("upsampling factor must be at least 1"));
    }
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(oh, h, factor);
    let tx = bilinear_taps(ow, w, factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let v = |y: usize, xx: usize| plane[y * w + xx].as_f64();
                let top = v(y0, x0) * (1.0 - lx) + v(y0, x1) * lx;
                let bot = v(y1, x0) * (1.0 - lx) + v(y1, x1) * lx;
                out.push(F::of_f64(top * (1.0 - ly) + bot * ly));
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub(crate) fn bilinear_upsample_backward<F: Element>(
    grad_out: &Tensor<F>,
    in_shape: &[usize],
    factor: usize,
) -> Result<Tensor<F>> {
    let (n, c, h, w) = match in_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(shape_err!("bilinear input must be rank 4")),
    };
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(oh, h, factor);
    let tx = bilinear_taps(ow, w, factor);
    let mut out = vec![0.0f64; n * c * h * w];
    for (p, gplane) in grad_out.data().chunks(oh * ow).enumerate() {
        let plane = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = gplane[oy * ow + ox].as_f64();
                plane[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                plane[y0 * w + x1] += g * (1.0 - ly) * lx;
                plane[y1 * w + x0] += g * ly * (1.0 - lx);
                plane[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    Tensor::new(in_shape, out.into_iter().map(F::of_f64).collect())
}
