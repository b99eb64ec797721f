//! Forward kernels and their adjoints.
//!
//! All loops run in a fixed order, so results are bit-reproducible for
//! identical inputs. The traced versions in [`crate::autograd`] call into
//! these.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [batch, cin, h, w] = input.dims4()?;
        let [cout, wcin, kh, kw] = weights.dims4()?;
        if wcin != cin {
            return Err(Error::mismatch("conv2d", input.shape(), weights.shape()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel extents must be odd, got {kh}x{kw}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
            ));
        }
        Ok(ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unrolls one image `[cin, h, w]` into columns `[cin*kh*kw, oh*ow]`.
fn im2col(g: &ConvGeom, image: &[f32], cols: &mut [f32]) {
    let npix = g.out_pixels();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatters columns back onto an image, accumulating overlaps.
fn col2im(g: &ConvGeom, cols: &[f32], image: &mut [f32]) {
    let npix = g.out_pixels();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
fn matmul_bt_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] += dot(a_row, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn matmul_at_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Eight-lane dot product; the fixed lane split keeps the summation order
/// independent of the target's vector width.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    s + tail
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is `[b, cin, h, w]`, `weights` is `[cout, cin, kh, kw]` with odd
/// kernel extents. The output is `[b, cout, h', w']` with
/// `h' = (h + 2*padding - kh) / stride + 1`.
pub fn conv2d(input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_bias(input, weights, None, stride, padding)
}

/// [`conv2d`] followed by a per-output-channel bias.
pub fn conv2d_bias(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input, weights, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::mismatch("conv2d bias", b.shape(), &[g.cout]));
        }
    }
    let npix = g.out_pixels();
    let klen = g.patch_len();
    let mut out = vec![0.0f32; g.batch * g.cout * npix];
    let mut cols = vec![0.0f32; klen * npix];
    let in_stride = g.cin * g.h * g.w;
    for n in 0..g.batch {
        im2col(&g, &input.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
        let dst = &mut out[n * g.cout * npix..(n + 1) * g.cout * npix];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(npix).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        matmul_acc(weights.data(), &cols, dst, g.cout, klen, npix);
    }
    Tensor::new(&[g.batch, g.cout, g.oh, g.ow], out)
}

/// Adjoint of [`conv2d_bias`]: returns `(d_input, d_weights, d_bias)`.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_weights: bool,
    need_bias: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeom::new(input, weights, stride, padding)?;
    let npix = g.out_pixels();
    let klen = g.patch_len();
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * npix;
    let mut d_in = need_input.then(|| vec![0.0f32; input.len()]);
    let mut d_w = need_weights.then(|| vec![0.0f32; weights.len()]);
    let mut d_b = need_bias.then(|| vec![0.0f32; g.cout]);
    let mut cols = vec![0.0f32; klen * npix];
    let mut dcols = vec![0.0f32; klen * npix];
    for n in 0..g.batch {
        let dy = &grad_out.data()[n * out_stride..(n + 1) * out_stride];
        if let Some(dw) = d_w.as_mut() {
            im2col(&g, &input.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
            matmul_bt_acc(dy, &cols, dw, g.cout, npix, klen);
        }
        if let Some(db) = d_b.as_mut() {
            for (co, chunk) in dy.chunks(npix).enumerate() {
                db[co] += chunk.iter().sum::<f32>();
            }
        }
        if let Some(dx) = d_in.as_mut() {
            dcols.fill(0.0);
            matmul_at_acc(weights.data(), dy, &mut dcols, g.cout, klen, npix);
            col2im(&g, &dcols, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
    }
    Ok((
        d_in.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        d_w.map(|d| Tensor::new(weights.shape(), d)).transpose()?,
        d_b.map(|d| Tensor::new(&[g.cout], d)).transpose()?,
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// 2x2 max pooling with stride 2. Spatial extents must be even.
pub fn maxpool2d(x: &Tensor) -> Result<Tensor> {
    maxpool2d_with_indices(x).map(|(t, _)| t)
}

pub(crate) fn maxpool2d_with_indices(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let [b, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "maxpool2d",
            format!("spatial extents must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; b * c * oh * ow];
    let mut idx = vec![0u32; out.len()];
    let src = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out[o] = src[best];
                idx[o] = best as u32;
            }
        }
    }
    Ok((Tensor::new(&[b, c, oh, ow], out)?, idx))
}

/// Nearest-neighbour 2x upsampling of `[b, c, h, w]`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; b * c * oh * ow];
    let src = x.data();
    for plane in 0..b * c {
        for y in 0..oh {
            let s = &src[plane * h * w + (y / 2) * w..plane * h * w + (y / 2 + 1) * w];
            let d = &mut out[plane * oh * ow + y * ow..plane * oh * ow + (y + 1) * ow];
            for (x, v) in d.iter_mut().enumerate() {
                *v = s[x / 2];
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

pub(crate) fn upsample2x_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let [b, c, h, w] = grad_out.dims4()?;
    let (ih, iw) = (h / 2, w / 2);
    let mut out = vec![0.0f32; b * c * ih * iw];
    let g = grad_out.data();
    for plane in 0..b * c {
        for y in 0..h {
            for x in 0..w {
                out[plane * ih * iw + (y / 2) * iw + x / 2] += g[plane * h * w + y * w + x];
            }
        }
    }
    Tensor::new(input_shape, out)
}

/// Mean over the spatial extents: `[b, c, h, w] -> [b, c]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    let hw = h * w;
    let out = x
        .data()
        .chunks(hw)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Tensor::new(&[b, c], out)
}

/// Concatenates two `[b, _, h, w]` tensors along channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::mismatch("concat_channels", a.shape(), b.shape()));
    }
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (sa + sb));
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
        out.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
    }
    Tensor::new(&[n, ca + cb, h, w], out)
}

/// `x[n, in] * w[out, in]^T -> [n, out]`
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let [n, din] = x.dims2()?;
    let [dout, win] = w.dims2()?;
    if din != win {
        return Err(Error::mismatch("linear", x.shape(), w.shape()));
    }
    let mut out = vec![0.0f32; n * dout];
    matmul_bt_acc(x.data(), w.data(), &mut out, n, din, dout);
    Tensor::new(&[n, dout], out)
}

pub(crate) fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let [n, din] = x.dims2()?;
    let [dout, _] = w.dims2()?;
    let mut dx = vec![0.0f32; n * din];
    matmul_acc(grad_out.data(), w.data(), &mut dx, n, dout, din);
    let mut dw = vec![0.0f32; dout * din];
    matmul_at_acc(grad_out.data(), x.data(), &mut dw, n, dout, din);
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(w.shape(), dw)?))
}

/// Plain stochastic gradient descent: `p <- p - lr * g` for every pair.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::invalid("sgd_step", format!("lr must be positive, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(Error::invalid(
            "sgd_step",
            format!("{} params but {} grads", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::mismatch("sgd_step", p.shape(), g.shape()));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}
