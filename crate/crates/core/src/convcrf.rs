//! Convolutional CRF refinement of per-pixel class probabilities.
//!
//! Pairwise potentials are truncated to a `k x k` window, which turns
//! message passing into a locally varying convolution. A Gaussian kernel
//! over a feature map `f` (`[b, d, h, w]`) is
//!
//! ```text
//! g[b, dx, dy, x, y] = exp( -sum_i |f_i[b, x, y] - f_i[b, x - dx, y - dy]|^2 / (2 theta_i^2) )
//! ```
//!
//! with offsets `dx, dy` in `-(k-1)/2 ..= (k-1)/2` and zero for offsets
//! leaving the image. Kernels merge as `K = sum_i w_i g_i`, and message
//! passing computes `Q[b, c, x, y] = sum_{dx,dy} K[b, dx, dy, x, y] F[b, c, x + dx, y + dy]`.
//!
//! The kernel compares a pixel with `(x - dx, y - dy)` while the message
//! reads `(x + dx, y + dy)`. [`crf_refine`] therefore builds its kernels in
//! [`KernelOrientation::Gather`], which is the offset-mirrored kernel, so the
//! similarity and the message refer to the same neighbour.
//!
//! `x` indexes rows and `y` columns throughout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::{Error, Result, Tensor};

const LOG_FLOOR: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// `f = (x, y)` in pixels.
    Spatial,
    /// `f = (x, y, R, G, B)`.
    Bilateral,
}

impl FeatureKind {
    pub fn dims(self) -> usize {
        match self {
            FeatureKind::Spatial => 2,
            FeatureKind::Bilateral => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub feature: FeatureKind,
    /// One positive bandwidth per feature dimension.
    pub theta: Vec<f32>,
    pub weight: f32,
}

impl KernelSpec {
    pub fn spatial(theta_xy: f32, weight: f32) -> Self {
        KernelSpec {
            feature: FeatureKind::Spatial,
            theta: vec![theta_xy; 2],
            weight,
        }
    }

    pub fn bilateral(theta_xy: f32, theta_rgb: f32, weight: f32) -> Self {
        KernelSpec {
            feature: FeatureKind::Bilateral,
            theta: vec![theta_xy, theta_xy, theta_rgb, theta_rgb, theta_rgb],
            weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != self.feature.dims() {
            return Err(Error::invalid(
                "KernelSpec",
                format!(
                    "{:?} kernel needs {} bandwidths, got {}",
                    self.feature,
                    self.feature.dims(),
                    self.theta.len()
                ),
            ));
        }
        if self.theta.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::invalid("KernelSpec", "every theta must be positive"));
        }
        if !self.weight.is_finite() {
            return Err(Error::invalid("KernelSpec", "merge weight must be finite"));
        }
        Ok(())
    }
}

/// One spatial kernel (theta 3 px) and one bilateral kernel (3 px, 0.1
/// colour units).
pub fn default_specs() -> Vec<KernelSpec> {
    vec![KernelSpec::spatial(3.0, 0.25), KernelSpec::bilateral(3.0, 0.1, 1.0)]
}

/// Which neighbour a kernel entry at offset `(dx, dy)` compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelOrientation {
    /// `(x - dx, y - dy)`, the kernel-matrix definition.
    Source,
    /// `(x + dx, y + dy)`, the neighbour read by [`message_pass`].
    Gather,
}

impl KernelOrientation {
    fn sign(self) -> isize {
        match self {
            KernelOrientation::Source => -1,
            KernelOrientation::Gather => 1,
        }
    }
}

/// Merged kernel matrix `[b, k, k, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStack {
    kernel: Tensor,
    filter_size: usize,
}

impl KernelStack {
    pub fn new(kernel: Tensor) -> Result<Self> {
        let [_, k1, k2, _, _] = kernel.dims5()?;
        if k1 != k2 || k1 % 2 == 0 {
            return Err(Error::invalid(
                "KernelStack",
                format!("offset axes must be equal and odd, got {k1}x{k2}"),
            ));
        }
        Ok(KernelStack {
            kernel,
            filter_size: k1,
        })
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn filter_size(&self) -> usize {
        self.filter_size
    }

    /// The kernel with both offset axes reversed.
    pub fn mirrored(&self) -> Self {
        KernelStack {
            kernel: mirror_offsets(&self.kernel).expect("validated rank-5 kernel"),
            filter_size: self.filter_size,
        }
    }
}

fn mirror_offsets(kernel: &Tensor) -> Result<Tensor> {
    let [b, k, _, h, w] = kernel.dims5()?;
    let plane = h * w;
    let mut out = kernel.zeros_like();
    for n in 0..b {
        for i in 0..k {
            for j in 0..k {
                let src = ((n * k + i) * k + j) * plane;
                let dst = ((n * k + (k - 1 - i)) * k + (k - 1 - j)) * plane;
                out.data_mut()[dst..dst + plane].copy_from_slice(&kernel.data()[src..src + plane]);
            }
        }
    }
    Ok(out)
}

/// Per-pixel class probabilities `[b, c, h, w]`: non-negative, summing to 1
/// over classes within 1e-5.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(Tensor);

impl ProbMap {
    pub fn new(probs: Tensor) -> Result<Self> {
        let [b, c, h, w] = probs.dims4()?;
        let plane = h * w;
        let d = probs.data();
        for n in 0..b {
            for p in 0..plane {
                let mut sum = 0.0f64;
                for ch in 0..c {
                    let v = d[(n * c + ch) * plane + p];
                    if !(v >= 0.0) || !v.is_finite() {
                        return Err(Error::invalid(
                            "ProbMap",
                            format!("invalid probability {v} at pixel {}", n * plane + p),
                        ));
                    }
                    sum += v as f64;
                }
                if sum == 0.0 {
                    return Err(Error::DegenerateProbabilities {
                        index: n * plane + p,
                    });
                }
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(Error::invalid(
                        "ProbMap",
                        format!("probabilities at pixel {} sum to {sum}", n * plane + p),
                    ));
                }
            }
        }
        Ok(ProbMap(probs))
    }

    /// Two-class map from a foreground probability plane `[h, w]`.
    pub fn from_foreground(h: usize, w: usize, fg: &[f32]) -> Result<Self> {
        if fg.len() != h * w {
            return Err(Error::mismatch("ProbMap::from_foreground", &[h, w], &[fg.len()]));
        }
        let mut data = Vec::with_capacity(2 * h * w);
        data.extend(fg.iter().map(|&p| 1.0 - p));
        data.extend_from_slice(fg);
        ProbMap::new(Tensor::new(&[1, 2, h, w], data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> [usize; 4] {
        self.0.dims4().expect("validated rank-4")
    }

    /// Per-pixel argmax over classes, `[b * h * w]`; ties go to the lower class.
    pub fn argmax(&self) -> Vec<u8> {
        let [b, c, h, w] = self.dims();
        let plane = h * w;
        let d = self.0.data();
        let mut out = Vec::with_capacity(b * plane);
        for n in 0..b {
            for p in 0..plane {
                let mut best = 0;
                for ch in 1..c {
                    if d[(n * c + ch) * plane + p] > d[(n * c + best) * plane + p] {
                        best = ch;
                    }
                }
                out.push(best as u8);
            }
        }
        out
    }
}

/// Feature map `[b, d, h, w]` of a `[b, 3, h, w]` image.
pub fn feature_map(kind: FeatureKind, image: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = image.dims4()?;
    if c != 3 {
        return Err(Error::invalid("feature_map", format!("expects RGB image, got {c} channels")));
    }
    let d = kind.dims();
    let plane = h * w;
    let mut out = Vec::with_capacity(b * d * plane);
    for n in 0..b {
        out.extend((0..plane).map(|p| (p / w) as f32));
        out.extend((0..plane).map(|p| (p % w) as f32));
        if kind == FeatureKind::Bilateral {
            out.extend_from_slice(&image.data()[n * 3 * plane..(n + 1) * 3 * plane]);
        }
    }
    Tensor::new(&[b, d, h, w], out)
}

fn check_filter(k: usize) -> Result<isize> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::invalid("compute_kernel", format!("filter size must be odd, got {k}")));
    }
    Ok((k / 2) as isize)
}

fn check_theta(theta: &[f32], dims: usize) -> Result<()> {
    if theta.len() != dims {
        return Err(Error::invalid(
            "compute_kernel",
            format!("{dims} feature dimensions but {} bandwidths", theta.len()),
        ));
    }
    if theta.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::invalid("compute_kernel", "theta must be positive"));
    }
    Ok(())
}

/// Row/column range of pixels whose neighbour at offset `off` is in bounds.
fn valid_range(off: isize, n: usize) -> core::ops::Range<usize> {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off.max(0)).max(0) as usize;
    lo..hi.max(lo)
}

/// Gaussian kernel matrix of `features` (`[b, d, h, w]`), shape `[b, k, k, h, w]`.
pub fn compute_kernel(features: &Tensor, theta: &[f32], filter_size: usize) -> Result<Tensor> {
    gaussian_kernel(features, theta, filter_size, KernelOrientation::Source)
}

pub(crate) fn gaussian_kernel(
    features: &Tensor,
    theta: &[f32],
    filter_size: usize,
    orientation: KernelOrientation,
) -> Result<Tensor> {
    let r = check_filter(filter_size)?;
    let [b, d, h, w] = features.dims4()?;
    check_theta(theta, d)?;
    let k = filter_size;
    let plane = h * w;
    let coef: Vec<f32> = theta.iter().map(|&t| 1.0 / (2.0 * t * t)).collect();
    let f = features.data();
    let sign = orientation.sign();
    let mut out = vec![0.0f32; b * k * k * plane];
    let mut acc = vec![0.0f32; w];
    for n in 0..b {
        for i in 0..k {
            let dx = (i as isize - r) * sign;
            for j in 0..k {
                let dy = (j as isize - r) * sign;
                let base = ((n * k + i) * k + j) * plane;
                let cols = valid_range(dy, w);
                for x in valid_range(dx, h) {
                    let nx = (x as isize + dx) as usize;
                    acc[cols.clone()].fill(0.0);
                    for (dim, &c) in coef.iter().enumerate() {
                        let fp = (n * d + dim) * plane;
                        let row = &f[fp + x * w..fp + (x + 1) * w];
                        let nrow = &f[fp + nx * w..fp + (nx + 1) * w];
                        for y in cols.clone() {
                            let diff = row[y] - nrow[(y as isize + dy) as usize];
                            acc[y] += c * diff * diff;
                        }
                    }
                    let dst = &mut out[base + x * w..base + (x + 1) * w];
                    for y in cols.clone() {
                        dst[y] = libm::expf(-acc[y]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, k, k, h, w], out)
}

/// `d loss / d theta` given the kernel value and its upstream gradient:
/// `dg/dtheta_i = g * Omega_i / theta_i^3`.
pub(crate) fn gaussian_kernel_theta_grad(
    features: &Tensor,
    theta: &[f32],
    filter_size: usize,
    orientation: KernelOrientation,
    kernel: &Tensor,
    grad: &Tensor,
) -> Result<Tensor> {
    let r = check_filter(filter_size)?;
    let [b, d, h, w] = features.dims4()?;
    let k = filter_size;
    let plane = h * w;
    let f = features.data();
    let sign = orientation.sign();
    let mut dtheta = vec![0.0f64; d];
    for n in 0..b {
        for i in 0..k {
            let dx = (i as isize - r) * sign;
            for j in 0..k {
                let dy = (j as isize - r) * sign;
                let base = ((n * k + i) * k + j) * plane;
                let cols = valid_range(dy, w);
                for x in valid_range(dx, h) {
                    let nx = (x as isize + dx) as usize;
                    for (dim, dt) in dtheta.iter_mut().enumerate() {
                        let fp = (n * d + dim) * plane;
                        let mut s = 0.0f64;
                        for y in cols.clone() {
                            let gk = grad.data()[base + x * w + y] * kernel.data()[base + x * w + y];
                            if gk == 0.0 {
                                continue;
                            }
                            let diff = f[fp + x * w + y] - f[fp + nx * w + (y as isize + dy) as usize];
                            s += (gk * diff * diff) as f64;
                        }
                        *dt += s;
                    }
                }
            }
        }
    }
    let out = dtheta
        .iter()
        .zip(theta)
        .map(|(&s, &t)| (s / ((t as f64) * (t as f64) * (t as f64))) as f32)
        .collect();
    Tensor::new(&[d], out)
}

/// `K = sum_i w_i * g_i` using the merge weights of `specs`.
pub fn merge_kernels(specs: &[KernelSpec], kernels: &[Tensor]) -> Result<KernelStack> {
    if specs.len() != kernels.len() || kernels.is_empty() {
        return Err(Error::invalid(
            "merge_kernels",
            format!("{} specs but {} kernels", specs.len(), kernels.len()),
        ));
    }
    let mut merged = kernels[0].zeros_like();
    for (spec, g) in specs.iter().zip(kernels) {
        if g.shape() != merged.shape() {
            return Err(Error::mismatch("merge_kernels", merged.shape(), g.shape()));
        }
        for (m, &v) in merged.data_mut().iter_mut().zip(g.data()) {
            *m += spec.weight * v;
        }
    }
    KernelStack::new(merged)
}

/// `Q[b, c, x, y] = sum_{dx,dy} K[b, dx, dy, x, y] * F[b, c, x + dx, y + dy]`.
pub fn message_pass(kernel: &KernelStack, probs: &Tensor) -> Result<Tensor> {
    message_pass_raw(kernel.kernel(), probs)
}

fn message_geometry(kernel: &Tensor, probs: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let [kb, k, k2, kh, kw] = kernel.dims5()?;
    let [b, c, h, w] = probs.dims4()?;
    if (kb, kh, kw) != (b, h, w) || k != k2 || k % 2 == 0 {
        return Err(Error::mismatch("message_pass", kernel.shape(), probs.shape()));
    }
    Ok((b, c, h, w, k))
}

pub(crate) fn message_pass_raw(kernel: &Tensor, probs: &Tensor) -> Result<Tensor> {
    let (b, c, h, w, k) = message_geometry(kernel, probs)?;
    let r = (k / 2) as isize;
    let plane = h * w;
    let kd = kernel.data();
    let fd = probs.data();
    let mut out = vec![0.0f32; b * c * plane];
    for n in 0..b {
        for i in 0..k {
            let dx = i as isize - r;
            for j in 0..k {
                let dy = j as isize - r;
                let kbase = ((n * k + i) * k + j) * plane;
                let cols = valid_range(dy, w);
                if cols.is_empty() {
                    continue;
                }
                for x in valid_range(dx, h) {
                    let nx = (x as isize + dx) as usize;
                    let krow = &kd[kbase + x * w + cols.start..kbase + x * w + cols.end];
                    for ch in 0..c {
                        let pbase = (n * c + ch) * plane;
                        let src_start = (cols.start as isize + dy) as usize;
                        let src = &fd[pbase + nx * w + src_start..pbase + nx * w + src_start + cols.len()];
                        let dst = &mut out[pbase + x * w + cols.start..pbase + x * w + cols.end];
                        for ((o, &kv), &fv) in dst.iter_mut().zip(krow).zip(src) {
                            *o += kv * fv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

pub(crate) fn message_pass_backward(
    kernel: &Tensor,
    probs: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w, k) = message_geometry(kernel, probs)?;
    let r = (k / 2) as isize;
    let plane = h * w;
    let kd = kernel.data();
    let fd = probs.data();
    let gd = grad.data();
    let mut dk = kernel.zeros_like();
    let mut dp = probs.zeros_like();
    for n in 0..b {
        for i in 0..k {
            let dx = i as isize - r;
            for j in 0..k {
                let dy = j as isize - r;
                let kbase = ((n * k + i) * k + j) * plane;
                let cols = valid_range(dy, w);
                for x in valid_range(dx, h) {
                    let nx = (x as isize + dx) as usize;
                    for ch in 0..c {
                        let pbase = (n * c + ch) * plane;
                        for y in cols.clone() {
                            let ny = (y as isize + dy) as usize;
                            let g = gd[pbase + x * w + y];
                            dk.data_mut()[kbase + x * w + y] += g * fd[pbase + nx * w + ny];
                            dp.data_mut()[pbase + nx * w + ny] += g * kd[kbase + x * w + y];
                        }
                    }
                }
            }
        }
    }
    Ok((dk, dp))
}

pub(crate) fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    let plane = h * w;
    let mut out = x.clone();
    let d = out.data_mut();
    for n in 0..b {
        for p in 0..plane {
            let idx = |ch: usize| (n * c + ch) * plane + p;
            let max = (0..c).map(|ch| d[idx(ch)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for ch in 0..c {
                let e = libm::expf(d[idx(ch)] - max);
                d[idx(ch)] = e;
                sum += e;
            }
            for ch in 0..c {
                d[idx(ch)] /= sum;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_channels_backward(probs: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = probs.dims4()?;
    let plane = h * w;
    let mut out = probs.zeros_like();
    let (p, g) = (probs.data(), grad.data());
    for n in 0..b {
        for px in 0..plane {
            let idx = |ch: usize| (n * c + ch) * plane + px;
            let dotp: f32 = (0..c).map(|ch| p[idx(ch)] * g[idx(ch)]).sum();
            for ch in 0..c {
                out.data_mut()[idx(ch)] = p[idx(ch)] * (g[idx(ch)] - dotp);
            }
        }
    }
    Ok(out)
}

fn check_labels(shape: [usize; 4], labels: &[u8]) -> Result<()> {
    let [b, c, h, w] = shape;
    if labels.len() != b * h * w {
        return Err(Error::mismatch("labels", &[b, h, w], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::invalid("labels", format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

pub(crate) fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f32, Tensor)> {
    let shape = logits.dims4()?;
    check_labels(shape, labels)?;
    let [b, c, h, w] = shape;
    let plane = h * w;
    let probs = softmax_channels(logits)?;
    let x = logits.data();
    let mut total = 0.0f64;
    for n in 0..b {
        for p in 0..plane {
            let at = |ch: usize| x[(n * c + ch) * plane + p] as f64;
            let max = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log((0..c).map(|ch| libm::exp(at(ch) - max)).sum::<f64>());
            total += lse - at(labels[n * plane + p] as usize);
        }
    }
    Ok(((total / (b * plane) as f64) as f32, probs))
}

pub(crate) fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[u8], upstream: f32) -> Result<Tensor> {
    let [b, c, h, w] = probs.dims4()?;
    let plane = h * w;
    let scale = upstream / (b * plane) as f32;
    let mut out = probs.map(|p| p * scale);
    for n in 0..b {
        for p in 0..plane {
            let l = labels[n * plane + p] as usize;
            out.data_mut()[(n * c + l) * plane + p] -= scale;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrfConfig {
    /// Odd window side `k`.
    pub filter_size: usize,
    /// Mean-field iterations (at least 1).
    pub iterations: usize,
}

impl Default for CrfConfig {
    fn default() -> Self {
        CrfConfig {
            filter_size: 11,
            iterations: 5,
        }
    }
}

fn check_refine_inputs(probs: &ProbMap, image: &Tensor, specs: &[KernelSpec], cfg: &CrfConfig) -> Result<()> {
    if cfg.iterations == 0 {
        return Err(Error::invalid("crf_refine", "iterations must be at least 1"));
    }
    check_filter(cfg.filter_size)?;
    specs.iter().try_for_each(KernelSpec::validate)?;
    let [b, _, h, w] = probs.dims();
    let [ib, ic, ih, iw] = image.dims4()?;
    if (ib, ic, ih, iw) != (b, 3, h, w) {
        return Err(Error::mismatch("crf_refine", probs.tensor().shape(), image.shape()));
    }
    Ok(())
}

fn unary_logits(probs: &ProbMap) -> Tensor {
    probs.tensor().map(|p| libm::logf(p.max(LOG_FLOOR)))
}

/// Merged gather-oriented kernel for `image` under `specs`.
pub fn build_kernels(image: &Tensor, specs: &[KernelSpec], filter_size: usize) -> Result<KernelStack> {
    let kernels = specs
        .iter()
        .map(|s| {
            let f = feature_map(s.feature, image)?;
            gaussian_kernel(&f, &s.theta, filter_size, KernelOrientation::Gather)
        })
        .collect::<Result<Vec<_>>>()?;
    merge_kernels(specs, &kernels)
}

/// Mean-field refinement: each iteration passes messages with the merged
/// kernel and renormalizes `softmax(log F + K * Q)` per pixel.
pub fn crf_refine(probs: &ProbMap, image: &Tensor, specs: &[KernelSpec], cfg: &CrfConfig) -> Result<ProbMap> {
    check_refine_inputs(probs, image, specs, cfg)?;
    let kernel = build_kernels(image, specs, cfg.filter_size)?;
    let unary = unary_logits(probs);
    let mut q = probs.tensor().clone();
    for _ in 0..cfg.iterations {
        let msg = message_pass(&kernel, &q)?;
        let logits = unary.zip_map(&msg, |u, m| u + m)?;
        q = softmax_channels(&logits)?;
        q.check_finite("crf_refine")?;
    }
    ProbMap::new(q)
}

/// Records the refinement on `tape` with trainable bandwidths and merge
/// weights; returns the final logits and the `(theta, weight)` variables.
pub fn trace_refine(
    tape: &mut Tape,
    probs: &ProbMap,
    image: &Tensor,
    specs: &[KernelSpec],
    cfg: &CrfConfig,
) -> Result<(Var, Vec<(Var, Var)>)> {
    check_refine_inputs(probs, image, specs, cfg)?;
    let mut params = Vec::with_capacity(specs.len());
    let mut merged: Option<Var> = None;
    for s in specs {
        let theta = tape.param(Tensor::new(&[s.theta.len()], s.theta.clone())?);
        let weight = tape.param(Tensor::scalar(s.weight));
        let f = feature_map(s.feature, image)?;
        let g = tape.gaussian_kernel(&f, theta, cfg.filter_size, KernelOrientation::Gather)?;
        let scaled = tape.scale(g, weight)?;
        merged = Some(match merged {
            Some(m) => tape.add(m, scaled)?,
            None => scaled,
        });
        params.push((theta, weight));
    }
    let kernel = merged.ok_or_else(|| Error::invalid("trace_refine", "no kernels"))?;
    let unary = tape.constant(unary_logits(probs));
    let mut q = tape.constant(probs.tensor().clone());
    let mut logits = unary;
    for it in 0..cfg.iterations {
        let msg = tape.message_pass(kernel, q)?;
        logits = tape.add(unary, msg)?;
        if it + 1 < cfg.iterations {
            q = tape.softmax_channels(logits)?;
        }
    }
    Ok((logits, params))
}

/// Result of fitting CRF parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfFit {
    pub specs: Vec<KernelSpec>,
    /// Loss of every accepted parameter set, starting with the initial one.
    pub loss_trace: Vec<f32>,
}

fn crf_loss_and_grads(
    probs: &ProbMap,
    image: &Tensor,
    target: &[u8],
    specs: &[KernelSpec],
    cfg: &CrfConfig,
) -> Result<(f32, Vec<(Tensor, f32)>)> {
    let mut tape = Tape::new();
    let (logits, params) = trace_refine(&mut tape, probs, image, specs, cfg)?;
    let loss = tape.softmax_cross_entropy(logits, target)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "train_crf" });
    }
    tape.backward(loss)?;
    let grads = params
        .iter()
        .map(|&(t, w)| Ok((tape.grad_or_zeros(t), tape.grad_or_zeros(w).item()?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, grads))
}

/// Gradient descent on the pixelwise cross-entropy between the refined map
/// and `target` (one class index per pixel).
///
/// Bandwidths are updated in log space so they stay positive. A step that
/// raises the loss is rejected and the step size halved, so the returned
/// parameters never have a higher loss than the initial ones.
pub fn train_crf(
    probs: &ProbMap,
    image: &Tensor,
    target: &[u8],
    specs: &[KernelSpec],
    cfg: &CrfConfig,
    steps: usize,
    lr: f32,
) -> Result<CrfFit> {
    let [b, c, h, w] = probs.dims();
    check_labels([b, c, h, w], target)?;
    if !(lr > 0.0) {
        return Err(Error::invalid("train_crf", "learning rate must be positive"));
    }
    let mut current = specs.to_vec();
    let (mut loss, mut grads) = crf_loss_and_grads(probs, image, target, &current, cfg)?;
    let mut trace = vec![loss];
    let mut step_size = lr;
    for _ in 0..steps {
        let candidate: Vec<KernelSpec> = current
            .iter()
            .zip(&grads)
            .map(|(s, (dtheta, dw))| KernelSpec {
                feature: s.feature,
                theta: s
                    .theta
                    .iter()
                    .zip(dtheta.data())
                    .map(|(&t, &g)| t * libm::expf((-step_size * t * g).clamp(-2.0, 2.0)))
                    .collect(),
                weight: s.weight - step_size * dw,
            })
            .collect();
        let (new_loss, new_grads) = crf_loss_and_grads(probs, image, target, &candidate, cfg)?;
        if new_loss <= loss {
            current = candidate;
            loss = new_loss;
            grads = new_grads;
            trace.push(loss);
        } else {
            step_size *= 0.5;
        }
    }
    Ok(CrfFit {
        specs: current,
        loss_trace: trace,
    })
}
