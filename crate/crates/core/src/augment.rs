//! Stochastic two-view augmentation of `[3, h, w]` patches in `[0, 1]`.
//!
//! A [`Policy`] is an ordered list of transforms, each gated by its own
//! probability. One realization of a policy draws every gate and every
//! parameter fresh from the supplied generator; [`sample_pair`] draws two
//! realizations from independent streams keyed by `(seed, source id, view)`.
//! Every transform clamps its output back into `[0, 1]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng;
use crate::{Error, Result, Tensor};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    /// Crop a square window covering a uniformly drawn area fraction in
    /// `[min_scale, max_scale]`, then resize back to the input size.
    ResizedCrop { min_scale: f32, max_scale: f32 },
    HorizontalFlip,
    /// Zero a square of side `floor(side_fraction * min(h, w))`.
    Cutout { side_fraction: f32 },
    /// Brightness, contrast, saturation and hue perturbation of strength `s`.
    ColourJitter { strength: f32 },
    ColourDrop,
    GaussianBlur { min_sigma: f32, max_sigma: f32 },
    Sobel,
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::ResizedCrop { .. } => "resized-crop",
            Transform::HorizontalFlip => "horizontal-flip",
            Transform::Cutout { .. } => "cutout",
            Transform::ColourJitter { .. } => "colour-jitter",
            Transform::ColourDrop => "colour-drop",
            Transform::GaussianBlur { .. } => "gaussian-blur",
            Transform::Sobel => "sobel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    pub transform: Transform,
    pub probability: f32,
}

impl TransformSpec {
    pub fn new(transform: Transform, probability: f32) -> Result<Self> {
        let spec = TransformSpec {
            transform,
            probability,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: alloc::string::String| Err(Error::invalid("transform", reason));
        if !(0.0..=1.0).contains(&self.probability) {
            return bad(format!("probability {} outside [0, 1]", self.probability));
        }
        match self.transform {
            Transform::ResizedCrop {
                min_scale,
                max_scale,
            } => {
                if !(min_scale > 0.0 && min_scale <= max_scale && max_scale <= 1.0) {
                    return bad(format!("crop scale range [{min_scale}, {max_scale}] not within (0, 1]"));
                }
            }
            Transform::Cutout { side_fraction } => {
                if !(0.0..=1.0).contains(&side_fraction) {
                    return bad(format!("cutout side fraction {side_fraction} outside [0, 1]"));
                }
            }
            Transform::ColourJitter { strength } => {
                if !(strength >= 0.0) {
                    return bad(format!("jitter strength {strength} must be >= 0"));
                }
            }
            Transform::GaussianBlur {
                min_sigma,
                max_sigma,
            } => {
                if !(min_sigma > 0.0 && min_sigma <= max_sigma) {
                    return bad(format!("blur sigma range [{min_sigma}, {max_sigma}] invalid"));
                }
            }
            Transform::HorizontalFlip | Transform::ColourDrop | Transform::Sobel => {}
        }
        Ok(())
    }
}

/// Ordered transform list applied to each view.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub transforms: Vec<TransformSpec>,
}

impl Default for Policy {
    /// Resized crop, flip, strong colour distortion, blur and cutout; Sobel
    /// is present but disabled.
    fn default() -> Self {
        let t = |transform, probability| TransformSpec {
            transform,
            probability,
        };
        Policy {
            transforms: vec![
                t(
                    Transform::ResizedCrop {
                        min_scale: 0.2,
                        max_scale: 1.0,
                    },
                    1.0,
                ),
                t(Transform::HorizontalFlip, 0.5),
                t(Transform::ColourJitter { strength: 1.0 }, 0.8),
                t(Transform::ColourDrop, 0.2),
                t(
                    Transform::GaussianBlur {
                        min_sigma: 0.1,
                        max_sigma: 2.0,
                    },
                    0.5,
                ),
                t(Transform::Cutout { side_fraction: 0.25 }, 0.5),
                t(Transform::Sobel, 0.0),
            ],
        }
    }
}

impl Policy {
    pub fn identity() -> Self {
        Policy {
            transforms: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transforms.iter().try_for_each(TransformSpec::validate)
    }
}

/// Two correlated views of one source patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub x_i: Tensor,
    pub x_j: Tensor,
    pub source_id: u64,
}

/// Draws two independent realizations of `policy` for patch `source_id`.
pub fn sample_pair(x: &Tensor, policy: &Policy, seed: u64, source_id: u64) -> Result<ViewPair> {
    check_unit_range(x)?;
    let mut rng_i = rng::stream_for(seed, "augment", &[source_id, 0]);
    let mut rng_j = rng::stream_for(seed, "augment", &[source_id, 1]);
    Ok(ViewPair {
        x_i: augment_view(x, policy, &mut rng_i)?,
        x_j: augment_view(x, policy, &mut rng_j)?,
        source_id,
    })
}

/// One realization of `policy` applied to `x`.
pub fn augment_view<R: Rng + ?Sized>(x: &Tensor, policy: &Policy, rng: &mut R) -> Result<Tensor> {
    policy.validate()?;
    let [_, h, w] = x.dims3()?;
    let mut out = x.clone();
    for spec in &policy.transforms {
        let gate: f32 = rng.gen();
        if gate >= spec.probability {
            continue;
        }
        out = match spec.transform {
            Transform::ResizedCrop {
                min_scale,
                max_scale,
            } => random_resized_crop(&out, (min_scale, max_scale), h, w, rng)?,
            Transform::HorizontalFlip => horizontal_flip(&out)?,
            Transform::Cutout { side_fraction } => cutout(&out, side_fraction, rng)?,
            Transform::ColourJitter { strength } => colour_jitter(&out, strength, rng)?,
            Transform::ColourDrop => colour_drop(&out)?,
            Transform::GaussianBlur {
                min_sigma,
                max_sigma,
            } => {
                let sigma = uniform(rng, min_sigma, max_sigma);
                gaussian_blur(&out, sigma)?
            }
            Transform::Sobel => sobel(&out)?,
        };
    }
    Ok(out)
}

fn check_unit_range(x: &Tensor) -> Result<()> {
    if x.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::invalid("augment", "input values must lie in [0, 1]"))
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f32, hi: f32) -> f32 {
    let u: f32 = rng.gen();
    lo + (hi - lo) * u
}

fn clamp_unit(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    t
}

fn rgb_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let [c, h, w] = x.dims3()?;
    if c != 3 {
        return Err(Error::invalid(op, format!("expects 3 channels, got {c}")));
    }
    Ok((h, w))
}

/// Zeroes a square of side `floor(side_fraction * min(h, w))` placed
/// uniformly at random fully inside the image; all channels share it.
pub fn cutout<R: Rng + ?Sized>(x: &Tensor, side_fraction: f32, rng: &mut R) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&side_fraction) {
        return Err(Error::invalid("cutout", "side fraction outside [0, 1]"));
    }
    let [c, h, w] = x.dims3()?;
    let side = libm::floorf(side_fraction * h.min(w) as f32) as usize;
    let mut out = x.clone();
    if side == 0 {
        return Ok(out);
    }
    let y0 = rng.gen_range(0..=h - side);
    let x0 = rng.gen_range(0..=w - side);
    for ch in 0..c {
        for y in y0..y0 + side {
            let row = ch * h * w + y * w;
            out.data_mut()[row + x0..row + x0 + side].fill(0.0);
        }
    }
    Ok(out)
}

/// Multiplies every value by `factor`.
pub fn adjust_brightness(x: &Tensor, factor: f32) -> Tensor {
    clamp_unit(x.map(|v| v * factor))
}

/// Luma of every pixel, `[h * w]`.
fn luma_plane(x: &Tensor, h: usize, w: usize) -> Vec<f32> {
    let d = x.data();
    let n = h * w;
    (0..n)
        .map(|i| LUMA[0] * d[i] + LUMA[1] * d[n + i] + LUMA[2] * d[2 * n + i])
        .collect()
}

/// Blends towards the mean image luma: `mean + factor * (v - mean)`.
pub fn adjust_contrast(x: &Tensor, factor: f32) -> Result<Tensor> {
    let (h, w) = rgb_dims(x, "adjust_contrast")?;
    let luma = luma_plane(x, h, w);
    let mean = (luma.iter().map(|&v| v as f64).sum::<f64>() / luma.len() as f64) as f32;
    Ok(clamp_unit(x.map(|v| mean + factor * (v - mean))))
}

/// Blends each pixel towards its own grey value.
pub fn adjust_saturation(x: &Tensor, factor: f32) -> Result<Tensor> {
    let (h, w) = rgb_dims(x, "adjust_saturation")?;
    let luma = luma_plane(x, h, w);
    let n = h * w;
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let g = luma[i % n];
        *v = g + factor * (*v - g);
    }
    Ok(clamp_unit(out))
}

/// Rotates hue by `delta` turns (1.0 is the full circle).
pub fn adjust_hue(x: &Tensor, delta: f32) -> Result<Tensor> {
    let (h, w) = rgb_dims(x, "adjust_hue")?;
    let n = h * w;
    let mut out = x.clone();
    let d = out.data_mut();
    for i in 0..n {
        let (hue, s, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
        let mut hue = hue + delta;
        hue -= libm::floorf(hue);
        let (r, g, b) = hsv_to_rgb(hue, s, v);
        d[i] = r;
        d[n + i] = g;
        d[2 * n + i] = b;
    }
    Ok(clamp_unit(out))
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        let h = (g - b) / delta / 6.0;
        if h < 0.0 {
            h + 1.0
        } else {
            h
        }
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = libm::floorf(h6);
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (sector as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast and saturation factors drawn from
/// `[max(0, 1 - 0.8 s), 1 + 0.8 s]` and a hue shift from `[-0.2 s, 0.2 s]`,
/// applied in a random order.
pub fn colour_jitter<R: Rng + ?Sized>(x: &Tensor, strength: f32, rng: &mut R) -> Result<Tensor> {
    if !(strength >= 0.0) {
        return Err(Error::invalid("colour_jitter", "strength must be >= 0"));
    }
    rgb_dims(x, "colour_jitter")?;
    if strength == 0.0 {
        return Ok(x.clone());
    }
    let lo = (1.0 - 0.8 * strength).max(0.0);
    let hi = 1.0 + 0.8 * strength;
    let brightness = uniform(rng, lo, hi);
    let contrast = uniform(rng, lo, hi);
    let saturation = uniform(rng, lo, hi);
    let hue = uniform(rng, -0.2 * strength, 0.2 * strength);
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    let mut out = x.clone();
    for step in order {
        out = match step {
            0 => adjust_brightness(&out, brightness),
            1 => adjust_contrast(&out, contrast)?,
            2 => adjust_saturation(&out, saturation)?,
            _ => adjust_hue(&out, hue)?,
        };
    }
    Ok(out)
}

/// Replaces every channel with luma `0.299 R + 0.587 G + 0.114 B`.
pub fn colour_drop(x: &Tensor) -> Result<Tensor> {
    let (h, w) = rgb_dims(x, "colour_drop")?;
    let luma = luma_plane(x, h, w);
    let mut data = Vec::with_capacity(3 * luma.len());
    for _ in 0..3 {
        data.extend_from_slice(&luma);
    }
    Ok(clamp_unit(Tensor::new(x.shape(), data)?))
}

/// Half-sample symmetric reflection of `i` into `0..n`.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized 1-D Gaussian taps of radius `ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f32) -> Vec<f32> {
    let radius = libm::ceilf(3.0 * sigma) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|t| libm::exp(-((t * t) as f64) / (2.0 * (sigma as f64) * (sigma as f64))))
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter().map(|&v| (v / total) as f32).collect()
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(x: &Tensor, sigma: f32) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("gaussian_blur", format!("sigma must be positive, got {sigma}")));
    }
    let [c, h, w] = x.dims3()?;
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0f32; c * h * w];
    let mut out = vec![0.0f32; c * h * w];
    let src = x.data();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0f32;
                for (k, &tap) in taps.iter().enumerate() {
                    let sx = reflect_index(xx as isize + k as isize - r, w);
                    acc += tap * src[base + y * w + sx];
                }
                tmp[base + y * w + xx] = acc;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0f32;
                for (k, &tap) in taps.iter().enumerate() {
                    let sy = reflect_index(y as isize + k as isize - r, h);
                    acc += tap * tmp[base + sy * w + xx];
                }
                out[base + y * w + xx] = acc;
            }
        }
    }
    Ok(clamp_unit(Tensor::new(x.shape(), out)?))
}

/// Bilinear resize of `[c, h, w]` with half-pixel centres.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bilinear", "output extent must be positive"));
    }
    let axis = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let s = ((o as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5).clamp(0.0, (n_in - 1) as f32);
        let i0 = libm::floorf(s) as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|o| axis(o, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| axis(o, w, out_w)).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] + fx * (plane[y0 * w + x1] - plane[y0 * w + x0]);
                let bot = plane[y1 * w + x0] + fx * (plane[y1 * w + x1] - plane[y1 * w + x0]);
                out.push(top + fy * (bot - top));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Crops a square-aspect window whose area fraction is uniform in
/// `scale_range`, at a uniform position, and resizes it to `out_h x out_w`.
pub fn random_resized_crop<R: Rng + ?Sized>(
    x: &Tensor,
    scale_range: (f32, f32),
    out_h: usize,
    out_w: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid(
            "random_resized_crop",
            format!("scale range [{lo}, {hi}] not within (0, 1]"),
        ));
    }
    let [c, h, w] = x.dims3()?;
    let area = uniform(rng, lo, hi);
    let side = libm::sqrtf(area);
    let (fh, fw) = (side * h as f32, side * w as f32);
    if fh < 1.0 || fw < 1.0 {
        return Err(Error::invalid(
            "random_resized_crop",
            format!("crop window {fh:.2}x{fw:.2} is smaller than one pixel"),
        ));
    }
    let ch = (libm::roundf(fh) as usize).clamp(1, h);
    let cw = (libm::roundf(fw) as usize).clamp(1, w);
    let y0 = rng.gen_range(0..=h - ch);
    let x0 = rng.gen_range(0..=w - cw);
    let mut crop = Vec::with_capacity(c * ch * cw);
    for plane in 0..c {
        for y in y0..y0 + ch {
            let row = plane * h * w + y * w;
            crop.extend_from_slice(&x.data()[row + x0..row + x0 + cw]);
        }
    }
    let crop = Tensor::new(&[c, ch, cw], crop)?;
    Ok(clamp_unit(resize_bilinear(&crop, out_h, out_w)?))
}

/// Reverses column order.
pub fn horizontal_flip(x: &Tensor) -> Result<Tensor> {
    let [_, _, w] = x.dims3()?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Per-channel Sobel gradient magnitude, scaled so each channel's maximum is
/// 1 (all-zero channels stay zero).
pub fn sobel(x: &Tensor) -> Result<Tensor> {
    let [c, h, w] = x.dims3()?;
    let src = x.data();
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        let at = |y: isize, xx: isize| {
            src[base + reflect_index(y, h) * w + reflect_index(xx, w)]
        };
        let mut max = 0.0f32;
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let gx = (at(y - 1, xx + 1) + 2.0 * at(y, xx + 1) + at(y + 1, xx + 1))
                    - (at(y - 1, xx - 1) + 2.0 * at(y, xx - 1) + at(y + 1, xx - 1));
                let gy = (at(y + 1, xx - 1) + 2.0 * at(y + 1, xx) + at(y + 1, xx + 1))
                    - (at(y - 1, xx - 1) + 2.0 * at(y - 1, xx) + at(y - 1, xx + 1));
                let m = libm::sqrtf(gx * gx + gy * gy);
                out[base + y as usize * w + xx as usize] = m;
                max = max.max(m);
            }
        }
        if max > 0.0 {
            for v in &mut out[base..base + h * w] {
                *v /= max;
            }
        }
    }
    Ok(clamp_unit(Tensor::new(x.shape(), out)?))
}
