//! Slow, direct reference implementations used as test oracles.
//!
//! Everything here is written from the definitions with plain nested loops in
//! f64 and shares no code with the crate under test.

#![allow(dead_code)]

use dclr_core::encoder::InstanceMask;
use dclr_core::Tensor;

/// Zero-padded cross-correlation over `[b, cin, h, w]` and `[cout, cin, kh, kw]`.
pub fn conv2d(input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Vec<f64> {
    let s = input.shape();
    let k = weights.shape();
    let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let (cout, kh, kw) = (k[0], k[2], k[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((n * cin + ci) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((n * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Contrastive loss over `[2b, d]` rows where rows `2m` and `2m + 1` are
/// positives: the mean over every ordered positive pair of
/// `-log(exp(s_ij / tau) / sum_{k != i} exp(s_ik / tau))`.
pub fn nt_xent(z: &Tensor, tau: f64) -> f64 {
    let n = z.shape()[0];
    let d = z.shape()[1];
    let row = |i: usize| &z.data()[i * d..(i + 1) * d];
    let mut total = 0.0;
    for i in 0..n {
        let j = i ^ 1;
        let num = (cosine(row(i), row(j)) / tau).exp();
        let mut den = 0.0;
        for k in 0..n {
            if k != i {
                den += (cosine(row(i), row(k)) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / n as f64
}

/// Truncated Gaussian kernel `[1, k, k, h, w]` for a single-image feature
/// map `[1, d, h, w]`: the entry at offset `(dx, dy)` compares pixel
/// `(x, y)` with `(x - dx, y - dy)`; offsets leaving the image give 0.
pub fn gaussian_kernel(features: &Tensor, theta: &[f32], k: usize) -> Vec<f64> {
    let s = features.shape();
    let (d, h, w) = (s[1], s[2], s[3]);
    let r = (k / 2) as isize;
    let f = |c: usize, x: usize, y: usize| features.data()[(c * h + x) * w + y] as f64;
    let mut out = vec![0.0; k * k * h * w];
    for i in 0..k {
        for j in 0..k {
            let (dx, dy) = (i as isize - r, j as isize - r);
            for x in 0..h {
                for y in 0..w {
                    let (sx, sy) = (x as isize - dx, y as isize - dy);
                    if sx < 0 || sy < 0 || sx >= h as isize || sy >= w as isize {
                        continue;
                    }
                    let mut e = 0.0;
                    for c in 0..d {
                        let diff = f(c, x, y) - f(c, sx as usize, sy as usize);
                        let t = theta[c] as f64;
                        e += diff * diff / (2.0 * t * t);
                    }
                    out[((i * k + j) * h + x) * w + y] = (-e).exp();
                }
            }
        }
    }
    out
}

/// `Q[c, x, y] = sum_{dx, dy} K[dx, dy, x, y] * F[c, x + dx, y + dy]` with
/// zero outside the image, for `K: [1, k, k, h, w]` and `F: [1, c, h, w]`.
pub fn message_pass(kernel: &Tensor, probs: &Tensor) -> Vec<f64> {
    let k = kernel.shape()[1];
    let s = probs.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let r = (k / 2) as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for x in 0..h {
            for y in 0..w {
                let mut acc = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        let (nx, ny) = (x as isize + i as isize - r, y as isize + j as isize - r);
                        if nx < 0 || ny < 0 || nx >= h as isize || ny >= w as isize {
                            continue;
                        }
                        let kv = kernel.data()[((i * k + j) * h + x) * w + y] as f64;
                        let fv = probs.data()[(ch * h + nx as usize) * w + ny as usize] as f64;
                        acc += kv * fv;
                    }
                }
                out[(ch * h + x) * w + y] = acc;
            }
        }
    }
    out
}

/// Background/foreground weights `n / (count * classes_present)`.
pub fn balanced_class_weights(mask: &InstanceMask) -> (f64, f64) {
    let n = mask.labels.len() as f64;
    let fg = mask.labels.iter().filter(|&&l| l > 0).count() as f64;
    let bg = n - fg;
    let present = (fg > 0.0) as u32 as f64 + (bg > 0.0) as u32 as f64;
    let w = |c: f64| if c > 0.0 { n / (c * present) } else { 0.0 };
    (w(bg), w(fg))
}

/// Pixels not in instance `id` with a 4-neighbour in it.
fn border(mask: &InstanceMask, id: u32) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && y < h as isize && x < w as isize && mask.labels[y as usize * w + x as usize] == id
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !at(y, x) && (at(y - 1, x) || at(y + 1, x) || at(y, x - 1) || at(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Direct per-pixel evaluation of
/// `w(x) = w_c(x) + w0 * exp(-(d1(x) + d2(x))^2 / (2 sigma^2))`, with
/// `d1`/`d2` the distances to the borders of the nearest and second-nearest
/// instance found by scanning every border pixel.
pub fn weight_map(mask: &InstanceMask, w0: f64, sigma: f64) -> Vec<f64> {
    let (bg, fg) = balanced_class_weights(mask);
    let mut ids: Vec<u32> = mask.labels.iter().copied().filter(|&l| l > 0).collect();
    ids.sort_unstable();
    ids.dedup();
    let borders: Vec<Vec<(usize, usize)>> = ids.iter().map(|&id| border(mask, id)).collect();
    let (h, w) = (mask.height, mask.width);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut dists: Vec<f64> = borders
                .iter()
                .filter(|b| !b.is_empty())
                .map(|b| {
                    b.iter()
                        .map(|&(by, bx)| {
                            let (dy, dx) = (by as f64 - y as f64, bx as f64 - x as f64);
                            (dy * dy + dx * dx).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let wc = if mask.labels[y * w + x] > 0 { fg } else { bg };
            let term = if dists.len() >= 2 {
                let s = dists[0] + dists[1];
                w0 * (-(s * s) / (2.0 * sigma * sigma)).exp()
            } else {
                0.0
            };
            out.push(wc + term);
        }
    }
    out
}

/// Largest absolute difference between an f32 tensor and f64 reference values.
pub fn max_abs_diff(actual: &Tensor, expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "length mismatch against oracle");
    actual
        .data()
        .iter()
        .zip(expected)
        .map(|(&a, &e)| (a as f64 - e).abs())
        .fold(0.0, f64::max)
}
