//! Two-view batches and the normalized-temperature cross-entropy loss.
//!
//! A batch of `b` source patches becomes `2b` augmented views laid out so
//! that views `2m` and `2m + 1` come from source `m`. Each view has exactly
//! one positive partner and `2(b - 1)` negatives.
//!
//! The per-view term is
//! `-log( exp(s(i,p)/tau) / sum_{k != i} exp(s(i,k)/tau) )` with `s` the
//! cosine similarity and `p` the partner of `i`; the loss is the mean over
//! all `2b` ordered positive pairs, so both `(i, j)` and `(j, i)` count.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::augment::{self, Policy};
use crate::autograd::{Tape, Var};
use crate::{Error, Result, Tensor};

/// Positive-partner map over the rows of a view batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    partner: Vec<usize>,
}

impl Pairing {
    /// The standard layout: rows `2m` and `2m + 1` are partners.
    pub fn adjacent(views: usize) -> Result<Self> {
        if views < 4 || views % 2 != 0 {
            return Err(Error::invalid(
                "pairing",
                format!("need an even number of views >= 4, got {views}"),
            ));
        }
        Ok(Pairing {
            partner: (0..views).map(|i| i ^ 1).collect(),
        })
    }

    /// An arbitrary pairing; must be a fixed-point-free involution.
    pub fn from_partners(partner: Vec<usize>) -> Result<Self> {
        let n = partner.len();
        if n < 4 || n % 2 != 0 {
            return Err(Error::invalid(
                "pairing",
                format!("need an even number of views >= 4, got {n}"),
            ));
        }
        for (i, &p) in partner.iter().enumerate() {
            if p >= n || p == i || partner[p] != i {
                return Err(Error::invalid(
                    "pairing",
                    format!("row {i} -> {p} is not a symmetric pairing"),
                ));
            }
        }
        Ok(Pairing { partner })
    }

    pub fn views(&self) -> usize {
        self.partner.len()
    }

    pub fn partner(&self, i: usize) -> usize {
        self.partner[i]
    }

    /// Negatives per view: every row except itself and its partner.
    pub fn negatives_per_view(&self) -> usize {
        self.partner.len() - 2
    }

    /// Unordered positive pairs `(i, j)` with `i < j`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.partner
            .iter()
            .enumerate()
            .filter(|&(i, &p)| i < p)
            .map(|(i, &p)| (i, p))
            .collect()
    }
}

/// `2b` augmented views with their pairing and temperature.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub views: Tensor,
    pub pairing: Pairing,
    pub temperature: f32,
}

/// Augments each sample twice and stacks the views in the adjacent layout.
///
/// `ids[m]` identifies sample `m`; it keys the per-view random streams
/// together with `seed`, so a batch is reproducible regardless of the order
/// in which samples are processed.
pub fn build_batch(
    samples: &[Tensor],
    ids: &[u64],
    policy: &Policy,
    seed: u64,
    temperature: f32,
) -> Result<ContrastiveBatch> {
    if samples.len() < 2 {
        return Err(Error::invalid(
            "build_batch",
            format!("batch needs at least 2 samples for negatives, got {}", samples.len()),
        ));
    }
    if ids.len() != samples.len() {
        return Err(Error::invalid(
            "build_batch",
            format!("{} samples but {} ids", samples.len(), ids.len()),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("build_batch", "temperature must be positive"));
    }
    let mut views = Vec::with_capacity(2 * samples.len());
    for (x, &id) in samples.iter().zip(ids) {
        let pair = augment::sample_pair(x, policy, seed, id)?;
        views.push(pair.x_i);
        views.push(pair.x_j);
    }
    Ok(ContrastiveBatch {
        pairing: Pairing::adjacent(views.len())?,
        views: Tensor::stack(&views)?,
        temperature,
    })
}

/// `u.v / (|u| |v|)`; rejects zero-norm inputs.
pub fn cosine_similarity(u: &Tensor, v: &Tensor) -> Result<f32> {
    if u.shape() != v.shape() {
        return Err(Error::mismatch("cosine_similarity", u.shape(), v.shape()));
    }
    let (mut uv, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.data().iter().zip(v.data()) {
        let (a, b) = (a as f64, b as f64);
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((uv / (libm::sqrt(uu) * libm::sqrt(vv))).clamp(-1.0, 1.0) as f32)
}

/// NT-Xent loss value of the rows of `z` (`[2b, dim]`).
pub fn nt_xent(z: &Tensor, pairing: &Pairing, tau: f32) -> Result<f32> {
    nt_xent_with_grad(z, pairing, tau).map(|(l, _)| l)
}

/// Traced NT-Xent: records the loss on `tape` so gradients reach `z`.
pub fn nt_xent_traced(tape: &mut Tape, z: Var, pairing: &Pairing, tau: f32) -> Result<Var> {
    tape.nt_xent(z, pairing, tau)
}

/// Loss and its gradient with respect to `z`.
pub(crate) fn nt_xent_with_grad(z: &Tensor, pairing: &Pairing, tau: f32) -> Result<(f32, Tensor)> {
    let [n, dim] = z.dims2()?;
    if n != pairing.views() {
        return Err(Error::invalid(
            "nt_xent",
            format!("{n} rows but pairing covers {} views", pairing.views()),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("nt_xent", format!("temperature must be positive, got {tau}")));
    }
    let tau = tau as f64;

    let mut norms = vec![0.0f64; n];
    let mut unit = vec![0.0f64; n * dim];
    for i in 0..n {
        let row = &z.data()[i * dim..(i + 1) * dim];
        let nn = libm::sqrt(row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>());
        if !(nn > 0.0) {
            return Err(if nn.is_nan() {
                Error::CollapsedEmbedding
            } else {
                Error::ZeroNorm
            });
        }
        norms[i] = nn;
        for (u, &v) in unit[i * dim..(i + 1) * dim].iter_mut().zip(row) {
            *u = v as f64 / nn;
        }
    }

    let mut sim = vec![0.0f64; n * n];
    for i in 0..n {
        for k in i..n {
            let s: f64 = (0..dim).map(|d| unit[i * dim + d] * unit[k * dim + d]).sum();
            sim[i * n + k] = s;
            sim[k * n + i] = s;
        }
    }
    if sim.iter().any(|s| s.is_nan()) {
        return Err(Error::CollapsedEmbedding);
    }

    // d loss / d sim, row-wise
    let mut dsim = vec![0.0f64; n * n];
    let mut total = 0.0f64;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row = &sim[i * n..(i + 1) * n];
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| row[k] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n)
            .filter(|&k| k != i)
            .map(|k| libm::exp(row[k] / tau - max))
            .sum();
        let p = pairing.partner(i);
        total += max + libm::log(denom) - row[p] / tau;
        for k in (0..n).filter(|&k| k != i) {
            let soft = libm::exp(row[k] / tau - max) / denom;
            let target = if k == p { 1.0 } else { 0.0 };
            dsim[i * n + k] = inv_n * (soft - target) / tau;
        }
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::CollapsedEmbedding);
    }

    // sim = U U^T  =>  dU = (G + G^T) U ; then project through the normalization.
    let mut dz = vec![0.0f32; n * dim];
    for i in 0..n {
        let mut du = vec![0.0f64; dim];
        for k in 0..n {
            let gk = dsim[i * n + k] + dsim[k * n + i];
            if gk == 0.0 {
                continue;
            }
            for d in 0..dim {
                du[d] += gk * unit[k * dim + d];
            }
        }
        let ui = &unit[i * dim..(i + 1) * dim];
        let radial: f64 = ui.iter().zip(&du).map(|(u, g)| u * g).sum();
        for d in 0..dim {
            dz[i * dim + d] = ((du[d] - ui[d] * radial) / norms[i]) as f32;
        }
    }
    Ok((loss as f32, Tensor::new(&[n, dim], dz)?))
}
