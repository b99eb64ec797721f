//! Whole-slide orchestration: background removal, tiling, patch labels,
//! contrastive pretraining, embedding clustering, stitching and metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::Policy;
use crate::autograd::Tape;
use crate::contrastive::{self, Pairing};
use crate::convcrf::ProbMap;
use crate::encoder::{DUNetConfig, EncoderModel, ProjectionConfig};
use crate::exec::Executor;
use crate::{ops, rng, Error, Mask, Result, Tensor};

/// Patches with less tissue than this fraction are dropped.
pub const MIN_TISSUE_FRACTION: f64 = 0.25;
/// Fraction of a patch that must carry one annotation for it to be labelled.
pub const LABEL_RATIO: f64 = 0.75;
pub const DEFAULT_BACKGROUND_THRESHOLD: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchPlacement {
    pub row: usize,
    pub col: usize,
    pub y0: usize,
    pub x0: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub side: usize,
    pub stride: usize,
    pub placements: Vec<PatchPlacement>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.placements {
            if p.y0 + self.side > self.height || p.x0 + self.side > self.width {
                return Err(Error::invalid(
                    "PatchGrid",
                    format!("patch at ({}, {}) leaves the {}x{} image", p.y0, p.x0, self.height, self.width),
                ));
            }
        }
        Ok(())
    }
}

/// One slide with everything the stages attach to it.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideRecord {
    pub id: String,
    /// `[3, H, W]` RGB in `[0, 1]`.
    pub image: Tensor,
    pub tissue_mask: Option<Mask>,
    pub grid: Option<PatchGrid>,
    pub ground_truth: Option<Mask>,
    pub prediction: Option<ProbMap>,
}

impl SlideRecord {
    pub fn new(id: impl Into<String>, image: Tensor, ground_truth: Option<Mask>) -> Result<Self> {
        let [c, h, w] = image.dims3()?;
        if c != 3 {
            return Err(Error::invalid("SlideRecord", format!("expects RGB image, got {c} channels")));
        }
        if let Some(gt) = &ground_truth {
            if gt.dims() != (h, w) {
                return Err(Error::mismatch("SlideRecord", &[h, w], &[gt.height(), gt.width()]));
            }
        }
        Ok(SlideRecord {
            id: id.into(),
            image,
            tissue_mask: None,
            grid: None,
            ground_truth,
            prediction: None,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    pub fn set_prediction(&mut self, prediction: ProbMap) -> Result<()> {
        let [_, _, h, w] = prediction.dims();
        if (h, w) != self.dims() {
            return Err(Error::mismatch("SlideRecord::set_prediction", &[self.dims().0, self.dims().1], &[h, w]));
        }
        self.prediction = Some(prediction);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatchLabel {
    Tumour,
    NonTumour,
    Excluded,
}

impl PatchLabel {
    /// Class index (non-tumour 0, tumour 1); `None` when excluded.
    pub fn class(self) -> Option<usize> {
        match self {
            PatchLabel::NonTumour => Some(0),
            PatchLabel::Tumour => Some(1),
            PatchLabel::Excluded => None,
        }
    }
}

fn luma_at(d: &[f32], plane: usize, p: usize) -> f32 {
    0.299 * d[p] + 0.587 * d[plane + p] + 0.114 * d[2 * plane + p]
}

/// Tissue mask: a pixel is background when its mean channel intensity
/// exceeds `threshold`.
pub fn remove_background(image: &Tensor, threshold: f32) -> Result<Mask> {
    let [c, h, w] = image.dims3()?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("remove_background", "threshold must lie in (0, 1)"));
    }
    let plane = h * w;
    let d = image.data();
    let data = (0..plane)
        .map(|p| {
            let mean = (0..c).map(|ch| d[ch * plane + p]).sum::<f32>() / c as f32;
            mean <= threshold
        })
        .collect();
    Mask::new(h, w, data)
}

/// `[3, side, side]` crop with top-left corner `(y0, x0)`.
pub fn crop(image: &Tensor, y0: usize, x0: usize, side: usize) -> Result<Tensor> {
    let [c, h, w] = image.dims3()?;
    if y0 + side > h || x0 + side > w {
        return Err(Error::invalid("crop", format!("{side}px crop at ({y0}, {x0}) leaves {h}x{w} image")));
    }
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for y in y0..y0 + side {
            let start = (ch * h + y) * w + x0;
            out.extend_from_slice(&image.data()[start..start + side]);
        }
    }
    Tensor::new(&[c, side, side], out)
}

/// Raster-scan tiling keeping tiles with at least a quarter tissue. Uses the
/// record's tissue mask, or treats everything as tissue when there is none.
/// Background pixels of a kept tile are replaced by the tile's mean tissue
/// colour.
pub fn extract_patches(record: &SlideRecord, side: usize, stride: usize) -> Result<(Vec<Tensor>, PatchGrid)> {
    let (h, w) = record.dims();
    if side == 0 || side > h.min(w) {
        return Err(Error::invalid("extract_patches", format!("patch side {side} does not fit {h}x{w}")));
    }
    if stride == 0 {
        return Err(Error::invalid("extract_patches", "stride must be at least 1"));
    }
    let area = (side * side) as f64;
    let mut patches = Vec::new();
    let mut placements = Vec::new();
    for (row, y0) in (0..=h - side).step_by(stride).enumerate() {
        for (col, x0) in (0..=w - side).step_by(stride).enumerate() {
            let tissue = match &record.tissue_mask {
                Some(m) => m.count_in(y0, x0, side, side) as f64 / area,
                None => 1.0,
            };
            if tissue >= MIN_TISSUE_FRACTION {
                let mut patch = crop(&record.image, y0, x0, side)?;
                if let (Some(m), true) = (&record.tissue_mask, tissue < 1.0) {
                    fill_background(&mut patch, m, y0, x0);
                }
                patches.push(patch);
                placements.push(PatchPlacement { row, col, y0, x0 });
            }
        }
    }
    Ok((
        patches,
        PatchGrid {
            height: h,
            width: w,
            side,
            stride,
            placements,
        },
    ))
}

fn fill_background(patch: &mut Tensor, tissue: &Mask, y0: usize, x0: usize) {
    let side = patch.shape()[1];
    let plane = side * side;
    let is_tissue = |p: usize| tissue.get(y0 + p / side, x0 + p % side);
    let n = (0..plane).filter(|&p| is_tissue(p)).count();
    if n == 0 {
        return;
    }
    let d = patch.data_mut();
    for ch in 0..3 {
        let c = &mut d[ch * plane..(ch + 1) * plane];
        let mean = (0..plane).filter(|&p| is_tissue(p)).map(|p| c[p] as f64).sum::<f64>() / n as f64;
        for p in 0..plane {
            if !is_tissue(p) {
                c[p] = mean as f32;
            }
        }
    }
}

/// Sets the tumour probability of background pixels to zero.
pub fn suppress_background(map: &ProbMap, tissue: &Mask) -> Result<ProbMap> {
    let [b, c, h, w] = map.dims();
    if b != 1 || c != 2 || tissue.dims() != (h, w) {
        return Err(Error::mismatch("suppress_background", &[b, c, h, w], &[tissue.height(), tissue.width()]));
    }
    let plane = h * w;
    let mut t = map.tensor().clone();
    let d = t.data_mut();
    for (p, &keep) in tissue.data().iter().enumerate() {
        if !keep {
            d[p] = 1.0;
            d[plane + p] = 0.0;
        }
    }
    ProbMap::new(t)
}

/// Tumour when at least `ratio` of the patch is annotated tumour,
/// non-tumour when at least `ratio` is not, excluded otherwise.
pub fn label_patch(annotation: &Mask, placement: &PatchPlacement, side: usize, ratio: f64) -> PatchLabel {
    let tumour = annotation.count_in(placement.y0, placement.x0, side, side) as f64 / (side * side) as f64;
    if tumour >= ratio {
        PatchLabel::Tumour
    } else if 1.0 - tumour >= ratio {
        PatchLabel::NonTumour
    } else {
        PatchLabel::Excluded
    }
}

/// Seeded slide-level split; both sides are non-empty when `n >= 2`.
pub fn split_by_slide(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::NotEnoughData(format!("need at least 2 slides to split, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("split_by_slide", "train fraction must lie in (0, 1)"));
    }
    let n_train = (libm::round(n as f64 * train_fraction) as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "slide-split"));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Early-stopping criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monitor {
    /// Contrastive loss on held-out patches (lower is better).
    ValidationLoss,
    /// Permutation-matched clustering accuracy on labelled held-out patches.
    ValidationAccuracy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub unet: DUNetConfig,
    pub projection: ProjectionConfig,
    pub policy: Policy,
    pub temperature: f32,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub monitor: Monitor,
    /// Views per forward/backward unit of work.
    pub chunk_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            unet: DUNetConfig::default(),
            projection: ProjectionConfig::default(),
            policy: Policy::default(),
            temperature: 0.5,
            lr: 0.001,
            momentum: 0.0,
            batch_size: 64,
            patience: 20,
            max_epochs: 100,
            validation_fraction: 0.2,
            monitor: Monitor::ValidationLoss,
            chunk_size: 8,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.policy.validate()?;
        let bad = |reason: &str| Err(Error::invalid("PretrainConfig", reason));
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if self.chunk_size == 0 {
            return bad("chunk size must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: Option<f32>,
    pub val_accuracy: Option<f32>,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Parameters of the best epoch under the monitor.
    pub model: EncoderModel,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
}

fn row_range(t: &Tensor, r: Range<usize>) -> Result<Tensor> {
    let shape = t.shape();
    let inner: usize = shape[1..].iter().product();
    let mut s = shape.to_vec();
    s[0] = r.len();
    Tensor::new(&s, t.data()[r.start * inner..r.end * inner].to_vec())
}

fn chunks(n: usize, size: usize) -> Vec<Range<usize>> {
    (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect()
}

fn concat_rows(parts: Vec<Tensor>) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat_rows", "nothing to concatenate"))?;
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in &parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&shape, data)
}

/// Projections `z` of every view, computed in chunks.
fn project_views<E: Executor>(model: &EncoderModel, views: &Tensor, chunk: usize, exec: &E) -> Result<Tensor> {
    let parts = exec.map(chunks(views.shape()[0], chunk), |r| {
        let x = row_range(views, r)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = model.trace(&mut tape, xv, false)?;
        Ok(tape.value(out.z).clone())
    });
    concat_rows(parts.into_iter().collect::<Result<Vec<_>>>()?)
}

/// NT-Xent loss of a batch and its gradient with respect to every model
/// parameter. The loss gradient `dL/dz` is formed once over all views, then
/// each chunk of views is re-run and backpropagated on its own tape; chunk
/// gradients are summed in chunk order.
pub fn batch_gradients<E: Executor>(
    model: &EncoderModel,
    views: &Tensor,
    pairing: &Pairing,
    temperature: f32,
    chunk: usize,
    exec: &E,
) -> Result<(f32, Vec<Tensor>)> {
    let z = project_views(model, views, chunk, exec)?;
    let (loss, dz) = contrastive::nt_xent_with_grad(&z, pairing, temperature)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "nt_xent" });
    }
    let parts = exec.map(chunks(views.shape()[0], chunk), |r| {
        let x = row_range(views, r.clone())?;
        let seed = row_range(&dz, r)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = model.trace(&mut tape, xv, true)?;
        tape.backward_with(out.z, seed)?;
        Ok(out.params.iter().map(|&p| tape.grad_or_zeros(p)).collect::<Vec<_>>())
    });
    let mut total: Option<Vec<Tensor>> = None;
    for part in parts {
        let part = part?;
        match &mut total {
            None => total = Some(part),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&part) {
                    a.add_assign(g)?;
                }
            }
        }
    }
    Ok((loss, total.unwrap_or_default()))
}

/// Encoder embeddings `h` of `[3, s, s]` patches, `[n, embed_dim]`.
pub fn embed_patches<E: Executor>(model: &EncoderModel, patches: &[Tensor], chunk: usize, exec: &E) -> Result<Tensor> {
    if patches.is_empty() {
        return Err(Error::NotEnoughData("no patches to embed".into()));
    }
    let parts = exec.map(chunks(patches.len(), chunk.max(1)), |r| model.encode(&Tensor::stack(&patches[r])?));
    concat_rows(parts.into_iter().collect::<Result<Vec<_>>>()?)
}

fn validation_loss<E: Executor>(
    model: &EncoderModel,
    patches: &[Tensor],
    ids: &[usize],
    cfg: &PretrainConfig,
    exec: &E,
) -> Result<f32> {
    let b = cfg.batch_size.min(ids.len());
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, batch) in ids.chunks(b).enumerate() {
        if batch.len() < 2 {
            continue;
        }
        let samples: Vec<Tensor> = batch.iter().map(|&j| patches[j].clone()).collect();
        let keys: Vec<u64> = batch.iter().map(|&j| j as u64).collect();
        let seed = rng::derive_seed(cfg.seed, &[rng::label_hash("validation"), i as u64]);
        let cb = contrastive::build_batch(&samples, &keys, &cfg.policy, seed, cfg.temperature)?;
        let z = project_views(model, &cb.views, cfg.chunk_size, exec)?;
        total += contrastive::nt_xent(&z, &cb.pairing, cfg.temperature)? as f64 * batch.len() as f64;
        count += batch.len();
    }
    Ok((total / count.max(1) as f64) as f32)
}

fn validation_accuracy<E: Executor>(
    model: &EncoderModel,
    patches: &[Tensor],
    labels: &[PatchLabel],
    ids: &[usize],
    cfg: &PretrainConfig,
    exec: &E,
) -> Result<f32> {
    let kept: Vec<usize> = ids.iter().copied().filter(|&i| labels[i].class().is_some()).collect();
    if kept.len() < 2 {
        return Err(Error::NotEnoughData("validation accuracy needs at least 2 labelled patches".into()));
    }
    let samples: Vec<Tensor> = kept.iter().map(|&i| patches[i].clone()).collect();
    let emb = embed_patches(model, &samples, cfg.chunk_size, exec)?;
    let clusters = cluster_patches(&emb, 2, 4, rng::derive_seed(cfg.seed, &[rng::label_hash("validation-kmeans")]))?;
    let gt: Vec<usize> = kept.iter().map(|&i| labels[i].class().unwrap_or(0)).collect();
    accuracy(&clusters.assignments, &gt)
}

/// Contrastive pretraining with SGD and early stopping.
///
/// A `validation_fraction` of the patches is held out for the monitor. An
/// epoch counts as an improvement when the monitored value strictly beats
/// the best so far; training stops once `patience` epochs pass without one
/// (so `patience = 0` runs exactly one epoch) or at `max_epochs`.
pub fn pretrain<E: Executor>(
    patches: &[Tensor],
    labels: Option<&[PatchLabel]>,
    cfg: &PretrainConfig,
    exec: &E,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if patches.len() < cfg.batch_size {
        return Err(Error::NotEnoughData(format!(
            "pretraining needs at least {} patches, got {}",
            cfg.batch_size,
            patches.len()
        )));
    }
    if let Some(l) = labels {
        if l.len() != patches.len() {
            return Err(Error::invalid("pretrain", format!("{} patches but {} labels", patches.len(), l.len())));
        }
    }
    if cfg.monitor == Monitor::ValidationAccuracy && labels.is_none() {
        return Err(Error::invalid("pretrain", "accuracy monitor needs patch labels"));
    }

    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "pretrain-split"));
    let n_val = if cfg.validation_fraction > 0.0 {
        (libm::round(patches.len() as f64 * cfg.validation_fraction) as usize).max(2)
    } else {
        0
    };
    if patches.len() < n_val + 2 {
        return Err(Error::NotEnoughData("too few patches for a validation split".into()));
    }
    let (val_ids, train_ids) = order.split_at(n_val);
    let mut train_ids = train_ids.to_vec();

    let mut model = EncoderModel::init(cfg.unet, cfg.projection, cfg.seed)?;
    let mut velocity: Vec<Tensor> = model.params().iter().map(Tensor::zeros_like).collect();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = f32::INFINITY;
    let mut stale = 0usize;
    let mut trace = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        train_ids.shuffle(&mut rng::stream_for(cfg.seed, "pretrain-order", &[epoch as u64]));
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (bi, batch) in train_ids.chunks(cfg.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let samples: Vec<Tensor> = batch.iter().map(|&j| patches[j].clone()).collect();
            let keys: Vec<u64> = batch.iter().map(|&j| j as u64).collect();
            let seed = rng::derive_seed(cfg.seed, &[epoch as u64, bi as u64]);
            let cb = contrastive::build_batch(&samples, &keys, &cfg.policy, seed, cfg.temperature)?;
            let (loss, grads) = match batch_gradients(&model, &cb.views, &cb.pairing, cfg.temperature, cfg.chunk_size, exec) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        last_good: (epoch > 1).then_some(epoch - 1),
                    })
                }
                Err(e) => return Err(e),
            };
            if cfg.momentum > 0.0 {
                for (v, g) in velocity.iter_mut().zip(&grads) {
                    *v = v.zip_map(g, |a, b| cfg.momentum * a + b)?;
                }
                ops::sgd_step(model.params_mut(), &velocity, cfg.lr)?;
            } else {
                ops::sgd_step(model.params_mut(), &grads, cfg.lr)?;
            }
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    last_good: (epoch > 1).then_some(epoch - 1),
                });
            }
            loss_sum += loss as f64 * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = (loss_sum / seen.max(1) as f64) as f32;

        let val_loss = if n_val > 0 {
            Some(validation_loss(&model, patches, val_ids, cfg, exec)?)
        } else {
            None
        };
        let val_accuracy = match (cfg.monitor, labels) {
            (Monitor::ValidationAccuracy, Some(l)) => Some(validation_accuracy(&model, patches, l, val_ids, cfg, exec)?),
            _ => None,
        };
        let score = match cfg.monitor {
            Monitor::ValidationLoss => val_loss.unwrap_or(train_loss),
            Monitor::ValidationAccuracy => -val_accuracy.unwrap_or(0.0),
        };
        if !score.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                last_good: (epoch > 1).then_some(epoch - 1),
            });
        }
        let improved = score < best_score;
        if improved {
            best_score = score;
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        match (val_loss, val_accuracy) {
            (Some(l), Some(a)) => log::info!("epoch {epoch}: train loss {train_loss:.5} val loss {l:.5} val acc {a:.4}"),
            (Some(l), None) => log::info!("epoch {epoch}: train loss {train_loss:.5} val loss {l:.5}"),
            _ => log::info!("epoch {epoch}: train loss {train_loss:.5}"),
        }
        trace.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            improved,
        });
        if stale >= cfg.patience {
            break;
        }
    }
    Ok(PretrainOutcome {
        model: best,
        best_epoch,
        trace,
    })
}

/// k-means partition of embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// `[k, d]`.
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares.
    pub inertia: f64,
}

fn sq(v: f64) -> f64 {
    v * v
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| sq((x - y) as f64)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist_f64(x, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn count_distinct(rows: &[&[f32]], at_least: usize) -> usize {
    let mut distinct: Vec<&[f32]> = Vec::new();
    for r in rows {
        if !distinct.iter().any(|d| d == r) {
            distinct.push(r);
            if distinct.len() >= at_least {
                break;
            }
        }
    }
    distinct.len()
}

fn kmeans_once(rows: &[&[f32]], k: usize, rng: &mut rng::StreamRng) -> (Vec<Vec<f64>>, Vec<usize>, f64) {
    let n = rows.len();
    let d = rows[0].len();
    let to_f64 = |r: &[f32]| r.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let mut centroids = vec![to_f64(rows[rng.gen_range(0..n)])];
    let mut dist: Vec<f64> = rows.iter().map(|r| nearest(&centroids, r).1).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in dist.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        if dist[pick] == 0.0 {
            pick = (0..n).rev().find(|&i| dist[i] > 0.0).unwrap_or(pick);
        }
        centroids.push(to_f64(rows[pick]));
        for (i, r) in rows.iter().enumerate() {
            dist[i] = dist[i].min(nearest(&centroids[centroids.len() - 1..], r).1);
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let (c, _) = nearest(&centroids, r);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0f64; d]; k];
        let mut counts = vec![0usize; k];
        for (i, r) in rows.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, &v) in sums[assign[i]].iter_mut().zip(r.iter()) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at the point farthest from its centre.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist_f64(rows[a], &centroids[assign[a]]);
                        let db = sq_dist_f64(rows[b], &centroids[assign[b]]);
                        da.partial_cmp(&db).unwrap_or(core::cmp::Ordering::Equal).then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                centroids[c] = to_f64(rows[far]);
                assign[far] = c;
            } else {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = rows.iter().zip(&assign).map(|(r, &c)| sq_dist_f64(r, &centroids[c])).sum();
    (centroids, assign, inertia)
}

fn sq_dist_f64(x: &[f32], m: &[f64]) -> f64 {
    x.iter().zip(m).map(|(&a, &b)| sq(a as f64 - b)).sum()
}

/// k-means with k-means++ seeding, keeping the restart with the lowest
/// within-cluster sum of squares.
pub fn cluster_patches(embeddings: &Tensor, k: usize, restarts: usize, seed: u64) -> Result<Clustering> {
    let [n, d] = embeddings.dims2()?;
    if k == 0 || n < k {
        return Err(Error::NotEnoughData(format!("{n} points cannot form {k} clusters")));
    }
    embeddings.check_finite("cluster_patches")?;
    let rows: Vec<&[f32]> = embeddings.data().chunks(d).collect();
    if count_distinct(&rows, k) < k {
        return Err(Error::NotEnoughData(format!("fewer than {k} distinct points")));
    }
    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, f64)> = None;
    for r in 0..restarts.max(1) {
        let mut stream = rng::stream_for(seed, "kmeans", &[r as u64]);
        let run = kmeans_once(&rows, k, &mut stream);
        if best.as_ref().map_or(true, |b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (centroids, assignments, inertia) = best.expect("at least one restart");
    let flat = centroids.iter().flatten().map(|&v| v as f32).collect();
    Ok(Clustering {
        centroids: Tensor::new(&[k, d], flat)?,
        assignments,
        inertia,
    })
}

/// Nearest centroid of each row.
pub fn assign_clusters(centroids: &Tensor, embeddings: &Tensor) -> Result<Vec<usize>> {
    let [_, d] = centroids.dims2()?;
    let [_, d2] = embeddings.dims2()?;
    if d != d2 {
        return Err(Error::mismatch("assign_clusters", centroids.shape(), embeddings.shape()));
    }
    let cs: Vec<Vec<f64>> = centroids.data().chunks(d).map(|c| c.iter().map(|&v| v as f64).collect()).collect();
    Ok(embeddings.data().chunks(d).map(|r| nearest(&cs, r).0).collect())
}

/// Soft tumour probability `d_other / (d_tumour + d_other)` for two
/// centroids, using Euclidean distances.
pub fn tumour_probability(centroids: &Tensor, tumour: usize, embeddings: &Tensor) -> Result<Vec<f32>> {
    let [k, d] = centroids.dims2()?;
    if k != 2 || tumour > 1 {
        return Err(Error::invalid("tumour_probability", "expects two centroids"));
    }
    let [_, d2] = embeddings.dims2()?;
    if d != d2 {
        return Err(Error::mismatch("tumour_probability", centroids.shape(), embeddings.shape()));
    }
    let c = centroids.data();
    let (ct, cn) = (&c[tumour * d..(tumour + 1) * d], &c[(1 - tumour) * d..(2 - tumour) * d]);
    Ok(embeddings
        .data()
        .chunks(d)
        .map(|r| {
            let dt = libm::sqrt(sq_dist(r, ct));
            let dn = libm::sqrt(sq_dist(r, cn));
            if dt + dn == 0.0 {
                0.5
            } else {
                (dn / (dt + dn)) as f32
            }
        })
        .collect())
}

/// Mean luma of a `[3, h, w]` patch.
pub fn mean_luma(patch: &Tensor) -> Result<f32> {
    let [c, h, w] = patch.dims3()?;
    if c != 3 {
        return Err(Error::invalid("mean_luma", "expects RGB"));
    }
    let plane = h * w;
    let s: f64 = (0..plane).map(|p| luma_at(patch.data(), plane, p) as f64).sum();
    Ok((s / plane as f64) as f32)
}

/// The cluster whose member patches are darker on average.
pub fn darker_cluster(assignments: &[usize], lumas: &[f32]) -> Result<usize> {
    if assignments.len() != lumas.len() {
        return Err(Error::invalid("darker_cluster", "one luma per patch required"));
    }
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (&a, &l) in assignments.iter().zip(lumas) {
        if a > 1 {
            return Err(Error::invalid("darker_cluster", "expects two clusters"));
        }
        sums[a] += l as f64;
        counts[a] += 1;
    }
    let mean = |c: usize| if counts[c] == 0 { f64::INFINITY } else { sums[c] / counts[c] as f64 };
    Ok(if mean(1) < mean(0) { 1 } else { 0 })
}

/// Averages per-patch tumour probabilities over every covering patch;
/// uncovered pixels are non-tumour. Returns a `[1, 2, H, W]` map with the
/// tumour class in channel 1.
pub fn stitch(grid: &PatchGrid, tumour_probs: &[f32]) -> Result<ProbMap> {
    grid.validate()?;
    if tumour_probs.len() != grid.len() {
        return Err(Error::invalid(
            "stitch",
            format!("{} placements but {} probabilities", grid.len(), tumour_probs.len()),
        ));
    }
    let (h, w, s) = (grid.height, grid.width, grid.side);
    let mut sum = vec![0.0f64; h * w];
    let mut cover = vec![0u32; h * w];
    for (p, &prob) in grid.placements.iter().zip(tumour_probs) {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::invalid("stitch", format!("probability {prob} outside [0, 1]")));
        }
        for y in p.y0..p.y0 + s {
            for x in p.x0..p.x0 + s {
                sum[y * w + x] += prob as f64;
                cover[y * w + x] += 1;
            }
        }
    }
    let fg: Vec<f32> = sum
        .iter()
        .zip(&cover)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64) as f32 })
        .collect();
    ProbMap::from_foreground(h, w, &fg)
}

/// Tumour mask of a two-class map (tumour where channel 1 strictly wins).
pub fn tumour_mask(map: &ProbMap) -> Result<Mask> {
    let [b, c, h, w] = map.dims();
    if b != 1 || c != 2 {
        return Err(Error::invalid("tumour_mask", "expects a single two-class map"));
    }
    let plane = h * w;
    let d = map.tensor().data();
    Mask::new(h, w, (0..plane).map(|p| d[plane + p] > d[p]).collect())
}

/// `2|A n B| / (|A| + |B|)`, and 1 when both are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::mismatch(
            "dice",
            &[pred.height(), pred.width()],
            &[gt.height(), gt.width()],
        ));
    }
    let inter = pred.data().iter().zip(gt.data()).filter(|(&a, &b)| a && b).count();
    let total = pred.count() + gt.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Fraction of matching labels under the relabeling of `pred` that
/// maximizes it.
pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f32> {
    if pred.is_empty() {
        return Err(Error::invalid("accuracy", "no labels"));
    }
    if pred.len() != gt.len() {
        return Err(Error::mismatch("accuracy", &[pred.len()], &[gt.len()]));
    }
    let classes = pred.iter().chain(gt).max().copied().unwrap_or(0) + 1;
    if classes > 8 {
        return Err(Error::invalid("accuracy", "permutation matching supports at most 8 classes"));
    }
    let mut confusion = vec![0usize; classes * classes];
    for (&p, &g) in pred.iter().zip(gt) {
        confusion[p * classes + g] += 1;
    }
    let mut perm: Vec<usize> = (0..classes).collect();
    let mut best = 0;
    loop {
        let hits: usize = (0..classes).map(|p| confusion[p * classes + perm[p]]).sum();
        best = best.max(hits);
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best as f32 / pred.len() as f32)
}

/// [`accuracy`] over the patches that carry a label.
pub fn patch_accuracy(pred: &[usize], labels: &[PatchLabel]) -> Result<f32> {
    if pred.len() != labels.len() {
        return Err(Error::mismatch("patch_accuracy", &[pred.len()], &[labels.len()]));
    }
    let (p, g): (Vec<usize>, Vec<usize>) = pred
        .iter()
        .zip(labels)
        .filter_map(|(&p, l)| l.class().map(|g| (p, g)))
        .unzip();
    accuracy(&p, &g)
}

/// Trained encoder plus the two-cluster model that turns embeddings into
/// tumour probabilities.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub encoder: EncoderModel,
    /// `[2, embed_dim]`.
    pub centroids: Tensor,
    pub tumour_cluster: usize,
}

impl Segmenter {
    /// Clusters the embeddings of `patches` and names the darker cluster tumour.
    pub fn fit<E: Executor>(
        encoder: EncoderModel,
        patches: &[Tensor],
        restarts: usize,
        seed: u64,
        chunk: usize,
        exec: &E,
    ) -> Result<(Self, Clustering)> {
        let emb = embed_patches(&encoder, patches, chunk, exec)?;
        let clusters = cluster_patches(&emb, 2, restarts, rng::derive_seed(seed, &[rng::label_hash("kmeans")]))?;
        let lumas = patches.iter().map(mean_luma).collect::<Result<Vec<_>>>()?;
        let tumour_cluster = darker_cluster(&clusters.assignments, &lumas)?;
        Ok((
            Segmenter {
                encoder,
                centroids: clusters.centroids.clone(),
                tumour_cluster,
            },
            clusters,
        ))
    }

    /// Per-patch tumour probabilities and hard tumour calls.
    pub fn classify<E: Executor>(&self, patches: &[Tensor], chunk: usize, exec: &E) -> Result<(Vec<f32>, Vec<usize>)> {
        let emb = embed_patches(&self.encoder, patches, chunk, exec)?;
        let probs = tumour_probability(&self.centroids, self.tumour_cluster, &emb)?;
        let calls = assign_clusters(&self.centroids, &emb)?
            .into_iter()
            .map(|c| usize::from(c == self.tumour_cluster))
            .collect();
        Ok((probs, calls))
    }

    /// Background removal, tiling, classification and stitching of one slide;
    /// background pixels end up non-tumour. Fills the record's tissue mask,
    /// grid and prediction. Returns the hard tumour call of every patch in
    /// grid order.
    pub fn segment<E: Executor>(
        &self,
        record: &mut SlideRecord,
        stride: usize,
        background_threshold: f32,
        chunk: usize,
        exec: &E,
    ) -> Result<Vec<usize>> {
        record.tissue_mask = Some(remove_background(&record.image, background_threshold)?);
        let (patches, grid) = extract_patches(record, self.encoder.unet().input_side, stride)?;
        let (probs, calls) = if patches.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            self.classify(&patches, chunk, exec)?
        };
        let map = stitch(&grid, &probs)?;
        let map = suppress_background(&map, record.tissue_mask.as_ref().expect("set above"))?;
        record.grid = Some(grid);
        record.set_prediction(map)?;
        Ok(calls)
    }
}
