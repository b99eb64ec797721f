//! Synthetic histology-like slides with exact ground truth.
//!
//! A slide is a white frame around a pink tissue field. Tumour regions are
//! smooth blobs (unions of discs whose radius wobbles with a few
//! low-frequency harmonics) filled with the tissue colour shifted by
//! `separation * TUMOUR_SHIFT`. Both classes carry the same per-pixel
//! Gaussian texture noise, so `separation = 0` makes them indistinguishable.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f32::consts::PI;

use rand::Rng;

use crate::encoder::InstanceMask;
use crate::pipeline::{split_by_slide, SlideRecord};
use crate::{rng, Error, Mask, Result, Tensor};

pub const NON_TUMOUR_COLOUR: [f32; 3] = [0.90, 0.62, 0.80];
/// Tumour colour at full separation is `NON_TUMOUR_COLOUR + TUMOUR_SHIFT`.
pub const TUMOUR_SHIFT: [f32; 3] = [-0.45, -0.45, -0.15];
/// Largest relative deviation of a blob boundary from its disc.
pub const BOUNDARY_WOBBLE: f32 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub side: usize,
    pub n_blobs: usize,
    /// 0 gives identical class colours, 1 the full shift.
    pub separation: f32,
    /// Per-pixel, per-channel noise standard deviation.
    pub noise: f32,
    /// White frame width as a fraction of the side.
    pub margin: f32,
    /// Main disc radius range as fractions of the side.
    pub blob_radius: (f32, f32),
    /// Discs per blob.
    pub lobes: usize,
    pub seed: u64,
}

impl SynthParams {
    pub fn separable(seed: u64) -> Self {
        SynthParams {
            side: 512,
            n_blobs: 3,
            separation: 0.5,
            noise: 0.04,
            margin: 0.1,
            blob_radius: (0.09, 0.14),
            lobes: 3,
            seed,
        }
    }

    pub fn hard(seed: u64) -> Self {
        SynthParams {
            separation: 0.05,
            ..SynthParams::separable(seed)
        }
    }

    pub fn margin_px(&self) -> usize {
        libm::floorf(self.margin * self.side as f32) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("SynthParams", reason));
        if self.side < 8 {
            return bad("side must be at least 8");
        }
        if self.n_blobs == 0 {
            return bad("at least one blob is required");
        }
        if !(0.0..=1.0).contains(&self.separation) {
            return bad("separation must lie in [0, 1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative");
        }
        if !(0.0..0.5).contains(&self.margin) {
            return bad("margin must lie in [0, 0.5)");
        }
        let (lo, hi) = self.blob_radius;
        if !(lo > 0.0 && lo <= hi) {
            return bad("blob radius range must be positive and ordered");
        }
        if self.lobes == 0 {
            return bad("blobs need at least one lobe");
        }
        let interior = self.side - 2 * self.margin_px();
        if 2.0 * hi * self.side as f32 * (1.0 + BOUNDARY_WOBBLE) >= interior as f32 {
            return Err(Error::invalid(
                "SynthParams",
                format!("blobs of radius {hi} exceed the {interior}px tissue area"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Disc {
    cy: f32,
    cx: f32,
    r: f32,
    harmonics: [(f32, f32); 3],
}

impl Disc {
    fn random<R: Rng + ?Sized>(cy: f32, cx: f32, r: f32, rng: &mut R) -> Self {
        let raw: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let total: f32 = raw.iter().sum::<f32>().max(1e-6);
        let mut harmonics = [(0.0, 0.0); 3];
        for (h, a) in harmonics.iter_mut().zip(raw) {
            *h = (BOUNDARY_WOBBLE * a / total, rng.gen::<f32>() * 2.0 * PI);
        }
        Disc { cy, cx, r, harmonics }
    }

    fn contains(&self, y: f32, x: f32) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let d2 = dy * dy + dx * dx;
        let outer = self.r * (1.0 + BOUNDARY_WOBBLE);
        if d2 > outer * outer {
            return false;
        }
        let phi = libm::atan2f(dy, dx);
        let wobble: f32 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(m, &(a, p))| a * libm::sinf((m + 2) as f32 * phi + p))
            .sum();
        let rho = self.r * (1.0 + wobble);
        d2 < rho * rho
    }
}

/// Generated image `[3, side, side]` and its tumour mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub image: Tensor,
    pub mask: Mask,
}

fn blob_discs(params: &SynthParams, rng: &mut rng::StreamRng) -> Vec<Disc> {
    let side = params.side as f32;
    let m = params.margin_px() as f32;
    let (lo, hi) = params.blob_radius;
    let mut discs = Vec::new();
    for _ in 0..params.n_blobs {
        let r0 = side * rng.gen_range(lo..=hi);
        let (min_c, max_c) = (m + r0, side - m - r0);
        let cy = rng.gen_range(min_c..=max_c);
        let cx = rng.gen_range(min_c..=max_c);
        discs.push(Disc::random(cy, cx, r0, rng));
        for _ in 1..params.lobes {
            let angle = rng.gen::<f32>() * 2.0 * PI;
            let dist = r0 * rng.gen_range(0.3..0.7);
            let r = r0 * rng.gen_range(0.6..0.9);
            discs.push(Disc::random(cy + dist * libm::sinf(angle), cx + dist * libm::cosf(angle), r, rng));
        }
    }
    discs
}

/// One slide. Geometry and noise come from separate streams keyed by
/// `params.seed`, so slides that differ only in separation share both.
pub fn synth_slide(params: &SynthParams) -> Result<SyntheticSlide> {
    params.validate()?;
    let n = params.side;
    let m = params.margin_px();
    let discs = blob_discs(params, &mut rng::stream(params.seed, "datagen-geometry"));
    let mask = Mask::from_fn(n, n, |y, x| {
        let inside = y >= m && y < n - m && x >= m && x < n - m;
        inside && discs.iter().any(|d| d.contains(y as f32 + 0.5, x as f32 + 0.5))
    });
    let mut noise_rng = rng::stream(params.seed, "datagen-noise");
    let plane = n * n;
    let mut data = vec![1.0f32; 3 * plane];
    for y in m..n - m {
        for x in m..n - m {
            let p = y * n + x;
            let tumour = mask.get(y, x);
            for ch in 0..3 {
                let mut v = NON_TUMOUR_COLOUR[ch] + params.noise * rng::standard_normal(&mut noise_rng);
                if tumour {
                    v += params.separation * TUMOUR_SHIFT[ch];
                }
                data[ch * plane + p] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(SyntheticSlide {
        image: Tensor::new(&[3, n, n], data)?,
        mask,
    })
}

/// Seed of slide `index` in a dataset generated from `seed`.
pub fn slide_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, &[rng::label_hash("slide"), index as u64])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<SlideRecord>,
    pub test: Vec<SlideRecord>,
    /// Per-slide seeds in generation order.
    pub seeds: Vec<u64>,
}

/// `n_slides` independent slides split by slide into train and test.
pub fn synth_dataset(n_slides: usize, params: &SynthParams, train_fraction: f64) -> Result<SyntheticDataset> {
    params.validate()?;
    let (train_idx, test_idx) = split_by_slide(n_slides, train_fraction, params.seed)?;
    let seeds: Vec<u64> = (0..n_slides).map(|i| slide_seed(params.seed, i)).collect();
    let make = |i: usize| -> Result<SlideRecord> {
        let slide = synth_slide(&SynthParams {
            seed: seeds[i],
            ..params.clone()
        })?;
        SlideRecord::new(format!("slide-{i:03}"), slide.image, Some(slide.mask))
    };
    Ok(SyntheticDataset {
        train: train_idx.iter().map(|&i| make(i)).collect::<Result<_>>()?,
        test: test_idx.iter().map(|&i| make(i)).collect::<Result<_>>()?,
        seeds,
    })
}

/// Labelled cells for exercising the border weight map: `n_cells` discs of
/// the given radius, each separated from the others by at least one pixel.
pub fn synth_instances(height: usize, width: usize, n_cells: usize, radius: f32, seed: u64) -> Result<InstanceMask> {
    if !(radius >= 1.0) || 2.0 * radius + 2.0 > height.min(width) as f32 {
        return Err(Error::invalid("synth_instances", format!("radius {radius} does not fit {height}x{width}")));
    }
    let mut labels = vec![0u32; height * width];
    let mut rng = rng::stream(seed, "datagen-instances");
    let mut placed = 0u32;
    let mut attempts = 0;
    while (placed as usize) < n_cells {
        attempts += 1;
        if attempts > 1000 * n_cells.max(1) {
            return Err(Error::invalid("synth_instances", format!("could not place {n_cells} cells")));
        }
        let cy = rng.gen_range(radius..height as f32 - radius);
        let cx = rng.gen_range(radius..width as f32 - radius);
        let pixels: Vec<usize> = (0..height * width)
            .filter(|&p| {
                let (dy, dx) = ((p / width) as f32 + 0.5 - cy, (p % width) as f32 + 0.5 - cx);
                dy * dy + dx * dx < radius * radius
            })
            .collect();
        let clash = pixels.iter().any(|&p| {
            let (y, x) = (p / width, p % width);
            let near = [
                Some(p),
                (y > 0).then(|| p - width),
                (y + 1 < height).then(|| p + width),
                (x > 0).then(|| p - 1),
                (x + 1 < width).then(|| p + 1),
            ];
            near.iter().flatten().any(|&q| labels[q] != 0)
        });
        if pixels.is_empty() || clash {
            continue;
        }
        placed += 1;
        for p in pixels {
            labels[p] = placed;
        }
    }
    InstanceMask::new(height, width, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthParams {
        SynthParams {
            side: 96,
            n_blobs: 2,
            blob_radius: (0.1, 0.15),
            ..SynthParams::separable(seed)
        }
    }

    #[test]
    fn frame_is_white() {
        let p = SynthParams::separable(3);
        assert_eq!(p.margin_px(), 51);
        let s = synth_slide(&SynthParams { side: 128, ..p }).unwrap();
        let m = 12;
        for ch in 0..3 {
            for y in 0..128 {
                for x in 0..128 {
                    if y < m || x < m || y >= 128 - m || x >= 128 - m {
                        assert_eq!(s.image.data()[(ch * 128 + y) * 128 + x], 1.0);
                        assert!(!s.mask.get(y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(synth_slide(&SynthParams { n_blobs: 0, ..small(0) }).is_err());
        assert!(synth_slide(&SynthParams { blob_radius: (0.4, 0.45), ..small(0) }).is_err());
        assert!(synth_slide(&SynthParams { separation: 1.5, ..small(0) }).is_err());
    }

    #[test]
    fn seeded_and_split() {
        let a = synth_dataset(10, &small(5), 0.8).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (8, 2));
        assert_eq!(a, synth_dataset(10, &small(5), 0.8).unwrap());
        assert_ne!(a.train[0].image, synth_dataset(10, &small(6), 0.8).unwrap().train[0].image);
    }

    #[test]
    fn instances_are_separated() {
        let m = synth_instances(48, 48, 6, 4.0, 1).unwrap();
        assert_eq!(m.instances(), (1..=6).collect::<Vec<u32>>());
    }
}
