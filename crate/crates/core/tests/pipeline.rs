use dclr_core::augment::{Policy, Transform, TransformSpec};
use dclr_core::convcrf::{self, CrfConfig, ProbMap};
use dclr_core::datagen::{synth_slide, SynthParams};
use dclr_core::encoder::{DUNetConfig, ProjectionConfig};
use dclr_core::exec::Sequential;
use dclr_core::pipeline::{self, PretrainConfig, SlideRecord};
use dclr_core::{Mask, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn separable_record(seed: u64, side: usize) -> SlideRecord {
    let s = synth_slide(&SynthParams {
        side,
        ..SynthParams::separable(seed)
    })
    .unwrap();
    SlideRecord::new(format!("s{seed}"), s.image, Some(s.mask)).unwrap()
}

fn tissue_patches(n_slides: u64, side: usize, stride: usize) -> Vec<Tensor> {
    let mut out = Vec::new();
    for seed in 0..n_slides {
        let mut r = separable_record(seed, 256);
        r.tissue_mask = Some(pipeline::remove_background(&r.image, 0.9).unwrap());
        out.extend(pipeline::extract_patches(&r, side, stride).unwrap().0);
    }
    out
}

fn small_config(seed: u64) -> PretrainConfig {
    PretrainConfig {
        unet: DUNetConfig {
            depth: 2,
            base_channels: 4,
            input_side: 16,
            embed_dim: 8,
            extra_bottleneck_conv: true,
        },
        projection: ProjectionConfig {
            hidden_dim: 8,
            proj_dim: 4,
        },
        batch_size: 16,
        seed,
        ..PretrainConfig::default()
    }
}

fn blobs(seed: u64, n: usize, d: usize, sigma: f32, gap: f32) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut truth = Vec::new();
    for i in 0..n {
        let c = i % 2;
        truth.push(c);
        for j in 0..d {
            let centre = if j == 0 { c as f32 * gap } else { 0.0 };
            data.push(centre + sigma * rng.gen_range(-1.0f32..1.0));
        }
    }
    (Tensor::new(&[n, d], data).unwrap(), truth)
}

#[test]
fn kmeans_recovers_well_separated_blobs() {
    for seed in 0..5 {
        let (emb, truth) = blobs(seed, 200, 6, 0.5, 10.0 * 0.5 * 2.0);
        let c = pipeline::cluster_patches(&emb, 2, 4, seed).unwrap();
        assert_eq!(pipeline::accuracy(&c.assignments, &truth).unwrap(), 1.0);
    }
}

#[test]
fn kmeans_with_as_many_points_as_clusters() {
    let emb = Tensor::new(&[3, 2], vec![0.0, 0.0, 4.0, 1.0, -2.0, 7.0]).unwrap();
    let c = pipeline::cluster_patches(&emb, 3, 2, 9).unwrap();
    let mut seen = c.assignments.clone();
    seen.sort_unstable();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(c.inertia, 0.0);
}

#[test]
fn kmeans_is_invariant_to_duplicating_points() {
    let (emb, _) = blobs(42, 60, 4, 1.0, 3.0);
    let doubled: Vec<f32> = emb.data().iter().chain(emb.data()).copied().collect();
    let doubled = Tensor::new(&[120, 4], doubled).unwrap();
    let a = pipeline::cluster_patches(&emb, 2, 4, 3).unwrap();
    let b = pipeline::cluster_patches(&doubled, 2, 4, 3).unwrap();
    let same = |x: &[usize], y: &[usize]| pipeline::accuracy(x, y).unwrap() == 1.0;
    assert!(same(&a.assignments, &b.assignments[..60]));
    assert_eq!(&b.assignments[..60], &b.assignments[60..]);
}

#[test]
fn zero_patience_runs_one_epoch() {
    let patches = tissue_patches(1, 16, 16);
    let cfg = PretrainConfig {
        patience: 0,
        ..small_config(1)
    };
    let out = pipeline::pretrain(&patches[..40], None, &cfg, &Sequential).unwrap();
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn two_epoch_smoke_run_on_128_patches() {
    let patches = tissue_patches(2, 16, 16);
    assert!(patches.len() >= 128);
    let cfg = PretrainConfig {
        max_epochs: 2,
        ..small_config(2)
    };
    let out = pipeline::pretrain(&patches[..128], None, &cfg, &Sequential).unwrap();
    assert_eq!(out.trace.len(), 2);
    assert_eq!(out.trace.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
    assert!(out.trace.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_some()));
}

#[test]
fn training_loss_falls_on_separable_patches() {
    let patches = tissue_patches(2, 16, 16);
    let cfg = PretrainConfig {
        max_epochs: 6,
        ..small_config(3)
    };
    let out = pipeline::pretrain(&patches[..128], None, &cfg, &Sequential).unwrap();
    let first = out.trace.first().unwrap().train_loss;
    let last = out.trace.last().unwrap().train_loss;
    assert!(last < first, "training loss went from {first} to {last}");
}

#[test]
fn pretraining_is_reproducible() {
    let patches = tissue_patches(1, 16, 16);
    let cfg = PretrainConfig {
        max_epochs: 2,
        ..small_config(4)
    };
    let a = pipeline::pretrain(&patches[..48], None, &cfg, &Sequential).unwrap();
    let b = pipeline::pretrain(&patches[..48], None, &cfg, &Sequential).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn default_tiling_of_a_full_slide() {
    let mut r = separable_record(5, 512);
    r.tissue_mask = Some(pipeline::remove_background(&r.image, 0.9).unwrap());
    let (patches, grid) = pipeline::extract_patches(&r, 64, 64).unwrap();
    assert!(patches.len() <= 64);
    // the 51 px frame makes the whole outer ring of 64 px tiles mostly background
    assert_eq!(patches.len(), 36);
    assert!(grid.placements.iter().all(|p| p.y0 >= 64 && p.x0 >= 64 && p.y0 < 448 && p.x0 < 448));
}

#[test]
fn half_white_slide_has_half_tissue() {
    let (h, w) = (10usize, 16usize);
    let img: Vec<f32> = (0..3)
        .flat_map(|ch| {
            (0..h * w).map(move |p| {
                if p % w < w / 2 {
                    1.0
                } else {
                    [0.9, 0.62, 0.8][ch]
                }
            })
        })
        .collect();
    let mask = pipeline::remove_background(&Tensor::new(&[3, h, w], img).unwrap(), 0.9).unwrap();
    assert_eq!(mask.fraction(), 0.5);
}

#[test]
fn checkerboard_labels_stitch_to_blocks() {
    let (side, n) = (8usize, 4usize);
    let record = SlideRecord::new("c", Tensor::full(&[3, side * n, side * n], 0.5).unwrap(), None).unwrap();
    let (_, grid) = pipeline::extract_patches(&record, side, side).unwrap();
    let probs: Vec<f32> = grid.placements.iter().map(|p| ((p.row + p.col) % 2) as f32).collect();
    let mask = pipeline::tumour_mask(&pipeline::stitch(&grid, &probs).unwrap()).unwrap();
    for y in 0..side * n {
        for x in 0..side * n {
            assert_eq!(mask.get(y, x), (y / side + x / side) % 2 == 1);
        }
    }
    // every tile edge is a label edge
    let edges = (0..side * n)
        .flat_map(|y| (1..side * n).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(y, x) != mask.get(y, x - 1))
        .count();
    assert_eq!(edges, (n - 1) * side * n);
}

/// A blocky prediction of a blob and its image, as stitching produces.
fn blocky_fixture(seed: u64) -> (ProbMap, Tensor, Mask) {
    let side = 96;
    let s = synth_slide(&SynthParams {
        side,
        n_blobs: 2,
        blob_radius: (0.12, 0.16),
        ..SynthParams::separable(seed)
    })
    .unwrap();
    let tile = 8;
    let mut fg = vec![0.0f32; side * side];
    for ty in 0..side / tile {
        for tx in 0..side / tile {
            let hits = s.mask.count_in(ty * tile, tx * tile, tile, tile) as f32 / (tile * tile) as f32;
            let p = if hits >= 0.5 { 0.8 } else { 0.2 };
            for y in ty * tile..(ty + 1) * tile {
                for x in tx * tile..(tx + 1) * tile {
                    fg[y * side + x] = p;
                }
            }
        }
    }
    let image = s.image.reshape(&[1, 3, side, side]).unwrap();
    (ProbMap::from_foreground(side, side, &fg).unwrap(), image, s.mask)
}

fn dice_of(map: &ProbMap, gt: &Mask) -> f64 {
    pipeline::dice(&pipeline::tumour_mask(map).unwrap(), gt).unwrap()
}

#[test]
fn crf_training_trace_never_increases() {
    let (probs, image, _) = blocky_fixture(1);
    let target = probs.argmax();
    let cfg = CrfConfig {
        filter_size: 5,
        iterations: 3,
    };
    let fit = convcrf::train_crf(&probs, &image, &target, &convcrf::default_specs(), &cfg, 8, 0.5).unwrap();
    assert!(fit.loss_trace.len() >= 2);
    assert!(fit.loss_trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn crf_refinement_sharpens_blocky_masks() {
    let cfg = CrfConfig::default();
    let specs = convcrf::default_specs();
    for seed in 0..3 {
        let (probs, image, gt) = blocky_fixture(seed);
        let before = dice_of(&probs, &gt);
        let after = dice_of(&convcrf::crf_refine(&probs, &image, &specs, &cfg).unwrap(), &gt);
        assert!(after > before, "seed {seed}: dice {before} -> {after}");
    }
}

#[test]
fn trained_crf_is_at_least_as_good_as_defaults() {
    let cfg = CrfConfig {
        filter_size: 7,
        iterations: 3,
    };
    let specs = convcrf::default_specs();
    for seed in 0..2 {
        let (probs, image, gt) = blocky_fixture(10 + seed);
        let target: Vec<u8> = gt.data().iter().map(|&t| u8::from(t)).collect();
        let fit = convcrf::train_crf(&probs, &image, &target, &specs, &cfg, 10, 0.5).unwrap();
        let default = dice_of(&convcrf::crf_refine(&probs, &image, &specs, &cfg).unwrap(), &gt);
        let trained = dice_of(&convcrf::crf_refine(&probs, &image, &fit.specs, &cfg).unwrap(), &gt);
        assert!(trained >= default, "seed {seed}: trained {trained} < default {default}");
    }
}

#[test]
fn augment_policy_from_single_transform_is_usable_for_pretraining() {
    let patches = tissue_patches(1, 16, 16);
    let cfg = PretrainConfig {
        max_epochs: 1,
        policy: Policy {
            transforms: vec![TransformSpec::new(Transform::HorizontalFlip, 0.5).unwrap()],
        },
        ..small_config(6)
    };
    let out = pipeline::pretrain(&patches[..32], None, &cfg, &Sequential).unwrap();
    assert_eq!(out.trace.len(), 1);
}
