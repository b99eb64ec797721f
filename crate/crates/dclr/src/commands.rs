//! The five pipeline stages. All of them share one run directory:
//!
//! ```text
//! <out>/data/      manifest.txt, <id>.png, <id>_mask.png
//! <out>/model/     checkpoint, trace.txt
//! <out>/segment/   manifest.txt, <id>.dten, <id>.png, <id>_patches.txt
//! <out>/refine/    manifest.txt, <id>.dten, <id>.png
//! <out>/eval/      metrics.txt, summary.txt
//! ```
//!
//! Every stage also writes its resolved `config.txt` into its directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dclr_core::convcrf::{self, ProbMap};
use dclr_core::datagen::synth_dataset;
use dclr_core::pipeline::{self, PatchLabel, Segmenter, SlideRecord};
use dclr_core::{Mask, Tensor};
use log::info;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::executor::Pool;
use crate::manifest::Manifest;
use crate::{checkpoint, dten, png_io};

const DATA: &str = "data";
const MODEL: &str = "model";
const SEGMENT: &str = "segment";
const REFINE: &str = "refine";
const EVAL: &str = "eval";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn key(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub n_patches: usize,
    pub n_pretrain_patches: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_train_loss: f32,
    /// Permutation-matched accuracy of the two clusters on labelled
    /// training patches.
    pub train_patch_accuracy: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideMetrics {
    pub id: String,
    pub dice_pre_crf: f64,
    pub dice_post_crf: Option<f64>,
    pub n_patches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub slides: Vec<SlideMetrics>,
    /// Permutation-matched accuracy of patch calls on labelled test patches.
    pub patch_accuracy: Option<f32>,
    pub mean_dice_pre_crf: f64,
    pub mean_dice_post_crf: Option<f64>,
}

/// One invocation: resolved configuration, run directory and worker pool.
pub struct Run {
    cfg: RunConfig,
    out: PathBuf,
    pool: Pool,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: PathBuf, what: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingInput { path, what })
    }
}

fn label_name(l: PatchLabel) -> &'static str {
    match l {
        PatchLabel::Tumour => "tumour",
        PatchLabel::NonTumour => "non-tumour",
        PatchLabel::Excluded => "excluded",
    }
}

fn parse_label(s: &str) -> Option<PatchLabel> {
    match s {
        "tumour" => Some(PatchLabel::Tumour),
        "non-tumour" => Some(PatchLabel::NonTumour),
        "excluded" => Some(PatchLabel::Excluded),
        _ => None,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl Run {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let pool = Pool::new(cfg.run.threads)?;
        Ok(Run {
            cfg,
            out: out.into(),
            pool,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    fn stage_dir(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.out.join(stage);
        create_dir(&dir)?;
        write_text(&dir.join("config.txt"), &self.cfg.render())?;
        Ok(dir)
    }

    /// Generates the synthetic dataset and its train/test split.
    pub fn gen(&self) -> Result<()> {
        let dir = self.stage_dir(DATA)?;
        let d = &self.cfg.datagen;
        let ds = synth_dataset(d.n_slides, &self.cfg.synth_params(), d.train_fraction)?;
        let mut m = Manifest::new("dclr-dataset");
        m.push("seed", self.cfg.run.seed).push("side", d.side);
        for (split, records) in [(Split::Train, &ds.train), (Split::Test, &ds.test)] {
            for r in records {
                png_io::write_rgb(&dir.join(format!("{}.png", r.id)), &r.image)?;
                let gt = r.ground_truth.as_ref().expect("synthetic slides are annotated");
                png_io::write_mask(&dir.join(format!("{}_mask.png", r.id)), gt)?;
                m.push(split.key(), &r.id);
            }
        }
        m.write(&dir.join("manifest.txt"))?;
        info!("gen: {} train and {} test slides in {}", ds.train.len(), ds.test.len(), dir.display());
        Ok(())
    }

    /// Slides of one split, with ground truth when its mask file exists.
    pub fn load_split(&self, split: Split) -> Result<Vec<SlideRecord>> {
        let dir = self.out.join(DATA);
        let m = Manifest::read(&dir.join("manifest.txt"), "dclr-dataset")?;
        m.all(split.key())
            .map(|id| {
                let image = png_io::read_rgb(&require(dir.join(format!("{id}.png")), "slide image")?)?;
                let mask_path = dir.join(format!("{id}_mask.png"));
                let gt = if mask_path.exists() {
                    Some(png_io::read_mask(&mask_path)?)
                } else {
                    None
                };
                Ok(SlideRecord::new(id, image, gt)?)
            })
            .collect()
    }

    /// Tissue patches of the training slides at the pretraining stride, with
    /// their labels.
    fn training_patches(&self) -> Result<(Vec<Tensor>, Vec<PatchLabel>)> {
        let side = self.cfg.encoder.input_side;
        let mut patches = Vec::new();
        let mut labels = Vec::new();
        for mut r in self.load_split(Split::Train)? {
            r.tissue_mask = Some(pipeline::remove_background(&r.image, self.cfg.pipeline.background_threshold)?);
            let (p, grid) = pipeline::extract_patches(&r, side, self.cfg.pretrain.stride)?;
            patches.extend(p);
            labels.extend(grid.placements.iter().map(|pl| match &r.ground_truth {
                Some(gt) => pipeline::label_patch(gt, pl, side, self.cfg.pipeline.label_ratio),
                None => PatchLabel::Excluded,
            }));
        }
        Ok((patches, labels))
    }

    /// Contrastive pretraining followed by fitting the two-cluster model.
    pub fn pretrain(&self) -> Result<PretrainReport> {
        let (patches, labels) = self.training_patches()?;
        let dir = self.stage_dir(MODEL)?;
        let n = patches.len();
        let cap = self.cfg.pretrain.max_patches;
        let picked: Vec<usize> = if cap == 0 || n <= cap {
            (0..n).collect()
        } else {
            (0..cap).map(|i| i * n / cap).collect()
        };
        let sub: Vec<Tensor> = picked.iter().map(|&i| patches[i].clone()).collect();
        let sub_labels: Vec<PatchLabel> = picked.iter().map(|&i| labels[i]).collect();
        info!("pretrain: {} of {n} training patches", sub.len());
        let outcome = pipeline::pretrain(&sub, Some(&sub_labels), &self.cfg.pretrain_config(), &self.pool)?;

        let mut trace = String::from("epoch train_loss val_loss val_accuracy improved\n");
        let opt = |v: Option<f32>| v.map_or_else(|| "na".to_string(), |v| format!("{v:.6}"));
        for r in &outcome.trace {
            let _ = writeln!(
                trace,
                "{} {:.6} {} {} {}",
                r.epoch,
                r.train_loss,
                opt(r.val_loss),
                opt(r.val_accuracy),
                r.improved
            );
        }
        write_text(&dir.join("trace.txt"), &trace)?;

        let (seg, clusters) = Segmenter::fit(
            outcome.model,
            &patches,
            self.cfg.pipeline.kmeans_restarts,
            self.cfg.run.seed,
            self.cfg.pretrain.chunk_size,
            &self.pool,
        )?;
        let train_patch_accuracy = if labels.iter().any(|l| l.class().is_some()) {
            Some(pipeline::patch_accuracy(&clusters.assignments, &labels)?)
        } else {
            None
        };
        let report = PretrainReport {
            n_patches: n,
            n_pretrain_patches: sub.len(),
            epochs: outcome.trace.len(),
            best_epoch: outcome.best_epoch,
            final_train_loss: outcome.trace.last().map_or(f32::NAN, |r| r.train_loss),
            train_patch_accuracy,
        };
        checkpoint::save(
            &dir,
            &seg,
            &[
                ("best_epoch", report.best_epoch.to_string()),
                ("n_patches", n.to_string()),
                ("n_pretrain_patches", report.n_pretrain_patches.to_string()),
                ("train_patch_accuracy", opt(train_patch_accuracy)),
            ],
        )?;
        info!(
            "pretrain: {} epochs (best {}), train patch accuracy {}",
            report.epochs,
            report.best_epoch,
            opt(train_patch_accuracy)
        );
        Ok(report)
    }

    /// Tumour probability maps of the test slides.
    pub fn segment(&self) -> Result<()> {
        let seg = checkpoint::load(&self.out.join(MODEL))?;
        let records = self.load_split(Split::Test)?;
        let dir = self.stage_dir(SEGMENT)?;
        let side = seg.encoder.unet().input_side;
        let mut m = Manifest::new("dclr-segment");
        for mut r in records {
            let calls = seg.segment(
                &mut r,
                self.cfg.pipeline.stride,
                self.cfg.pipeline.background_threshold,
                self.cfg.pretrain.chunk_size,
                &self.pool,
            )?;
            let grid = r.grid.as_ref().expect("segment sets the grid");
            let pred = r.prediction.as_ref().expect("segment sets the prediction");
            dten::write(&dir.join(format!("{}.dten", r.id)), pred.tensor())?;
            png_io::write_mask(&dir.join(format!("{}.png", r.id)), &pipeline::tumour_mask(pred)?)?;
            let mut rows = String::from("format = dclr-patches 1\ny0 x0 call label\n");
            for (pl, call) in grid.placements.iter().zip(&calls) {
                let label = match &r.ground_truth {
                    Some(gt) => pipeline::label_patch(gt, pl, side, self.cfg.pipeline.label_ratio),
                    None => PatchLabel::Excluded,
                };
                let _ = writeln!(rows, "{} {} {call} {}", pl.y0, pl.x0, label_name(label));
            }
            write_text(&dir.join(format!("{}_patches.txt", r.id)), &rows)?;
            m.push("slide", &r.id);
            info!("segment: {} ({} patches)", r.id, calls.len());
        }
        m.write(&dir.join("manifest.txt"))
    }

    /// Mean-field refinement of the segment stage's probability maps.
    pub fn refine(&self) -> Result<()> {
        let seg_dir = self.out.join(SEGMENT);
        let seg_manifest = Manifest::read(&seg_dir.join("manifest.txt"), "dclr-segment")?;
        let images = self.out.join(DATA);
        let dir = self.stage_dir(REFINE)?;
        let specs = self.cfg.crf_specs();
        let crf = self.cfg.crf_config();
        let mut m = Manifest::new("dclr-refine");
        for id in seg_manifest.all("slide") {
            let probs = ProbMap::new(dten::read(&require(seg_dir.join(format!("{id}.dten")), "probability map")?)?)?;
            let image = png_io::read_rgb(&require(images.join(format!("{id}.png")), "slide image")?)?;
            let [_, h, w] = image.dims3()?;
            let refined = convcrf::crf_refine(&probs, &image.reshape(&[1, 3, h, w])?, &specs, &crf)?;
            dten::write(&dir.join(format!("{id}.dten")), refined.tensor())?;
            png_io::write_mask(&dir.join(format!("{id}.png")), &pipeline::tumour_mask(&refined)?)?;
            m.push("slide", id);
            info!("refine: {id}");
        }
        m.write(&dir.join("manifest.txt"))
    }

    /// Dice before and after refinement and patch accuracy on the test
    /// slides. Refinement is optional; without it only pre-CRF metrics are
    /// reported.
    pub fn eval(&self) -> Result<EvalReport> {
        let data = self.out.join(DATA);
        let seg_dir = self.out.join(SEGMENT);
        let refine_dir = self.out.join(REFINE);
        let dataset = Manifest::read(&data.join("manifest.txt"), "dclr-dataset")?;
        Manifest::read(&seg_dir.join("manifest.txt"), "dclr-segment")?;
        let refined = refine_dir.join("manifest.txt").exists();
        if refined {
            Manifest::read(&refine_dir.join("manifest.txt"), "dclr-refine")?;
        }
        let mut slides = Vec::new();
        let mut calls = Vec::new();
        let mut labels = Vec::new();
        for id in dataset.all(Split::Test.key()) {
            let gt = png_io::read_mask(&require(data.join(format!("{id}_mask.png")), "ground-truth mask")?)?;
            let pre = png_io::read_mask(&require(seg_dir.join(format!("{id}.png")), "predicted mask")?)?;
            let post = if refined {
                Some(png_io::read_mask(&require(refine_dir.join(format!("{id}.png")), "refined mask")?)?)
            } else {
                None
            };
            let patch_file = require(seg_dir.join(format!("{id}_patches.txt")), "patch calls")?;
            let (c, l) = read_patches(&patch_file)?;
            slides.push(SlideMetrics {
                id: id.to_string(),
                dice_pre_crf: pipeline::dice(&pre, &gt)?,
                dice_post_crf: post.as_ref().map(|p: &Mask| pipeline::dice(p, &gt)).transpose()?,
                n_patches: c.len(),
            });
            calls.extend(c);
            labels.extend(l);
        }
        let patch_accuracy = if labels.iter().any(|l| l.class().is_some()) {
            Some(pipeline::patch_accuracy(&calls, &labels)?)
        } else {
            None
        };
        let report = EvalReport {
            mean_dice_pre_crf: mean(slides.iter().map(|s| s.dice_pre_crf)),
            mean_dice_post_crf: refined.then(|| mean(slides.iter().filter_map(|s| s.dice_post_crf))),
            slides,
            patch_accuracy,
        };
        let dir = self.stage_dir(EVAL)?;
        write_text(&dir.join("summary.txt"), &render_summary(&report))?;
        metrics_manifest(&report).write(&dir.join("metrics.txt"))?;
        info!(
            "eval: dice {:.4} pre-CRF, {} post-CRF",
            report.mean_dice_pre_crf,
            fmt_opt(report.mean_dice_post_crf)
        );
        Ok(report)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |v| format!("{v:.6}"))
}

fn read_patches(path: &Path) -> Result<(Vec<usize>, Vec<PatchLabel>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("format = dclr-patches 1") {
        return Err(Error::format(path, "missing `format = dclr-patches 1` header"));
    }
    if lines.next() != Some("y0 x0 call label") {
        return Err(Error::format(path, "missing column header"));
    }
    let mut calls = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = || Error::format(path, format!("line {}: malformed row {line:?}", i + 3));
        let cols: Vec<&str> = line.split_whitespace().collect();
        let [y0, x0, call, label] = cols[..] else {
            return Err(bad());
        };
        y0.parse::<usize>().map_err(|_| bad())?;
        x0.parse::<usize>().map_err(|_| bad())?;
        match call {
            "0" => calls.push(0),
            "1" => calls.push(1),
            _ => return Err(bad()),
        }
        labels.push(parse_label(label).ok_or_else(bad)?);
    }
    Ok((calls, labels))
}

/// Fixed-precision per-slide table.
pub fn render_summary(r: &EvalReport) -> String {
    let mut out = String::from("id dice_pre_crf dice_post_crf n_patches\n");
    for s in &r.slides {
        let _ = writeln!(
            out,
            "{} {:.6} {} {}",
            s.id,
            s.dice_pre_crf,
            fmt_opt(s.dice_post_crf),
            s.n_patches
        );
    }
    let total: usize = r.slides.iter().map(|s| s.n_patches).sum();
    let _ = writeln!(
        out,
        "mean {:.6} {} {total}",
        r.mean_dice_pre_crf,
        fmt_opt(r.mean_dice_post_crf)
    );
    let _ = writeln!(out, "patch_accuracy {}", fmt_opt(r.patch_accuracy.map(f64::from)));
    out
}

fn metrics_manifest(r: &EvalReport) -> Manifest {
    let mut m = Manifest::new("dclr-metrics");
    m.push("n_slides", r.slides.len())
        .push("n_patches", r.slides.iter().map(|s| s.n_patches).sum::<usize>())
        .push("patch_accuracy", fmt_opt(r.patch_accuracy.map(f64::from)))
        .push("dice_pre_crf", format!("{:.6}", r.mean_dice_pre_crf))
        .push("dice_post_crf", fmt_opt(r.mean_dice_post_crf))
        .push(
            "crf_gain",
            fmt_opt(r.mean_dice_post_crf.map(|post| post - r.mean_dice_pre_crf)),
        );
    m
}
