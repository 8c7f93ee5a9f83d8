//! On-disk training datasets and batch evaluation against them.
//!
//! Layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/sample_000000/{distorted.png, mask.png, lines.jsonl, target.dfld, meta.json}
//! ```
//!
//! `meta.json` is written last, so a sample directory without it is treated
//! as incomplete and regenerated on the next run.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{crop_augment, generate_field, invert_field, warp_raster, DeformationField, DEFAULT_SAMPLING_RATIO};
use crate::io::{load_field, load_lines, load_mask, load_png, save_field, save_lines, save_mask, save_png};
use crate::metrics::{aligned_distortion, local_distortion, ms_ssim};
use crate::objective::{line_supervision, map_loss, seg_loss, SegPrediction, DEFAULT_EPSILON, DEFAULT_INTERVAL};
use crate::raster::{PixelRect, Raster};
use crate::synthdoc::{make_sample, render_document, DocumentLayout, RenderedDocument, TrainingSample, SAMPLE_SIZE};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    /// Side of the emitted samples.
    pub size: usize,
    /// Side of the generated field before the random crop.
    pub field_size: usize,
    pub severity: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { count: 8, seed: 0, size: SAMPLE_SIZE, field_size: 320, severity: 0.5 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("dataset needs at least one sample"));
        }
        if self.field_size < self.size
            || (self.size * self.size) as f64 * 4.0 < 3.0 * (self.field_size * self.field_size) as f64
        {
            return Err(Error::invalid(format!(
                "field side {} must be at least the sample side {} and crop at least 75% of it",
                self.field_size, self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::invalid(format!("severity {} outside [0, 1]", self.severity)));
        }
        Ok(())
    }
}

/// Everything needed to regenerate one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub layout_seed: u64,
    pub field_seed: u64,
    pub background_seed: u64,
    pub severity: f64,
    pub size: usize,
    pub field_size: usize,
    pub crop_rect: PixelRect,
    pub lines: usize,
    pub dropped_lines: usize,
}

impl SampleMeta {
    /// Seeds and crop for sample `index`; each index draws from its own
    /// stream of the dataset seed.
    pub fn derive(cfg: &DatasetConfig, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);
        let slack = cfg.field_size - cfg.size;
        Self {
            index,
            layout_seed: rng.gen(),
            field_seed: rng.gen(),
            background_seed: rng.gen(),
            severity: cfg.severity,
            size: cfg.size,
            field_size: cfg.field_size,
            crop_rect: PixelRect::new(rng.gen_range(0..=slack), rng.gen_range(0..=slack), cfg.size, cfg.size),
            lines: 0,
            dropped_lines: 0,
        }
    }

    /// The undistorted page this sample was rendered from.
    pub fn render(&self) -> Result<RenderedDocument> {
        render_document(&DocumentLayout::random(self.layout_seed, self.size, self.size)?)
    }

    pub fn render_reference(&self) -> Result<Raster> {
        Ok(self.render()?.image)
    }

    pub fn build(&self) -> Result<(TrainingSample, usize)> {
        let doc = self.render()?;
        let full = generate_field(self.field_seed, self.field_size, self.field_size, self.severity)?;
        let bm = crop_augment(&full, self.crop_rect)?;
        let out = make_sample(&doc, &bm, self.background_seed)?;
        out.sample.validate()?;
        Ok((out.sample, out.dropped_lines))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub dir: String,
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(root.as_ref().join(MANIFEST))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save(&self, root: &Path) -> Result<()> {
        let tmp = root.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")?;
        fs::rename(tmp, root.join(MANIFEST))?;
        Ok(())
    }
}

pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:06}")
}

fn is_complete(dir: &Path, meta: &SampleMeta) -> bool {
    let Ok(text) = fs::read_to_string(dir.join("meta.json")) else {
        return false;
    };
    let Ok(stored) = serde_json::from_str::<SampleMeta>(&text) else {
        return false;
    };
    let same_recipe = SampleMeta { lines: 0, dropped_lines: 0, ..stored } == *meta;
    same_recipe && ["distorted.png", "mask.png", "lines.jsonl", "target.dfld"].iter().all(|f| dir.join(f).is_file())
}

fn write_sample(dir: &Path, meta: &SampleMeta) -> Result<SampleMeta> {
    fs::create_dir_all(dir)?;
    let _ = fs::remove_file(dir.join("meta.json"));
    let (sample, dropped) = meta.build()?;
    save_png(dir.join("distorted.png"), &sample.distorted)?;
    save_mask(dir.join("mask.png"), &sample.mask)?;
    save_lines(dir.join("lines.jsonl"), &sample.lines)?;
    save_field(dir.join("target.dfld"), &sample.target_bm)?;
    let meta = SampleMeta { lines: sample.lines.len(), dropped_lines: dropped, ..meta.clone() };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(meta)
}

/// Outcome of [`gen_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationSummary {
    pub generated: usize,
    pub skipped: usize,
    pub manifest: Manifest,
}

/// Write `cfg.count` samples under `root`, skipping samples that are already
/// complete for the same recipe. The manifest is written before any work
/// starts, with pending samples marked incomplete, and rewritten at the end.
pub fn gen_dataset(root: impl AsRef<Path>, cfg: &DatasetConfig) -> Result<GenerationSummary> {
    cfg.validate()?;
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    if let Ok(existing) = Manifest::load(root) {
        if existing.config != *cfg {
            warn!("existing manifest has a different configuration; samples are checked individually");
        }
    }
    let metas: Vec<SampleMeta> = (0..cfg.count).map(|i| SampleMeta::derive(cfg, i)).collect();
    let done: Vec<bool> = metas.iter().map(|m| is_complete(&root.join(sample_dir_name(m.index)), m)).collect();
    let entry = |i: usize, complete: bool| ManifestEntry { index: i, dir: sample_dir_name(i), complete };
    let mut manifest =
        Manifest { config: cfg.clone(), samples: done.iter().enumerate().map(|(i, &d)| entry(i, d)).collect() };
    manifest.save(root)?;

    let results: Vec<Result<bool>> = metas
        .par_iter()
        .zip(&done)
        .map(|(meta, &complete)| {
            if complete {
                return Ok(false);
            }
            write_sample(&root.join(sample_dir_name(meta.index)), meta)?;
            Ok(true)
        })
        .collect();
    let mut generated = 0;
    let mut first_err = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(new) => {
                generated += new as usize;
                manifest.samples[i].complete = true;
            }
            Err(e) => {
                warn!("sample {i} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    manifest.save(root)?;
    if let Some(e) = first_err {
        return Err(e);
    }
    info!("dataset at {}: {generated} generated, {} reused", root.display(), cfg.count - generated);
    Ok(GenerationSummary { generated, skipped: cfg.count - generated, manifest })
}

/// A sample read back from disk.
#[derive(Clone, Debug)]
pub struct StoredSample {
    pub meta: SampleMeta,
    pub sample: TrainingSample,
}

pub fn load_sample(dir: impl AsRef<Path>) -> Result<StoredSample> {
    let dir = dir.as_ref();
    let meta: SampleMeta = serde_json::from_str(
        &fs::read_to_string(dir.join("meta.json"))
            .map_err(|_| Error::data(format!("{} has no meta.json (incomplete sample?)", dir.display())))?,
    )?;
    let sample = TrainingSample {
        distorted: load_png(dir.join("distorted.png"))?,
        mask: load_mask(dir.join("mask.png"))?,
        lines: load_lines(dir.join("lines.jsonl"))?,
        target_bm: load_field(dir.join("target.dfld"))?,
    };
    sample.validate().map_err(|e| Error::data(format!("{}: {e}", dir.display())))?;
    Ok(StoredSample { meta, sample })
}

/// Complete sample directories of a dataset, in index order.
pub fn sample_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let manifest =
        Manifest::load(root).map_err(|e| Error::data(format!("cannot read manifest in {}: {e}", root.display())))?;
    let dirs: Vec<PathBuf> = manifest.samples.iter().filter(|s| s.complete).map(|s| root.join(&s.dir)).collect();
    if dirs.is_empty() {
        return Err(Error::data(format!("dataset {} has no complete samples", root.display())));
    }
    Ok(dirs)
}

/// Per-sample evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub sample: String,
    pub ms_ssim: f64,
    pub ld: f64,
    /// Aligned distortion (variant).
    pub ad: f64,
    pub ed: Option<usize>,
    pub cer: Option<f64>,
    pub l_map: f64,
    pub l_seg: Option<f64>,
    pub l_k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMeans {
    pub ms_ssim: f64,
    pub ld: f64,
    pub ad: f64,
    pub l_map: f64,
    pub l_k: f64,
    pub l_seg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: Vec<EvalRow>,
    pub mean: EvalMeans,
}

/// Five levels when the raster is large enough, otherwise as many as fit.
fn pyramid_levels(side: usize) -> usize {
    (1..=5).rev().find(|&l| side >= (1 << (l - 1)) * 11).unwrap_or(1)
}

/// Score one predicted backward field against a stored sample. The
/// distorted view is rectified with the inverse of the prediction and
/// compared with the re-rendered flat page.
pub fn evaluate_sample(stored: &StoredSample, pred: &DeformationField, pred_mask: Option<&Raster>) -> Result<EvalRow> {
    let gt = &stored.sample.target_bm;
    if !pred.same_shape(gt) {
        return Err(Error::invalid(format!(
            "predicted field is {}x{}, sample field is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let pred = pred.clone().with_direction(gt.direction());
    let reference = stored.meta.render_reference()?.to_luma();
    let fm = invert_field(&pred, DEFAULT_SAMPLING_RATIO)?;
    let rectified = warp_raster(&stored.sample.distorted, &fm).to_luma();
    let l_seg = match pred_mask {
        Some(m) => Some(seg_loss(&SegPrediction::Probabilities(m), &stored.sample.mask)?),
        None => None,
    };
    Ok(EvalRow {
        sample: sample_dir_name(stored.meta.index),
        ms_ssim: ms_ssim(&rectified, &reference, pyramid_levels(reference.height().min(reference.width())))?,
        ld: local_distortion(&pred, gt)?,
        ad: aligned_distortion(&rectified, &reference)?,
        ed: None,
        cer: None,
        l_map: map_loss(&pred, gt)?,
        l_seg,
        l_k: line_supervision(&pred, gt, &stored.sample.lines, DEFAULT_INTERVAL, DEFAULT_EPSILON)?.loss,
    })
}

/// Evaluate `pred_dir/sample_%06d.dfld` (and `sample_%06d.mask.png` when
/// present) against every complete sample of the dataset at `gt_dir`.
pub fn evaluate_dataset(pred_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>) -> Result<EvalReport> {
    let pred_dir = pred_dir.as_ref();
    let dirs = sample_dirs(gt_dir)?;
    let rows: Vec<Result<EvalRow>> = dirs
        .par_iter()
        .map(|dir| {
            let stored = load_sample(dir)?;
            let name = sample_dir_name(stored.meta.index);
            let field_path = pred_dir.join(format!("{name}.dfld"));
            if !field_path.is_file() {
                return Err(Error::data(format!("missing prediction {}", field_path.display())));
            }
            let pred = load_field(field_path)?;
            let mask_path = pred_dir.join(format!("{name}.mask.png"));
            let mask = if mask_path.is_file() { Some(load_mask(mask_path)?) } else { None };
            evaluate_sample(&stored, &pred, mask.as_ref())
        })
        .collect();
    let samples = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let n = samples.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| samples.iter().map(f).sum::<f64>() / n;
    let l_seg = if samples.iter().all(|r| r.l_seg.is_some()) {
        Some(samples.iter().map(|r| r.l_seg.unwrap()).sum::<f64>() / n)
    } else {
        None
    };
    let mean = EvalMeans {
        ms_ssim: mean(|r| r.ms_ssim),
        ld: mean(|r| r.ld),
        ad: mean(|r| r.ad),
        l_map: mean(|r| r.l_map),
        l_k: mean(|r| r.l_k),
        l_seg,
    };
    Ok(EvalReport { samples, mean })
}
