//! Tiled inference, instance extraction and corpus evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::prepare_image;
use crate::data::corpus::{write_labels, Corpus, Split};
use crate::data::{extract_targets, Annotated};
use crate::error::{Error, Result};
use crate::image::{LabelMap, ProbMap, RgbImage};
use crate::losses::{LossConfig, P_CLAMP};
use crate::metrics::{aji_with, AjiVariant, ImageMetrics, MetricsReport};
use crate::model::{checkpoint, CiaNet, CiaNetConfig};
use crate::post::{extract_instances, PostConfig};
use crate::tensor::Tensor;

/// Tiles evaluated per forward pass.
const TILE_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub tile: usize,
    pub stride: usize,
    pub aji_variant: AjiVariant,
    pub stain_normalize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tile: 64,
            stride: 32,
            aji_variant: AjiVariant::Literal,
            stain_normalize: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || self.tile % 16 != 0 {
            return Err(Error::Config(format!("tile {} must be a positive multiple of 16", self.tile)));
        }
        if self.stride == 0 || self.stride > self.tile {
            return Err(Error::Config(format!("stride {} must be in 1..={}", self.stride, self.tile)));
        }
        Ok(())
    }
}

/// Tile starts covering `0..len`; the last tile is flush with the end.
pub fn tile_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + tile < len).collect();
    out.push(len - tile);
    out.dedup();
    out
}

/// Nuclei and contour probability maps at full resolution. Images larger than
/// one tile are covered by overlapping tiles whose outputs are averaged.
pub fn predict_maps(model: &CiaNet<f32>, image: &RgbImage, eval: &EvalConfig) -> Result<(ProbMap, ProbMap)> {
    eval.validate()?;
    let (w, h) = (image.width(), image.height());
    let tw = if w <= eval.tile { w } else { eval.tile };
    let th = if h <= eval.tile { h } else { eval.tile };
    if tw % 16 != 0 || th % 16 != 0 {
        return Err(Error::Contract(format!(
            "image {w}×{h} smaller than the {} tile must have sides that are multiples of 16",
            eval.tile
        )));
    }
    let mut tiles = Vec::new();
    for &y in &tile_origins(h, th, eval.stride) {
        for &x in &tile_origins(w, tw, eval.stride) {
            tiles.push((x, y));
        }
    }
    let mut sum_n = vec![0f64; w * h];
    let mut sum_c = vec![0f64; w * h];
    let mut count = vec![0u32; w * h];
    for group in tiles.chunks(TILE_BATCH) {
        let inputs: Vec<Tensor<f32>> = group.iter().map(|&(x, y)| image.crop(x, y, tw, th).to_tensor()).collect();
        let out = model.predict(&Tensor::stack(&inputs)?)?;
        for (k, &(x0, y0)) in group.iter().enumerate() {
            let pn = out.final_nuclei.plane(k, 0);
            let pc = out.final_contour.plane(k, 0);
            for ty in 0..th {
                for tx in 0..tw {
                    let (i, j) = ((y0 + ty) * w + x0 + tx, ty * tw + tx);
                    sum_n[i] += pn[j] as f64;
                    sum_c[i] += pc[j] as f64;
                    count[i] += 1;
                }
            }
        }
    }
    let avg = |s: Vec<f64>| {
        let data = s.iter().zip(&count).map(|(v, &c)| (v / c as f64) as f32).collect();
        ProbMap::from_raw(w, h, data)
    };
    Ok((avg(sum_n)?, avg(sum_c)?))
}

/// Instance labels plus the probability maps they came from.
pub fn predict_instances(
    model: &CiaNet<f32>,
    image: &RgbImage,
    post: &PostConfig,
    eval: &EvalConfig,
) -> Result<(LabelMap, ProbMap, ProbMap)> {
    let image = prepare_image(image, eval.stain_normalize)?;
    let (pn, pc) = predict_maps(model, &image, eval)?;
    let labels = extract_instances(&pn, &pc, post)?;
    Ok((labels, pn, pc))
}

/// Mean AJI over held-out training images.
pub(crate) fn validation_aji(model: &CiaNet<f32>, items: &[Annotated], post: &PostConfig) -> Result<f64> {
    let eval = EvalConfig::default();
    let mut total = 0.0;
    for a in items {
        let (pn, pc) = predict_maps(model, &a.image, &eval)?;
        total += aji_with(&a.labels, &extract_instances(&pn, &pc, post)?, eval.aji_variant)?;
    }
    Ok(total / items.len() as f64)
}

fn selected<'a>(
    corpus: &'a Corpus,
    splits: &[Split],
) -> Result<Vec<(&'a crate::data::ManifestEntry, &'a crate::data::SampleRecord)>> {
    let chosen: Vec<_> = splits.iter().flat_map(|&s| corpus.split(s)).collect();
    if chosen.is_empty() {
        return Err(Error::Contract("corpus has no images for the requested splits".into()));
    }
    Ok(chosen)
}

/// Per-image AJI and detection scores computed in memory.
pub fn evaluate_model(
    model: &CiaNet<f32>,
    corpus: &Corpus,
    splits: &[Split],
    post: &PostConfig,
    eval: &EvalConfig,
) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for (entry, rec) in selected(corpus, splits)? {
        let (pred, _, _) = predict_instances(model, &rec.image, post, eval)?;
        rows.push(ImageMetrics::compute(entry.id(), entry.split, &rec.labels, &pred, eval.aji_variant)?);
    }
    Ok(MetricsReport::from_rows(rows, Vec::new()))
}

/// Writes `<out>/<id>.png` label maps for every selected image.
pub fn infer_corpus(
    model: &CiaNet<f32>,
    corpus: &Corpus,
    splits: &[Split],
    post: &PostConfig,
    eval: &EvalConfig,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (entry, rec) in selected(corpus, splits)? {
        let (pred, _, _) = predict_instances(model, &rec.image, post, eval)?;
        let path = out.join(format!("{}.png", entry.id()));
        write_labels(&path, &pred)?;
        written.push(path);
    }
    Ok(written)
}

/// Loads a checkpoint, checking its architecture against `expected` when given.
pub fn load_model(path: &Path, expected: Option<&CiaNetConfig>) -> Result<CiaNet<f32>> {
    let loaded = checkpoint::load::<f32>(path)?;
    if let Some(cfg) = expected {
        if &loaded.model.config != cfg {
            return Err(Error::Contract(format!(
                "{} was trained with a different model config ({} vs {} parameters, use_iam {} vs {})",
                path.display(),
                loaded.model.param_count(),
                CiaNet::<f32>::build(cfg, 0).map(|m| m.param_count()).unwrap_or(0),
                loaded.model.config.use_iam,
                cfg.use_iam
            )));
        }
    }
    Ok(loaded.model)
}

pub fn evaluate_checkpoint(
    path: &Path,
    expected: Option<&CiaNetConfig>,
    corpus: &Corpus,
    splits: &[Split],
    post: &PostConfig,
    eval: &EvalConfig,
) -> Result<MetricsReport> {
    let model = load_model(path, expected)?;
    evaluate_model(&model, corpus, splits, post, eval)
}

/// Per-pixel nuclei loss of the model's predictions on foreground pixels,
/// measured with the configured loss against the clean nuclei target.
pub fn foreground_pixel_losses(
    model: &CiaNet<f32>,
    corpus: &Corpus,
    splits: &[Split],
    loss: &LossConfig,
    contour_radius: usize,
    eval: &EvalConfig,
) -> Result<Vec<f64>> {
    loss.validate()?;
    let mut out = Vec::new();
    for (_, rec) in selected(corpus, splits)? {
        let image = prepare_image(&rec.image, eval.stain_normalize)?;
        let (pn, _) = predict_maps(model, &image, eval)?;
        let target = extract_targets(&rec.labels, contour_radius).nuclei;
        for ((&p, &t), &l) in pn.data().iter().zip(target.data()).zip(rec.labels.data()) {
            if l != 0 {
                let p = (p as f64).clamp(P_CLAMP, 1.0 - P_CLAMP);
                out.push(loss.pixel(p, if t { 1.0 } else { 0.0 })?.value);
            }
        }
    }
    Ok(out)
}
