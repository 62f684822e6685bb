//! Aggregated Jaccard Index, detection F1 and corpus-level reports.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::corpus::{read_labels, CorpusManifest, Split};
use crate::error::{Error, Result};
use crate::image::LabelMap;

/// Overlap statistics between two label maps.
struct Contingency {
    gt_area: Vec<usize>,
    pred_area: Vec<usize>,
    /// Per GT label: `(pred label, intersection)` sorted by pred label.
    overlaps: Vec<Vec<(u32, usize)>>,
}

impl Contingency {
    fn new(gt: &LabelMap, pred: &LabelMap) -> Result<Self> {
        gt.same_dims(pred, "metrics")?;
        let gt_area = gt.areas();
        let pred_area = pred.areas();
        let mut table: HashMap<(u32, u32), usize> = HashMap::new();
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            if g > 0 && p > 0 {
                *table.entry((g, p)).or_default() += 1;
            }
        }
        let mut overlaps = vec![Vec::new(); gt_area.len()];
        for ((g, p), n) in table {
            overlaps[g as usize].push((p, n));
        }
        for o in &mut overlaps {
            o.sort_unstable();
        }
        Ok(Contingency {
            gt_area,
            pred_area,
            overlaps,
        })
    }

    fn union(&self, g: u32, p: u32, inter: usize) -> usize {
        self.gt_area[g as usize] + self.pred_area[p as usize] - inter
    }

    fn gt_labels(&self) -> impl Iterator<Item = u32> + '_ {
        (1..self.gt_area.len() as u32).filter(|&g| self.gt_area[g as usize] > 0)
    }

    fn pred_labels(&self) -> impl Iterator<Item = u32> + '_ {
        (1..self.pred_area.len() as u32).filter(|&p| self.pred_area[p as usize] > 0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AjiVariant {
    /// Independent argmax per GT; a prediction may serve several GTs.
    #[default]
    Literal,
    /// Each prediction is consumed by the first GT that selects it.
    MarkUsed,
}

/// Best match of one GT instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GtMatch {
    pub gt: u32,
    pub pred: Option<u32>,
    pub intersection: usize,
    pub union: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub matches: Vec<GtMatch>,
    /// Predictions never selected by any GT.
    pub unmatched: Vec<u32>,
}

pub fn aji_matches(gt: &LabelMap, pred: &LabelMap, variant: AjiVariant) -> Result<MatchResult> {
    let t = Contingency::new(gt, pred)?;
    let mut used = vec![false; t.pred_area.len()];
    let mut matches = Vec::new();
    for g in t.gt_labels() {
        let mut best: Option<(u32, usize, usize, f64)> = None;
        for &(p, inter) in &t.overlaps[g as usize] {
            if variant == AjiVariant::MarkUsed && used[p as usize] {
                continue;
            }
            let union = t.union(g, p, inter);
            let iou = inter as f64 / union as f64;
            // Strict comparison keeps the lowest pred label on ties.
            if best.is_none_or(|b| iou > b.3) {
                best = Some((p, inter, union, iou));
            }
        }
        matches.push(match best {
            Some((p, intersection, union, iou)) => {
                used[p as usize] = true;
                GtMatch {
                    gt: g,
                    pred: Some(p),
                    intersection,
                    union,
                    iou,
                }
            }
            None => GtMatch {
                gt: g,
                pred: None,
                intersection: 0,
                union: t.gt_area[g as usize],
                iou: 0.0,
            },
        });
    }
    let unmatched = t.pred_labels().filter(|&p| !used[p as usize]).collect();
    Ok(MatchResult { matches, unmatched })
}

/// Aggregated intersection over aggregated union, with never-selected
/// predictions added to the denominator. Two empty maps score 1.
pub fn aji_with(gt: &LabelMap, pred: &LabelMap, variant: AjiVariant) -> Result<f64> {
    let m = aji_matches(gt, pred, variant)?;
    let pred_area = pred.areas();
    let num: usize = m.matches.iter().map(|g| g.intersection).sum();
    let den: usize =
        m.matches.iter().map(|g| g.union).sum::<usize>() + m.unmatched.iter().map(|&p| pred_area[p as usize]).sum::<usize>();
    Ok(if den == 0 { 1.0 } else { num as f64 / den as f64 })
}

pub fn aji(gt: &LabelMap, pred: &LabelMap) -> Result<f64> {
    aji_with(gt, pred, AjiVariant::Literal)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub gt_count: usize,
    pub pred_count: usize,
}

/// One-to-one greedy matching by descending IoU among pairs with IoU ≥ `iou_threshold`.
pub fn f1_detection(gt: &LabelMap, pred: &LabelMap, iou_threshold: f64) -> Result<Detection> {
    let t = Contingency::new(gt, pred)?;
    let mut pairs: Vec<(f64, u32, u32)> = Vec::new();
    for g in t.gt_labels() {
        for &(p, inter) in &t.overlaps[g as usize] {
            let iou = inter as f64 / t.union(g, p, inter) as f64;
            if iou >= iou_threshold {
                pairs.push((iou, g, p));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; t.gt_area.len()];
    let mut pred_used = vec![false; t.pred_area.len()];
    let mut tp = 0;
    for (_, g, p) in pairs {
        if !gt_used[g as usize] && !pred_used[p as usize] {
            gt_used[g as usize] = true;
            pred_used[p as usize] = true;
            tp += 1;
        }
    }
    let gt_count = t.gt_labels().count();
    let pred_count = t.pred_labels().count();
    let (precision, recall) = match (gt_count, pred_count) {
        (0, 0) => (1.0, 1.0),
        (0, _) | (_, 0) => (0.0, 0.0),
        _ => (tp as f64 / pred_count as f64, tp as f64 / gt_count as f64),
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Detection {
        precision,
        recall,
        f1,
        true_positives: tp,
        gt_count,
        pred_count,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image: String,
    pub split: Split,
    pub aji: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gt_count: usize,
    pub pred_count: usize,
}

impl ImageMetrics {
    pub fn compute(image: &str, split: Split, gt: &LabelMap, pred: &LabelMap, variant: AjiVariant) -> Result<Self> {
        let d = f1_detection(gt, pred, 0.5)?;
        Ok(ImageMetrics {
            image: image.to_string(),
            split,
            aji: aji_with(gt, pred, variant)?,
            precision: d.precision,
            recall: d.recall,
            f1: d.f1,
            gt_count: d.gt_count,
            pred_count: d.pred_count,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub images: usize,
    pub aji: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SplitSummary {
    fn of<'a>(rows: impl Iterator<Item = &'a ImageMetrics>) -> Self {
        let rows: Vec<_> = rows.collect();
        let n = rows.len();
        let mean = |f: fn(&ImageMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                rows.iter().map(|r| f(r)).sum::<f64>() / n as f64
            }
        };
        SplitSummary {
            images: n,
            aji: mean(|r| r.aji),
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f1: mean(|r| r.f1),
        }
    }
}

/// Per-image rows plus per-split and overall means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub splits: BTreeMap<String, SplitSummary>,
    pub overall: SplitSummary,
    /// Prediction files that were expected but not found.
    pub missing: Vec<PathBuf>,
}

impl MetricsReport {
    pub fn from_rows(images: Vec<ImageMetrics>, missing: Vec<PathBuf>) -> Self {
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            if images.iter().any(|r| r.split == split) {
                splits.insert(split.to_string(), SplitSummary::of(images.iter().filter(|r| r.split == split)));
            }
        }
        let overall = SplitSummary::of(images.iter());
        MetricsReport {
            images,
            splits,
            overall,
            missing,
        }
    }

    pub fn split_aji(&self, split: Split) -> Option<f64> {
        self.splits.get(split.as_str()).map(|s| s.aji)
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "image,split,aji,precision,recall,f1")?;
        for r in &self.images {
            writeln!(w, "{},{},{},{},{},{}", r.image, r.split, r.aji, r.precision, r.recall, r.f1)?;
        }
        Ok(())
    }

    /// Summary without per-image rows.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "splits": self.splits,
            "overall": self.overall,
            "missing": self.missing,
        })
    }
}

/// Scores `<pred_dir>/<id>.png` against the manifest labels of the chosen splits.
/// Missing predictions are listed in the report and skipped.
pub fn evaluate_corpus(
    gt_dir: &Path,
    pred_dir: &Path,
    manifest: &CorpusManifest,
    splits: &[Split],
    variant: AjiVariant,
) -> Result<MetricsReport> {
    let entries: Vec<_> = manifest.samples.iter().filter(|e| splits.contains(&e.split)).collect();
    if entries.is_empty() {
        return Err(Error::Contract("manifest lists no images for the requested splits".into()));
    }
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for e in entries {
        let pred_path = pred_dir.join(format!("{}.png", e.id()));
        if !pred_path.exists() {
            missing.push(pred_path);
            continue;
        }
        let gt = read_labels(&gt_dir.join(&e.labels))?;
        let pred = read_labels(&pred_path)?;
        rows.push(ImageMetrics::compute(e.id(), e.split, &gt, &pred, variant)?);
    }
    Ok(MetricsReport::from_rows(rows, missing))
}
