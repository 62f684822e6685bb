//! Probability maps to instance labels: marker subtraction, thresholding,
//! connected components, size filtering and barrier-limited regrowth.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{LabelMap, Mask, ProbMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [(i64, i64)] {
        const FOUR: [(i64, i64); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];
        const EIGHT: [(i64, i64); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(format!("connectivity must be 4 or 8, got {v}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostConfig {
    /// Threshold on `p_nuclei − p_contour`.
    pub threshold: f64,
    pub connectivity: Connectivity,
    pub min_area: usize,
    pub post_dilation_radius: usize,
    pub dilation_enabled: bool,
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig {
            threshold: 0.3,
            connectivity: Connectivity::Eight,
            min_area: 5,
            post_dilation_radius: 1,
            dilation_enabled: true,
        }
    }
}

impl PostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > -1.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (-1, 1)", self.threshold)));
        }
        Ok(())
    }
}

fn neighbors(
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    offsets: &'static [(i64, i64)],
) -> impl Iterator<Item = (usize, usize)> {
    offsets.iter().filter_map(move |&(dx, dy)| {
        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
        (nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64).then_some((nx as usize, ny as usize))
    })
}

/// Labels maximal connected regions 1..=n in raster order of their first pixel.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> LabelMap {
    let (w, h) = (mask.width(), mask.height());
    let mut labels = LabelMap::new(w, h);
    let mut next = 0;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) || labels.get(x, y) != 0 {
                continue;
            }
            next += 1;
            labels.set(x, y, next);
            queue.push_back((x, y));
            while let Some((cx, cy)) = queue.pop_front() {
                for (nx, ny) in neighbors(cx, cy, w, h, connectivity.offsets()) {
                    if mask.get(nx, ny) && labels.get(nx, ny) == 0 {
                        labels.set(nx, ny, next);
                        queue.push_back((nx, ny));
                    }
                }
            }
        }
    }
    labels
}

/// Removes instances smaller than `min_area` and relabels the rest in order.
pub fn remove_small(labels: &LabelMap, min_area: usize) -> LabelMap {
    let areas = labels.areas();
    labels.map(|l| if areas[l as usize] < min_area { 0 } else { l }).relabeled()
}

/// Grows every instance by up to `radius` Chebyshev steps. Each free pixel
/// goes to the instance that reaches it first, the lower label on ties.
/// Barrier pixels and already labelled pixels are never claimed.
pub fn dilate_instances(instances: &LabelMap, radius: usize, barrier: &Mask) -> Result<LabelMap> {
    instances.same_dims(barrier, "dilate_instances")?;
    let (w, h) = (instances.width(), instances.height());
    let mut out = instances.clone();
    let mut frontier: Vec<(usize, usize)> = (0..w * h)
        .filter(|&i| out.data()[i] > 0)
        .map(|i| (i % w, i / w))
        .collect();
    let mut claim = vec![u32::MAX; w * h];
    for _ in 0..radius {
        let mut touched = Vec::new();
        for &(x, y) in &frontier {
            let l = out.get(x, y);
            for (nx, ny) in neighbors(x, y, w, h, Connectivity::Eight.offsets()) {
                let i = ny * w + nx;
                if out.data()[i] != 0 || barrier.data()[i] {
                    continue;
                }
                if claim[i] == u32::MAX {
                    touched.push(i);
                }
                claim[i] = claim[i].min(l);
            }
        }
        if touched.is_empty() {
            break;
        }
        touched.sort_unstable();
        frontier.clear();
        for i in touched {
            out.data_mut()[i] = claim[i];
            claim[i] = u32::MAX;
            frontier.push((i % w, i / w));
        }
    }
    Ok(out)
}

/// Pixels dilation may not enter: neither nucleus nor contour is likely.
pub fn growth_barrier(p_nuclei: &ProbMap, p_contour: &ProbMap) -> Result<Mask> {
    p_nuclei.same_dims(p_contour, "growth_barrier")?;
    let data = p_nuclei
        .data()
        .iter()
        .zip(p_contour.data())
        .map(|(&n, &c)| n + c < 0.5)
        .collect();
    Mask::from_raw(p_nuclei.width(), p_nuclei.height(), data)
}

/// `p_nuclei − p_contour` thresholded, split into components, filtered by
/// area and optionally regrown.
pub fn extract_instances(p_nuclei: &ProbMap, p_contour: &ProbMap, cfg: &PostConfig) -> Result<LabelMap> {
    cfg.validate()?;
    p_nuclei.same_dims(p_contour, "extract_instances")?;
    let marker = Mask::from_raw(
        p_nuclei.width(),
        p_nuclei.height(),
        p_nuclei
            .data()
            .iter()
            .zip(p_contour.data())
            .map(|(&n, &c)| (n as f64 - c as f64) > cfg.threshold)
            .collect(),
    )?;
    let seeds = remove_small(&connected_components(&marker, cfg.connectivity), cfg.min_area);
    if !cfg.dilation_enabled || cfg.post_dilation_radius == 0 {
        return Ok(seeds);
    }
    dilate_instances(&seeds, cfg.post_dilation_radius, &growth_barrier(p_nuclei, p_contour)?)
}
