use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::canonical::digest;
use crate::error::{Error, Result};
use crate::image::{LabelMap, RgbImage};

/// Hematoxylin and eosin optical-density directions (unit norm).
pub const HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];
pub const EOSIN: [f64; 3] = [0.072, 0.990, 0.105];

/// Shape family and rendering parameters of one synthetic tissue type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub size: usize,
    pub count_min: usize,
    pub count_max: usize,
    /// Range of the major semi-axis in pixels.
    pub semi_axis_min: f64,
    pub semi_axis_max: f64,
    /// Largest major/minor ratio.
    pub aspect_max: f64,
    pub minor_axis_floor: f64,
    /// Chance that a nucleus is placed touching an earlier one.
    pub cluster_prob: f64,
    /// Free space kept around nuclei that are not part of a cluster.
    pub min_gap: f64,
    pub noise_std: f64,
    pub max_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            size: 64,
            count_min: 8,
            count_max: 12,
            semi_axis_min: 5.5,
            semi_axis_max: 8.0,
            aspect_max: 1.5,
            minor_axis_floor: 4.0,
            cluster_prob: 0.3,
            min_gap: 1.5,
            noise_std: 4.0,
            max_retries: 400,
        }
    }
}

impl GeneratorConfig {
    /// The held-out tissue type: more elongated nuclei, denser clustering.
    pub fn unseen() -> Self {
        GeneratorConfig {
            aspect_max: 2.0,
            cluster_prob: 0.6,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Config(format!("image size {} below 32", self.size)));
        }
        if self.count_min > self.count_max {
            return Err(Error::Config(format!(
                "nuclei count range [{}, {}] is empty",
                self.count_min, self.count_max
            )));
        }
        if !(self.semi_axis_min > 0.0 && self.semi_axis_min <= self.semi_axis_max) {
            return Err(Error::Config("semi-axis range must be positive and ordered".into()));
        }
        if self.aspect_max < 1.0 || !(0.0..=1.0).contains(&self.cluster_prob) {
            return Err(Error::Config("aspect_max must be ≥ 1 and cluster_prob in [0, 1]".into()));
        }
        if self.min_gap < 0.0 || self.noise_std < 0.0 || self.minor_axis_floor <= 0.0 {
            return Err(Error::Config("min_gap and noise_std must be ≥ 0, minor_axis_floor > 0".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest(self)
    }
}

/// One generated image with its instance annotation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub image: RgbImage,
    pub labels: LabelMap,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Squared normalized distance with axes grown by `grow`; ≤ 1 means inside.
    pub fn level(&self, x: f64, y: f64, grow: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / (self.a + grow)).powi(2) + (v / (self.b + grow)).powi(2)
    }

    /// Distance from the center to the outline along direction `phi`.
    fn radius_along(&self, phi: f64) -> f64 {
        let t = phi - self.theta;
        self.a * self.b / ((self.b * t.cos()).powi(2) + (self.a * t.sin()).powi(2)).sqrt()
    }

    pub fn bbox(&self, grow: f64, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let r = self.a + grow + 1.0;
        let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64 - 1.0) as usize;
        (
            clamp((self.cx - r).floor(), w),
            clamp((self.cy - r).floor(), h),
            clamp((self.cx + r).ceil(), w),
            clamp((self.cy + r).ceil(), h),
        )
    }

    /// Pixel centers covered when the axes are grown by `grow`.
    pub fn pixels(&self, grow: f64, w: usize, h: usize) -> Vec<(usize, usize)> {
        let (x0, y0, x1, y1) = self.bbox(grow, w, h);
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.level(x as f64, y as f64, grow) <= 1.0 {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

fn random_ellipse(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng, cx: f64, cy: f64) -> Ellipse {
    let a = rng.random_range(cfg.semi_axis_min..=cfg.semi_axis_max);
    let aspect = rng.random_range(1.0..=cfg.aspect_max);
    let b = (a / aspect).max(cfg.minor_axis_floor).min(a);
    Ellipse {
        cx,
        cy,
        a,
        b,
        theta: rng.random_range(0.0..std::f64::consts::PI),
    }
}

/// Places `n` ellipses; clustered ones overlap their anchor, the rest keep `min_gap`.
fn place(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<Ellipse>> {
    let size = cfg.size;
    let mut owner: Vec<Option<usize>> = vec![None; size * size];
    let mut placed: Vec<Ellipse> = Vec::with_capacity(n);
    let margin = cfg.minor_axis_floor;
    for i in 0..n {
        let mut accepted = None;
        for _ in 0..cfg.max_retries {
            let clustered = i > 0 && rng.random_bool(cfg.cluster_prob);
            let (e, anchor) = if clustered {
                let k = rng.random_range(0..placed.len());
                let anchor = placed[k];
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let mut e = random_ellipse(cfg, rng, 0.0, 0.0);
                let d = 0.85 * (anchor.radius_along(phi) + e.radius_along(phi + std::f64::consts::PI));
                e.cx = anchor.cx + d * phi.cos();
                e.cy = anchor.cy + d * phi.sin();
                (e, Some(k))
            } else {
                let cx = rng.random_range(margin..size as f64 - margin);
                let cy = rng.random_range(margin..size as f64 - margin);
                (random_ellipse(cfg, rng, cx, cy), None)
            };
            if e.cx < margin || e.cy < margin || e.cx > size as f64 - margin || e.cy > size as f64 - margin {
                continue;
            }
            let clear = e
                .pixels(cfg.min_gap, size, size)
                .iter()
                .all(|&(x, y)| match owner[y * size + x] {
                    None => true,
                    Some(o) => Some(o) == anchor,
                });
            if clear {
                accepted = Some(e);
                break;
            }
        }
        let e = accepted.ok_or_else(|| {
            Error::Capacity(format!(
                "could not place nucleus {} of {n} in a {size}×{size} image after {} attempts",
                i + 1,
                cfg.max_retries
            ))
        })?;
        for (x, y) in e.pixels(0.0, size, size) {
            owner[y * size + x].get_or_insert(i);
        }
        placed.push(e);
    }
    Ok(placed)
}

/// Pixels covered by several ellipses go to the one with the nearest center.
pub(crate) fn rasterize(ellipses: &[Ellipse], w: usize, h: usize) -> LabelMap {
    let mut best = vec![f64::INFINITY; w * h];
    let mut labels = LabelMap::new(w, h);
    for (i, e) in ellipses.iter().enumerate() {
        for (x, y) in e.pixels(0.0, w, h) {
            let d = (x as f64 - e.cx).powi(2) + (y as f64 - e.cy).powi(2);
            if d < best[y * w + x] {
                best[y * w + x] = d;
                labels.set(x, y, i as u32 + 1);
            }
        }
    }
    labels.relabeled()
}

/// Smooth noise in [0, 1]: bilinear interpolation of a random lattice.
fn value_noise(w: usize, h: usize, cell: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / cell, y as f64 / cell);
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (smooth(fx.fract()), smooth(fy.fract()));
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Beer–Lambert rendering: dark hematoxylin nuclei on eosin-pink stroma.
fn render(labels: &LabelMap, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = (labels.width(), labels.height());
    let stroma = value_noise(w, h, 16.0, rng);
    let grain = value_noise(w, h, 3.0, rng);
    let n = labels.max_label() as usize;
    let density: Vec<f64> = (0..=n).map(|_| rng.random_range(0.55..0.85)).collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("finite std");
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let l = labels.get(x, y) as usize;
            let (ch, ce) = if l > 0 {
                (density[l] * (0.8 + 0.4 * grain[i]), 0.12 + 0.06 * stroma[i])
            } else {
                (0.03 + 0.05 * grain[i], 0.15 + 0.3 * stroma[i])
            };
            let mut px = [0u8; 3];
            for c in 0..3 {
                let od = ch * HEMATOXYLIN[c] + ce * EOSIN[c];
                let v = 255.0 * 10f64.powf(-od) + if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.set(x, y, px);
        }
    }
    img
}

/// Deterministic in `(cfg, seed)`.
pub fn generate_sample(cfg: &GeneratorConfig, seed: u64) -> Result<SampleRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.count_min..=cfg.count_max);
    let ellipses = place(cfg, &mut rng, n)?;
    let labels = rasterize(&ellipses, cfg.size, cfg.size);
    let image = render(&labels, cfg, &mut rng);
    Ok(SampleRecord {
        image,
        labels,
        seed,
        config_digest: cfg.digest(),
    })
}
