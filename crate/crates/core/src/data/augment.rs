use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::targets::TargetPair;
use crate::error::{Error, Result};
use crate::image::{Grid, LabelMap, Mask, RgbImage};

/// Training-time augmentation. Flips fire with probability ½ when enabled;
/// jitter factors are drawn from `[1 − x, 1 + x]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Square crop side; `None` keeps the full image.
    pub crop: Option<usize>,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: None,
            flip_horizontal: true,
            flip_vertical: true,
            elastic_alpha: 8.0,
            elastic_sigma: 4.0,
            brightness: 0.1,
            contrast: 0.1,
            saturation: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            crop: None,
            flip_horizontal: false,
            flip_vertical: false,
            elastic_alpha: 0.0,
            elastic_sigma: 4.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.elastic_alpha < 0.0 || self.elastic_sigma <= 0.0 {
            return Err(Error::Config("elastic_alpha must be ≥ 0 and elastic_sigma > 0".into()));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} jitter {v} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// An image with its instance map and derived targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotated {
    pub image: RgbImage,
    pub labels: LabelMap,
    pub targets: TargetPair,
}

impl Annotated {
    fn transform(
        &self,
        image: impl Fn(&RgbImage) -> RgbImage,
        labels: impl Fn(&LabelMap) -> LabelMap,
        mask: impl Fn(&Mask) -> Mask,
    ) -> Annotated {
        Annotated {
            image: image(&self.image),
            labels: labels(&self.labels),
            targets: TargetPair {
                nuclei: mask(&self.targets.nuclei),
                contour: mask(&self.targets.contour),
            },
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders.
fn blur(field: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let xx = (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                    kv * field[y * w + xx]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let yy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
                    kv * tmp[yy * w + x]
                })
                .sum();
        }
    }
    out
}

/// Per-pixel source coordinates of a smoothed random displacement field.
struct Warp {
    w: usize,
    h: usize,
    sx: Vec<f64>,
    sy: Vec<f64>,
}

impl Warp {
    fn random(w: usize, h: usize, alpha: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = || -> Vec<f64> { (0..w * h).map(|_| rng.random_range(-1.0..=1.0)).collect() };
        let (fx, fy) = (draw(), draw());
        let (dx, dy) = (blur(&fx, w, h, sigma), blur(&fy, w, h, sigma));
        let clamp_x = |v: f64| v.clamp(0.0, (w - 1) as f64);
        let clamp_y = |v: f64| v.clamp(0.0, (h - 1) as f64);
        let mut sx = Vec::with_capacity(w * h);
        let mut sy = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                sx.push(clamp_x(x as f64 + alpha * dx[y * w + x]));
                sy.push(clamp_y(y as f64 + alpha * dy[y * w + x]));
            }
        }
        Warp { w, h, sx, sy }
    }

    fn nearest<T: Copy + Default>(&self, g: &Grid<T>) -> Grid<T> {
        Grid::from_fn(self.w, self.h, |x, y| {
            let i = y * self.w + x;
            g.get(self.sx[i].round() as usize, self.sy[i].round() as usize)
        })
    }

    fn bilinear(&self, img: &RgbImage) -> RgbImage {
        RgbImage::from_fn(self.w, self.h, |x, y| {
            let i = y * self.w + x;
            let (fx, fy) = (self.sx[i], self.sy[i]);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(self.w - 1), (y0 + 1).min(self.h - 1));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let (a, b, c, d) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - tx) + b[ch] as f64 * tx;
                let bottom = c[ch] as f64 * (1.0 - tx) + d[ch] as f64 * tx;
                px[ch] = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
            }
            px
        })
    }
}

fn color_jitter(img: &RgbImage, brightness: f64, contrast: f64, saturation: f64) -> RgbImage {
    let gray = |p: [f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let n = (img.width() * img.height()).max(1) as f64;
    let mean = img
        .pixels()
        .map(|p| gray([p[0] as f64, p[1] as f64, p[2] as f64]))
        .sum::<f64>()
        / n;
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get(x, y);
        let mut v = [p[0] as f64, p[1] as f64, p[2] as f64];
        for c in &mut v {
            *c *= brightness;
        }
        for c in &mut v {
            *c = (*c - mean * brightness) * contrast + mean * brightness;
        }
        let g = gray(v);
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = (g + (v[c] - g) * saturation).round().clamp(0.0, 255.0) as u8;
        }
        out
    })
}

/// Random crop, flips, elastic warp (image bilinear, masks nearest) and
/// color jitter. Deterministic in `seed`.
pub fn augment(sample: &Annotated, cfg: &AugmentConfig, seed: u64) -> Result<Annotated> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (sample.image.width(), sample.image.height());
    sample.labels.same_dims(&sample.targets.nuclei, "augment")?;
    if sample.labels.width() != w || sample.labels.height() != h {
        return Err(Error::dim("augment", "H", h, sample.labels.height()));
    }
    let mut out = sample.clone();

    if let Some(c) = cfg.crop {
        if c > w.min(h) || c == 0 {
            return Err(Error::Contract(format!("crop {c} does not fit a {w}×{h} image")));
        }
        let x0 = rng.random_range(0..=w - c);
        let y0 = rng.random_range(0..=h - c);
        out = out.transform(|g| g.crop(x0, y0, c, c), |g| g.crop(x0, y0, c, c), |g| g.crop(x0, y0, c, c));
    }
    if cfg.flip_horizontal && rng.random_bool(0.5) {
        out = out.transform(RgbImage::flip_horizontal, Grid::flip_horizontal, Grid::flip_horizontal);
    }
    if cfg.flip_vertical && rng.random_bool(0.5) {
        out = out.transform(RgbImage::flip_vertical, Grid::flip_vertical, Grid::flip_vertical);
    }
    if cfg.elastic_alpha > 0.0 {
        let warp = Warp::random(out.image.width(), out.image.height(), cfg.elastic_alpha, cfg.elastic_sigma, &mut rng);
        out = out.transform(|g| warp.bilinear(g), |g| warp.nearest(g), |g| warp.nearest(g));
    }
    if cfg.brightness > 0.0 || cfg.contrast > 0.0 || cfg.saturation > 0.0 {
        let mut factor = |x: f64| if x > 0.0 { rng.random_range(1.0 - x..=1.0 + x) } else { 1.0 };
        let (b, c, s) = (factor(cfg.brightness), factor(cfg.contrast), factor(cfg.saturation));
        out.image = color_jitter(&out.image, b, c, s);
    }
    Ok(out)
}
