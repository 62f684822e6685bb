use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::generate::Ellipse;
use crate::error::{Error, Result};
use crate::image::{dilate, erode, LabelMap};

/// Simulated annotation errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Probability of deleting each true instance.
    pub instance_flip_rate: f64,
    /// Expected number of spurious instances per image.
    pub spurious_rate: f64,
    /// Largest erosion/dilation radius applied per instance.
    pub boundary_jitter: usize,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("instance_flip_rate", self.instance_flip_rate),
            ("spurious_rate", self.spurious_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn is_clean(&self) -> bool {
        self.instance_flip_rate == 0.0 && self.spurious_rate == 0.0 && self.boundary_jitter == 0
    }
}

/// Deletes, adds and reshapes instances, then relabels contiguously.
pub fn inject_label_noise(labels: &LabelMap, noise: &NoiseConfig, seed: u64) -> Result<LabelMap> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (labels.width(), labels.height());
    let n = labels.max_label();
    let j = noise.boundary_jitter as i64;
    let draws: Vec<(bool, i64)> = (0..n)
        .map(|_| {
            let drop = rng.random::<f64>() < noise.instance_flip_rate;
            let radius = rng.random_range(-j..=j);
            (drop, radius)
        })
        .collect();

    let mut out = labels.map(|l| if l > 0 && draws[l as usize - 1].0 { 0 } else { l });
    if j > 0 {
        for l in 1..=n {
            let (drop, radius) = draws[l as usize - 1];
            if drop || radius >= 0 {
                continue;
            }
            let mask = out.mask_of(l);
            if mask.count() == 0 {
                continue;
            }
            // Shrink as far as the instance survives.
            let mut r = radius.unsigned_abs() as usize;
            let mut eroded = erode(&mask, r);
            while eroded.count() == 0 {
                r -= 1;
                eroded = erode(&mask, r);
            }
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                if *v == l && !eroded.data()[i] {
                    *v = 0;
                }
            }
        }
        let before = out.clone();
        for l in 1..=n {
            let (drop, radius) = draws[l as usize - 1];
            if drop || radius <= 0 {
                continue;
            }
            let grown = dilate(&before.mask_of(l), radius as usize);
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                if *v == 0 && before.data()[i] == 0 && grown.data()[i] {
                    *v = l;
                }
            }
        }
    }

    if noise.spurious_rate > 0.0 {
        let count = Poisson::new(noise.spurious_rate).expect("positive rate").sample(&mut rng) as usize;
        for k in 0..count {
            let e = Ellipse {
                cx: rng.random_range(0.0..w as f64),
                cy: rng.random_range(0.0..h as f64),
                a: rng.random_range(2.0..4.0),
                b: rng.random_range(1.5..3.0),
                theta: rng.random_range(0.0..std::f64::consts::PI),
            };
            let label = n + 1 + k as u32;
            for (x, y) in e.pixels(0.0, w, h) {
                if out.get(x, y) == 0 {
                    out.set(x, y, label);
                }
            }
        }
    }
    Ok(out.relabeled())
}
