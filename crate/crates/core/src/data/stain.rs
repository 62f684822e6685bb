use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Target stain basis and 99th-percentile concentrations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainReference {
    /// Hematoxylin then eosin, unit optical-density vectors.
    pub stain_matrix: [[f64; 3]; 2],
    pub max_concentrations: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MacenkoParams {
    /// Optical-density norm below which a pixel counts as background.
    pub beta_od: f64,
    /// Percentile (in %) of the projected angle distribution; `100 − alpha` gives the other extreme.
    pub alpha: f64,
    pub min_tissue_pixels: usize,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        MacenkoParams {
            beta_od: 0.15,
            alpha: 1.0,
            min_tissue_pixels: 50,
        }
    }
}

/// Stain basis and per-pixel concentrations of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct StainAnalysis {
    pub stain_matrix: [[f64; 3]; 2],
    /// Row-major pixels × 2 (hematoxylin, eosin).
    pub concentrations: Vec<[f64; 2]>,
    pub max_concentrations: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Normalized {
    pub image: RgbImage,
    /// Set when too few tissue pixels were found; `image` is then the input.
    pub degenerate: bool,
}

pub fn optical_density(px: [u8; 3]) -> Vector3<f64> {
    Vector3::from_fn(|c, _| -((px[c] as f64 + 1.0) / 256.0).log10())
}

/// Linear-interpolated percentile (`q` in %) of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn unit_nonnegative(v: Vector3<f64>) -> Vector3<f64> {
    let v = if v.sum() < 0.0 { -v } else { v };
    let v = v.map(|c| c.max(0.0));
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Vector3::new(1.0, 1.0, 1.0) / 3f64.sqrt()
    }
}

/// Least-squares concentrations of every pixel in the given basis.
fn concentrations(img: &RgbImage, basis: &[[f64; 3]; 2]) -> Result<Vec<[f64; 2]>> {
    let h = Vector3::from(basis[0]);
    let e = Vector3::from(basis[1]);
    let gram = Matrix2::new(h.dot(&h), h.dot(&e), e.dot(&h), e.dot(&e));
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Numeric("stain vectors are collinear".into()))?;
    Ok(img
        .pixels()
        .map(|px| {
            let od = optical_density(px);
            let c = inv * Vector2::new(h.dot(&od), e.dot(&od));
            [c[0], c[1]]
        })
        .collect())
}

/// Estimates stain vectors from the OD principal plane. `None` when the
/// image has fewer than `min_tissue_pixels` tissue pixels.
pub fn analyze(img: &RgbImage, params: &MacenkoParams) -> Result<Option<StainAnalysis>> {
    let tissue: Vec<Vector3<f64>> = img
        .pixels()
        .map(optical_density)
        .filter(|od| od.norm() > params.beta_od)
        .collect();
    if tissue.len() < params.min_tissue_pixels.max(2) {
        return Ok(None);
    }
    let n = tissue.len() as f64;
    let mean = tissue.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for od in &tissue {
        let d = od - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let flip = |v: Vector3<f64>| if v.sum() < 0.0 { -v } else { v };
    let e1 = flip(eig.eigenvectors.column(order[0]).into_owned());
    let e2 = flip(eig.eigenvectors.column(order[1]).into_owned());

    let angles: Vec<f64> = tissue.iter().map(|od| od.dot(&e2).atan2(od.dot(&e1))).collect();
    let lo = percentile(&angles, params.alpha);
    let hi = percentile(&angles, 100.0 - params.alpha);
    let v_lo = unit_nonnegative(e1 * lo.cos() + e2 * lo.sin());
    let v_hi = unit_nonnegative(e1 * hi.cos() + e2 * hi.sin());
    // Hematoxylin absorbs more red than eosin does.
    let (h, e) = if v_lo[0] > v_hi[0] { (v_lo, v_hi) } else { (v_hi, v_lo) };
    let stain_matrix = [[h[0], h[1], h[2]], [e[0], e[1], e[2]]];

    let conc = match concentrations(img, &stain_matrix) {
        Ok(c) => c,
        // Single-stain input: both extremes coincide.
        Err(Error::Numeric(_)) => {
            let od: Vec<f64> = img.pixels().map(|px| h.dot(&optical_density(px))).collect();
            od.into_iter().map(|c| [c, 0.0]).collect()
        }
        Err(e) => return Err(e),
    };
    let max_concentrations = max_concentrations(&conc);
    Ok(Some(StainAnalysis {
        stain_matrix,
        concentrations: conc,
        max_concentrations,
    }))
}

pub fn max_concentrations(conc: &[[f64; 2]]) -> [f64; 2] {
    let col = |i: usize| conc.iter().map(|c| c[i]).collect::<Vec<_>>();
    [percentile(&col(0), 99.0), percentile(&col(1), 99.0)]
}

impl StainReference {
    pub fn from_image(img: &RgbImage, params: &MacenkoParams) -> Result<Self> {
        let a = analyze(img, params)?
            .ok_or_else(|| Error::Domain("reference image has too few tissue pixels".into()))?;
        Ok(StainReference {
            stain_matrix: a.stain_matrix,
            max_concentrations: a.max_concentrations,
        })
    }

    /// Canonical H&E basis with typical concentrations.
    pub fn standard() -> Self {
        StainReference {
            stain_matrix: [[0.5626, 0.7201, 0.4062], [0.2159, 0.8012, 0.5581]],
            max_concentrations: [1.9705, 1.0308],
        }
    }
}

/// Concentrations rescaled so their 99th percentiles match the reference.
pub fn rescaled_concentrations(analysis: &StainAnalysis, reference: &StainReference) -> Vec<[f64; 2]> {
    let scale = [0, 1].map(|i| {
        let m = analysis.max_concentrations[i];
        if m.abs() > f64::EPSILON {
            reference.max_concentrations[i] / m
        } else {
            1.0
        }
    });
    analysis
        .concentrations
        .iter()
        .map(|c| [c[0] * scale[0], c[1] * scale[1]])
        .collect()
}

/// Maps the image's stain appearance onto `reference`.
pub fn macenko_normalize(img: &RgbImage, reference: &StainReference, params: &MacenkoParams) -> Result<Normalized> {
    let Some(analysis) = analyze(img, params)? else {
        return Ok(Normalized {
            image: img.clone(),
            degenerate: true,
        });
    };
    let conc = rescaled_concentrations(&analysis, reference);
    let h = Vector3::from(reference.stain_matrix[0]);
    let e = Vector3::from(reference.stain_matrix[1]);
    let image = RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let c = conc[y * img.width() + x];
        let od = h * c[0] + e * c[1];
        [0, 1, 2].map(|ch| (256.0 * 10f64.powf(-od[ch]) - 1.0).round().clamp(0.0, 255.0) as u8)
    });
    Ok(Normalized {
        image,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate::{generate_sample, GeneratorConfig, HEMATOXYLIN};

    #[test]
    fn white_image_is_degenerate() {
        let img = RgbImage::from_fn(16, 16, |_, _| [255, 255, 255]);
        let out = macenko_normalize(&img, &StainReference::standard(), &MacenkoParams::default()).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.image, img);
    }

    #[test]
    fn single_stain_vector_is_recovered() {
        let v = Vector3::from(HEMATOXYLIN).normalize();
        let img = RgbImage::from_fn(32, 32, |x, y| {
            let c = 0.2 + 1.2 * ((x * 32 + y) as f64 / 1024.0);
            [0, 1, 2].map(|ch| (256.0 * 10f64.powf(-c * v[ch]) - 1.0).round() as u8)
        });
        let a = analyze(&img, &MacenkoParams::default()).unwrap().unwrap();
        let h = Vector3::from(a.stain_matrix[0]);
        let angle = h.dot(&v).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 3.0, "{angle}");
    }

    #[test]
    fn reference_is_a_fixed_point() {
        let img = generate_sample(&GeneratorConfig::default(), 1).unwrap().image;
        let params = MacenkoParams::default();
        let reference = StainReference::from_image(&img, &params).unwrap();
        for v in reference.stain_matrix {
            assert!((Vector3::from(v).norm() - 1.0).abs() < 1e-12);
            assert!(v.iter().all(|&c| c >= 0.0));
        }
        let a = analyze(&img, &params).unwrap().unwrap();
        let maxes = max_concentrations(&rescaled_concentrations(&a, &reference));
        for i in 0..2 {
            let rel = (maxes[i] - reference.max_concentrations[i]).abs() / reference.max_concentrations[i];
            assert!(rel < 1e-6);
        }
        let out = macenko_normalize(&img, &reference, &params).unwrap();
        assert!(!out.degenerate);
        let diff = img
            .data()
            .iter()
            .zip(out.image.data())
            .map(|(&a, &b)| (a as i32 - b as i32).abs())
            .max()
            .unwrap();
        assert!(diff <= 40, "{diff}");
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert!((percentile(&[0.0, 10.0], 99.0) - 9.9).abs() < 1e-12);
    }
}
