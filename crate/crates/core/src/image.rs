//! Raster containers shared by the data, post-processing and metrics code.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Row-major single-channel raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// 0 = background, positive values = distinct instances.
pub type LabelMap = Grid<u32>;
pub type Mask = Grid<bool>;
pub type ProbMap = Grid<f32>;

impl<T: Copy + Default> Grid<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Grid {
            width,
            height,
            data: vec![T::default(); width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim("Grid::from_raw", "len", width * height, data.len()));
        }
        Ok(Grid { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Grid<U>, op: &'static str) -> Result<()> {
        if self.height != other.height {
            return Err(Error::dim(op, "H", self.height, other.height));
        }
        if self.width != other.width {
            return Err(Error::dim(op, "W", self.width, other.width));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        Grid::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Grid::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    pub fn flip_horizontal(&self) -> Self {
        Grid::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn flip_vertical(&self) -> Self {
        Grid::from_fn(self.width, self.height, |x, y| self.get(x, self.height - 1 - y))
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Block maximum over `factor`×`factor` cells (dimensions must divide).
    pub fn max_pool(&self, factor: usize) -> Result<Mask> {
        if self.height % factor != 0 {
            return Err(Error::dim("Mask::max_pool", "H", self.height.div_ceil(factor) * factor, self.height));
        }
        if self.width % factor != 0 {
            return Err(Error::dim("Mask::max_pool", "W", self.width.div_ceil(factor) * factor, self.width));
        }
        Ok(Mask::from_fn(self.width / factor, self.height / factor, |x, y| {
            (0..factor).any(|dy| (0..factor).any(|dx| self.get(x * factor + dx, y * factor + dy)))
        }))
    }

    /// 1×1×H×W tensor of 0/1 values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data).expect("mask shape")
    }
}

impl ProbMap {
    /// Channel `c` of batch item `n`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize, c: usize) -> Self {
        let s = t.shape();
        Grid {
            width: s.w,
            height: s.h,
            data: t.plane(n, c).iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data).expect("map shape")
    }
}

impl LabelMap {
    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Number of distinct non-zero labels.
    pub fn instance_count(&self) -> usize {
        let mut labels: Vec<u32> = self.data.iter().copied().filter(|&l| l > 0).collect();
        labels.sort_unstable();
        labels.dedup();
        labels.len()
    }

    /// Pixel count per label; index 0 is background.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0; self.max_label() as usize + 1];
        for &l in &self.data {
            areas[l as usize] += 1;
        }
        areas
    }

    pub fn mask_of(&self, label: u32) -> Mask {
        self.map(|l| l == label)
    }

    pub fn foreground(&self) -> Mask {
        self.map(|l| l > 0)
    }

    /// True when the labels present are exactly 1..=n.
    pub fn is_contiguous(&self) -> bool {
        let areas = self.areas();
        areas[1..].iter().all(|&a| a > 0)
    }

    /// Renumbers labels to 1..=n preserving their relative order.
    pub fn relabeled(&self) -> LabelMap {
        let areas = self.areas();
        let mut remap = vec![0u32; areas.len()];
        let mut next = 0;
        for (l, &a) in areas.iter().enumerate().skip(1) {
            if a > 0 {
                next += 1;
                remap[l] = next;
            }
        }
        self.map(|l| remap[l as usize])
    }
}

/// Chebyshev dilation: pixels within `r` steps (8-neighborhood) of the mask.
pub fn dilate(mask: &Mask, r: usize) -> Mask {
    if r == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let mut rows = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows.set(x, y, (lo..=hi).any(|xx| mask.get(xx, y)));
        }
    }
    Mask::from_fn(w, h, |x, y| {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        (lo..=hi).any(|yy| rows.get(x, yy))
    })
}

/// Chebyshev erosion. Pixels outside the raster are ignored, so the image
/// border does not act as a boundary.
pub fn erode(mask: &Mask, r: usize) -> Mask {
    if r == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let mut rows = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows.set(x, y, (lo..=hi).all(|xx| mask.get(xx, y)));
        }
    }
    Mask::from_fn(w, h, |x, y| {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        (lo..=hi).all(|yy| rows.get(x, yy))
    })
}

/// Interleaved 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dim("RgbImage::from_raw", "len", width * height * 3, data.len()));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RgbImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&v);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        RgbImage::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    pub fn flip_horizontal(&self) -> Self {
        RgbImage::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn flip_vertical(&self) -> Self {
        RgbImage::from_fn(self.width, self.height, |x, y| self.get(x, self.height - 1 - y))
    }

    /// Network input: 1×3×H×W with values mapped from [0, 255] to [−1, 1].
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut data = vec![T::zero(); 3 * plane];
        for (i, px) in self.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = T::from_f64(px[c] as f64 / 127.5 - 1.0);
            }
        }
        Tensor::from_vec(Shape::new(1, 3, self.height, self.width), data).expect("image shape")
    }
}
