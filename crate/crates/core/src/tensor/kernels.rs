//! Raw forward/backward kernels behind the tape operations.

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Self> {
        if input.c != weight.c {
            return Err(Error::dim("conv2d", "C", weight.c, input.c));
        }
        for (axis, k) in [("kH", weight.h), ("kW", weight.w)] {
            if ![1, 3, 7].contains(&k) {
                return Err(Error::Contract(format!("conv2d: unsupported kernel size {k} on {axis}")));
            }
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d: stride must be positive".into()));
        }
        let out_dim = |axis: &'static str, n: usize, k: usize| -> Result<usize> {
            let span = n + 2 * pad;
            if span < k {
                return Err(Error::Dimension {
                    op: "conv2d",
                    axis,
                    expected: k - 2 * pad.min(k / 2),
                    actual: n,
                });
            }
            // Floor semantics: a trailing partial window is dropped.
            Ok((span - k) / stride + 1)
        };
        let ho = out_dim("H", input.h, weight.h)?;
        let wo = out_dim("W", input.w, weight.w)?;
        Ok(ConvGeom {
            c_in: input.c,
            h: input.h,
            w: input.w,
            c_out: weight.n,
            kh: weight.h,
            kw: weight.w,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image (C×H×W) into a (C·kH·kW)×(Ho·Wo) column matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let op = g.out_plane();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * op..(row + 1) * op];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let op = g.out_plane();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * op..(row + 1) * op];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let n = x.shape().n;
    let out_shape = Shape::new(n, g.c_out, g.ho, g.wo);
    let mut out = Tensor::zeros(out_shape);
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * g.out_plane();
    let (patch, op) = (g.patch(), g.out_plane());
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); patch * op] };
    for i in 0..n {
        let xi = &x.data()[i * in_per..(i + 1) * in_per];
        let yi = &mut out.data_mut()[i * out_per..(i + 1) * out_per];
        if let Some(b) = b {
            for (o, &bv) in b.data().iter().enumerate() {
                yi[o * op..(o + 1) * op].fill(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let rhs: &[T] = if g.pointwise() {
            xi
        } else {
            im2col(xi, g, &mut cols);
            &cols
        };
        T::gemm(
            g.c_out,
            patch,
            op,
            T::one(),
            w.data(),
            patch as isize,
            1,
            rhs,
            op as isize,
            1,
            beta,
            yi,
            op as isize,
            1,
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    need_input: bool,
    g: &ConvGeom,
    dy: &Tensor<T>,
) -> ConvGrads<T> {
    let n = x.shape().n;
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * g.out_plane();
    let (patch, op) = (g.patch(), g.out_plane());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = if has_bias {
        Some(Tensor::zeros(Shape::new(1, g.c_out, 1, 1)))
    } else {
        None
    };
    let mut dx = if need_input { Some(Tensor::zeros(x.shape())) } else { None };
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); patch * op] };
    let mut dcols = vec![T::zero(); if g.pointwise() { 0 } else { patch * op }];
    for i in 0..n {
        let xi = &x.data()[i * in_per..(i + 1) * in_per];
        let dyi = &dy.data()[i * out_per..(i + 1) * out_per];
        if let Some(db) = db.as_mut() {
            for (o, acc) in db.data_mut().iter_mut().enumerate() {
                for &v in &dyi[o * op..(o + 1) * op] {
                    *acc += v;
                }
            }
        }
        let rhs: &[T] = if g.pointwise() {
            xi
        } else {
            im2col(xi, g, &mut cols);
            &cols
        };
        // dW (O×P) += dY (O×S) · colsᵀ (S×P)
        T::gemm(
            g.c_out,
            op,
            patch,
            T::one(),
            dyi,
            op as isize,
            1,
            rhs,
            1,
            op as isize,
            T::one(),
            dw.data_mut(),
            patch as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[i * in_per..(i + 1) * in_per];
            // dcols (P×S) = Wᵀ (P×O) · dY (O×S)
            if g.pointwise() {
                T::gemm(
                    patch,
                    g.c_out,
                    op,
                    T::one(),
                    w.data(),
                    1,
                    patch as isize,
                    dyi,
                    op as isize,
                    1,
                    T::one(),
                    dxi,
                    op as isize,
                    1,
                );
            } else {
                T::gemm(
                    patch,
                    g.c_out,
                    op,
                    T::one(),
                    w.data(),
                    1,
                    patch as isize,
                    dyi,
                    op as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    op as isize,
                    1,
                );
                col2im(&dcols, g, dxi);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

pub(crate) fn avg_pool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h % 2 != 0 {
        return Err(Error::dim("avg_pool2d", "H", s.h + 1, s.h));
    }
    if s.w % 2 != 0 {
        return Err(Error::dim("avg_pool2d", "W", s.w + 1, s.w));
    }
    let (ho, wo) = (s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    let quarter = T::from_f64(0.25);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..ho {
                for xo in 0..wo {
                    let a = src[2 * y * s.w + 2 * xo];
                    let b = src[2 * y * s.w + 2 * xo + 1];
                    let c2 = src[(2 * y + 1) * s.w + 2 * xo];
                    let d = src[(2 * y + 1) * s.w + 2 * xo + 1];
                    dst[y * wo + xo] = (a + b + c2 + d) * quarter;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn avg_pool2_backward<T: Scalar>(in_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let (ho, wo) = (in_shape.h / 2, in_shape.w / 2);
    let quarter = T::from_f64(0.25);
    for n in 0..in_shape.n {
        for c in 0..in_shape.c {
            let src = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for y in 0..ho {
                for xo in 0..wo {
                    let g = src[y * wo + xo] * quarter;
                    for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        dst[(2 * y + dy_) * in_shape.w + 2 * xo + dx_] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Two-tap interpolation weights for a 2× half-pixel-center upsample of length `n`.
///
/// Output `i` samples source coordinate `(i + 0.5) / 2 - 0.5`, clamped to `[0, n-1]`.
pub(crate) fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub(crate) fn upsample2x_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (ho, wo) = (2 * s.h, 2 * s.w);
    let ty = upsample_taps(s.h);
    let tx = upsample_taps(s.w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    let mut rows = vec![T::zero(); wo];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::from_f64(1.0 - fy), T::from_f64(fy));
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
                    let top = src[y0 * s.w + x0] * wx0 + src[y0 * s.w + x1] * wx1;
                    let bot = src[y1 * s.w + x0] * wx0 + src[y1 * s.w + x1] * wx1;
                    rows[ox] = top * wy0 + bot * wy1;
                }
                dst[oy * wo..(oy + 1) * wo].copy_from_slice(&rows);
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Scalar>(in_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let s = in_shape;
    let wo = 2 * s.w;
    let ty = upsample_taps(s.h);
    let tx = upsample_taps(s.w);
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::from_f64(1.0 - fy), T::from_f64(fy));
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
                    let g = src[oy * wo + ox];
                    dst[y0 * s.w + x0] += g * wy0 * wx0;
                    dst[y0 * s.w + x1] += g * wy0 * wx1;
                    dst[y1 * s.w + x0] += g * wy1 * wx0;
                    dst[y1 * s.w + x1] += g * wy1 * wx1;
                }
            }
        }
    }
    dx
}
