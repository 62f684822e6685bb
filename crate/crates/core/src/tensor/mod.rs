//! Dense N×C×H×W arrays and a recorded tape for reverse-mode differentiation.
//!
//! Training runs in `f32`; `f64` exists so gradients can be checked against
//! finite differences without drowning in rounding noise.

mod kernels;
pub mod gradcheck;
pub mod nmap;
mod tape;

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

pub use tape::{Activation, Elementwise, Gradients, Mode, RunningStats, Tape, Var};

/// Floating-point element type usable by the tape.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + std::ops::SubAssign + 'static
{
    /// `c = alpha * a·b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(span(m, k, rsa, csa) as usize <= a.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, rsb, csb) as usize <= b.len(), "gemm: rhs out of bounds");
                assert!(span(m, n, rsc, csc) as usize <= c.len(), "gemm: output out of bounds");
                // SAFETY: all strides are non-negative and the extents were bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            fn from_f64(x: f64) -> Self {
                x as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Shape of a 4-D tensor: batch, channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Row-major (W fastest) dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::Contract(format!("tensor shape {shape} has an empty axis")));
        }
        if data.len() != shape.numel() {
            return Err(Error::dim("tensor", "data", shape.numel(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    /// Contiguous H×W plane for one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Sequential row-major sum (fixed order, replayable).
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Channel range `[start, end)` as a new tensor.
    pub fn channels(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape.c {
            return Err(Error::dim("channels", "C", self.shape.c, end));
        }
        let s = self.shape;
        let out_shape = Shape::new(s.n, end - start, s.h, s.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n {
            for c in start..end {
                data.extend_from_slice(self.plane(n, c));
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Single batch item as an N=1 tensor.
    pub fn item(&self, n: usize) -> Self {
        let s = self.shape;
        let per = s.c * s.plane();
        Tensor {
            shape: Shape::new(1, s.c, s.h, s.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks N=1 tensors (or any N) along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let s0 = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if s.c != s0.c {
                return Err(Error::dim("stack", "C", s0.c, s.c));
            }
            if s.h != s0.h {
                return Err(Error::dim("stack", "H", s0.h, s.h));
            }
            if s.w != s0.w {
                return Err(Error::dim("stack", "W", s0.w, s.w));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, s0.c, s0.h, s0.w),
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}
