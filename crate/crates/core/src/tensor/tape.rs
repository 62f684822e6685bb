use super::kernels::{self, ConvGeom};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode normalizes with batch statistics; eval mode with running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean/variance for batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub const MOMENTUM: f64 = 0.9;

    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool2(Var),
    Upsample2x(Var),
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Activation(Var, Activation),
    Concat(Vec<Var>),
    Elementwise(Var, Var, Elementwise),
    Sum(Var),
    WeightedSum(Vec<Var>, Vec<T>),
    ScalarWithGrad {
        input: Var,
        grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of a computation, in topological order by construction.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

/// Gradients of a scalar with respect to every grad-requiring leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    for (axis, x, y) in [("N", a.n, b.n), ("C", a.c, b.c), ("H", a.h, b.h), ("W", a.w, b.w)] {
        if x != y {
            return Err(Error::dim(op, axis, x, y));
        }
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *v;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Records an input; `requires_grad` leaves receive gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Cross-correlation with zero padding; weight is O×I×kH×kW, bias O entries.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            let bl = self.value(b).len();
            if bl != geom.c_out {
                return Err(Error::dim("conv2d", "bias", geom.c_out, bl));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2d(&mut self, input: Var) -> Result<Var> {
        let out = kernels::avg_pool2_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::AvgPool2(input), rg))
    }

    /// Bilinear 2× upsampling with half-pixel centers and border clamping.
    pub fn upsample2x(&mut self, input: Var) -> Var {
        let out = kernels::upsample2x_forward(self.value(input));
        let rg = self.rg(input);
        self.push(out, Op::Upsample2x(input), rg)
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(input);
        for (v, axis) in [(scale, "scale"), (shift, "shift")] {
            let len = self.value(v).len();
            if len != s.c {
                return Err(Error::dim("batch_norm", axis, s.c, len));
            }
        }
        if stats.mean.len() != s.c || stats.var.len() != s.c {
            return Err(Error::dim("batch_norm", "running_stats", s.c, stats.mean.len()));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("batch_norm: epsilon must be positive".into()));
        }
        let x = self.value(input);
        let plane = s.plane();
        let count = s.n * plane;
        let mut mean = vec![T::zero(); s.c];
        let mut var = vec![T::zero(); s.c];
        let batch_stats = mode == Mode::Train;
        if batch_stats {
            let inv_count = T::from_f64(1.0 / count as f64);
            for c in 0..s.c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    for &v in x.plane(n, c) {
                        acc += v;
                    }
                }
                let m = acc * inv_count;
                let mut sq = T::zero();
                for n in 0..s.n {
                    for &v in x.plane(n, c) {
                        sq += (v - m) * (v - m);
                    }
                }
                mean[c] = m;
                var[c] = sq * inv_count;
            }
            let mom = T::from_f64(RunningStats::<T>::MOMENTUM);
            let unbias = if count > 1 {
                T::from_f64(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            for c in 0..s.c {
                stats.mean[c] = mom * stats.mean[c] + (T::one() - mom) * mean[c];
                stats.var[c] = mom * stats.var[c] + (T::one() - mom) * var[c] * unbias;
            }
        } else {
            mean.copy_from_slice(&stats.mean);
            var.copy_from_slice(&stats.var);
        }
        let eps_t = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut xhat = vec![T::zero(); s.numel()];
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * plane;
                let src = x.plane(n, c);
                let xh = &mut xhat[off..off + plane];
                let dst = &mut out.data_mut()[off..off + plane];
                for i in 0..plane {
                    xh[i] = (src[i] - mean[c]) * inv_std[c];
                    dst[i] = gamma[c] * xh[i] + beta[c];
                }
            }
        }
        let rg = self.rg(input) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out = match kind {
            Activation::Relu => self.value(input).map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::Sigmoid => self.value(input).map(|v| T::one() / (T::one() + (-v).exp())),
        };
        let rg = self.rg(input);
        self.push(out, Op::Activation(input, kind), rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    /// Channel concatenation in argument order.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let s0 = self.shape(first);
        let mut c_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            for (axis, a, b) in [("N", s0.n, s.n), ("H", s0.h, s.h), ("W", s0.w, s.w)] {
                if a != b {
                    return Err(Error::dim("concat_channels", axis, a, b));
                }
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(s0.n, c_total, s0.h, s0.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s0.n {
            for &v in inputs {
                let t = self.value(v);
                let per = t.shape().c * t.shape().plane();
                data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat(inputs.to_vec()), rg))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        same_shape("elementwise", self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| match kind {
                Elementwise::Add => p + q,
                Elementwise::Sub => p - q,
                Elementwise::Mul => p * q,
            })
            .collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Elementwise(a, b, kind), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul)
    }

    /// Sum of all elements as a 1×1×1×1 scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    /// Σ wᵢ·xᵢ over scalar inputs.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: &[T]) -> Result<Var> {
        if inputs.len() != weights.len() || inputs.is_empty() {
            return Err(Error::dim("weighted_sum", "inputs", weights.len(), inputs.len()));
        }
        let mut acc = T::zero();
        for (&v, &w) in inputs.iter().zip(weights) {
            if self.shape(v) != Shape::scalar() {
                return Err(Error::Contract("weighted_sum expects scalar inputs".into()));
            }
            acc += w * self.value(v).data()[0];
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum(inputs.to_vec(), weights.to_vec()), rg))
    }

    /// Records an externally evaluated scalar `f(input)` together with `df/dinput`.
    pub fn scalar_with_grad(&mut self, input: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        same_shape("scalar_with_grad", self.shape(input), grad.shape())?;
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::ScalarWithGrad { input, grad }, rg))
    }

    /// Reverse sweep from a 1×1×1×1 loss; fan-out contributions are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::Contract(format!(
                "backward requires a 1x1x1x1 loss, got {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[idx] = None;
            } else if grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let g = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    bias.is_some(),
                    self.rg(*input),
                    geom,
                    dy,
                );
                if let Some(dx) = g.input {
                    accumulate(&mut grads[input.0], dx);
                }
                if self.rg(*weight) {
                    accumulate(&mut grads[weight.0], g.weight);
                }
                if let (Some(b), Some(db)) = (bias, g.bias) {
                    if self.rg(*b) {
                        let shape = self.shape(*b);
                        let db = Tensor::from_vec(shape, db.into_data()).expect("bias shape");
                        accumulate(&mut grads[b.0], db);
                    }
                }
            }
            Op::AvgPool2(input) => {
                if self.rg(*input) {
                    let dx = kernels::avg_pool2_backward(self.shape(*input), dy);
                    accumulate(&mut grads[input.0], dx);
                }
            }
            Op::Upsample2x(input) => {
                if self.rg(*input) {
                    let dx = kernels::upsample2x_backward(self.shape(*input), dy);
                    accumulate(&mut grads[input.0], dx);
                }
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*input);
                let plane = s.plane();
                let count = T::from_f64((s.n * plane) as f64);
                let gamma = self.value(*scale).data();
                let mut dgamma = vec![T::zero(); s.c];
                let mut dbeta = vec![T::zero(); s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let off = (n * s.c + c) * plane;
                        for i in off..off + plane {
                            dgamma[c] += dy.data()[i] * xhat[i];
                            dbeta[c] += dy.data()[i];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = Tensor::zeros(s);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let off = (n * s.c + c) * plane;
                            let k = gamma[c] * inv_std[c];
                            for i in off..off + plane {
                                dx.data_mut()[i] = if *batch_stats {
                                    k * (dy.data()[i] - dbeta[c] / count - xhat[i] * dgamma[c] / count)
                                } else {
                                    k * dy.data()[i]
                                };
                            }
                        }
                    }
                    accumulate(&mut grads[input.0], dx);
                }
                if self.rg(*scale) {
                    let t = Tensor::from_vec(self.shape(*scale), dgamma).expect("scale shape");
                    accumulate(&mut grads[scale.0], t);
                }
                if self.rg(*shift) {
                    let t = Tensor::from_vec(self.shape(*shift), dbeta).expect("shift shape");
                    accumulate(&mut grads[shift.0], t);
                }
            }
            Op::Activation(input, kind) => {
                if !self.rg(*input) {
                    return;
                }
                let dx = match kind {
                    Activation::Relu => {
                        let x = self.value(*input).data();
                        let data = x
                            .iter()
                            .zip(dy.data())
                            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                            .collect();
                        Tensor::from_vec(dy.shape(), data)
                    }
                    Activation::Sigmoid => {
                        let y = node.value.data();
                        let data = y
                            .iter()
                            .zip(dy.data())
                            .map(|(&s, &g)| g * s * (T::one() - s))
                            .collect();
                        Tensor::from_vec(dy.shape(), data)
                    }
                };
                accumulate(&mut grads[input.0], dx.expect("activation shape"));
            }
            Op::Concat(inputs) => {
                let s = dy.shape();
                let mut c_off = 0;
                for &v in inputs {
                    let vs = self.shape(v);
                    if self.rg(v) {
                        let mut data = Vec::with_capacity(vs.numel());
                        for n in 0..s.n {
                            let start = (n * s.c + c_off) * s.plane();
                            data.extend_from_slice(&dy.data()[start..start + vs.c * s.plane()]);
                        }
                        accumulate(&mut grads[v.0], Tensor::from_vec(vs, data).expect("concat shape"));
                    }
                    c_off += vs.c;
                }
            }
            Op::Elementwise(a, b, kind) => {
                let (a, b) = (*a, *b);
                let (ga, gb) = match kind {
                    Elementwise::Add => (dy.clone(), dy.clone()),
                    Elementwise::Sub => (dy.clone(), dy.map(|g| -g)),
                    Elementwise::Mul => {
                        let (x, y) = (self.value(a), self.value(b));
                        let ga = dy.data().iter().zip(y.data()).map(|(&g, &v)| g * v).collect();
                        let gb = dy.data().iter().zip(x.data()).map(|(&g, &v)| g * v).collect();
                        (
                            Tensor::from_vec(dy.shape(), ga).expect("mul shape"),
                            Tensor::from_vec(dy.shape(), gb).expect("mul shape"),
                        )
                    }
                };
                if self.rg(a) {
                    accumulate(&mut grads[a.0], ga);
                }
                if self.rg(b) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Sum(input) => {
                if self.rg(*input) {
                    let g = dy.data()[0];
                    accumulate(&mut grads[input.0], Tensor::full(self.shape(*input), g));
                }
            }
            Op::WeightedSum(inputs, weights) => {
                let g = dy.data()[0];
                for (&v, &w) in inputs.iter().zip(weights) {
                    if self.rg(v) {
                        accumulate(&mut grads[v.0], Tensor::scalar(g * w));
                    }
                }
            }
            Op::ScalarWithGrad { input, grad } => {
                if self.rg(*input) {
                    let g = dy.data()[0];
                    accumulate(&mut grads[input.0], grad.map(|v| v * g));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_window_sum_and_delta_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0), false);
        let w = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0), false);
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.value(y).at(0, 0, 1, 1), 9.0);
        assert_eq!(tape.value(y).at(0, 0, 0, 0), 4.0);

        let input: Vec<f64> = (0..9).map(|v| v as f64 * 0.3 - 1.0).collect();
        let x = tape.leaf(t(Shape::new(1, 1, 3, 3), &input), false);
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let k = tape.leaf(t(Shape::new(1, 1, 3, 3), &delta), false);
        let y = tape.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &input[..]);
    }

    #[test]
    fn conv_output_shape_and_channel_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 8, 8)));
        let w = tape.constant(Tensor::zeros(Shape::new(16, 3, 3, 3)));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 16, 8, 8));
        let bad = tape.constant(Tensor::zeros(Shape::new(16, 4, 3, 3)));
        let err = tape.conv2d(x, bad, None, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "C", .. }), "{err}");
    }

    #[test]
    fn pooling_and_upsampling_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.avg_pool2d(x).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);
        let odd = tape.constant(Tensor::zeros(Shape::new(1, 1, 3, 4)));
        assert!(matches!(tape.avg_pool2d(odd), Err(Error::Dimension { axis: "H", .. })));

        let row = tape.constant(t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]));
        let u = tape.upsample2x(row);
        assert_eq!(tape.shape(u), Shape::new(1, 1, 2, 4));
        assert_eq!(&tape.value(u).data()[..4], &[1.0, 1.25, 1.75, 2.0]);

        let c = tape.constant(Tensor::full(Shape::new(1, 4, 8, 8), 0.7));
        let u = tape.upsample2x(c);
        assert_eq!(tape.shape(u), Shape::new(1, 4, 16, 16));
        assert!(tape.value(u).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn batch_norm_modes() {
        let mut tape = Tape::<f64>::new();
        let scale = tape.constant(Tensor::full(Shape::new(1, 2, 1, 1), 2.0));
        let shift = tape.constant(t(Shape::new(1, 2, 1, 1), &[0.5, -1.0]));
        let mut stats = RunningStats::new(2);
        let x = tape.constant(Tensor::full(Shape::new(2, 2, 3, 3), 4.0));
        let y = tape.batch_norm(x, scale, shift, &mut stats, Mode::Train, 1e-5).unwrap();
        let v = tape.value(y);
        assert!(v.plane(1, 0).iter().all(|&e| e == 0.5));
        assert!(v.plane(0, 1).iter().all(|&e| e == -1.0));
        assert!((stats.mean[0] - 0.4).abs() < 1e-12);

        let one = tape.constant(Tensor::full(Shape::new(1, 2, 1, 1), 1.0));
        let zero = tape.constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let mut id = RunningStats::new(2);
        let data: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        let x = tape.constant(t(Shape::new(1, 2, 2, 2), &data));
        let y = tape.batch_norm(x, one, zero, &mut id, Mode::Eval, 1e-5).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(x)) < 1e-4);

        let y = tape.batch_norm(x, one, zero, &mut id, Mode::Train, 1e-5).unwrap();
        for c in 0..2 {
            let p = tape.value(y).plane(0, c);
            let m: f64 = p.iter().sum::<f64>() / 4.0;
            let var: f64 = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn activations_and_their_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(Shape::new(1, 1, 1, 2), &[-1.0, 2.0]), true);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let loss = tape.sum(r);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);

        let z = tape.leaf(Tensor::scalar(0.0), true);
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(z).unwrap().data(), &[0.25]);
    }

    #[test]
    fn concat_and_elementwise() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(Shape::new(1, 16, 2, 2), 1.0), true);
        let b = tape.leaf(Tensor::full(Shape::new(1, 16, 2, 2), 2.0), true);
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c).c, 32);
        let single = tape.concat(&[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.get(b).unwrap().data().iter().all(|&v| v == 1.0));

        let bad = tape.constant(Tensor::zeros(Shape::new(1, 1, 3, 2)));
        assert!(matches!(tape.concat(&[a, bad]), Err(Error::Dimension { axis: "H", .. })));

        let zero = tape.constant(Tensor::zeros(Shape::new(1, 16, 2, 2)));
        let s = tape.add(a, zero).unwrap();
        assert_eq!(tape.value(s), tape.value(a));
        let d = tape.sub(b, b).unwrap();
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
        let m = tape.mul(a, b).unwrap();
        let loss = tape.sum(m);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 2.0));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn fan_out_gradients_add() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(Shape::new(1, 1, 1, 2), &[3.0, -2.0]), true);
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap();
        // d(x² + x)/dx = 2x + 1
        assert_eq!(g.get(x).unwrap().data(), &[7.0, -3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)), true);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let unused = tape.leaf(Tensor::full(Shape::new(1, 2, 1, 1), 1.0), true);
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
    }
}
