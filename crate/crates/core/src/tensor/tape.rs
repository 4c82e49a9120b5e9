//! Reverse-mode differentiation over a linear record of kernel calls.
//!
//! Values are appended in execution order, so the record is topologically
//! sorted by construction and the backward sweep is a single reverse pass.

use super::kernels::{self, ConvGrads};
use super::{Scalar, Tensor};
use crate::error::{dim_err, shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Clamp(Var, T, T),
    Square(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Softmax { x: Var, temperature: T },
    RowNormalize { x: Var, eps: T },
    RowStandardize { x: Var, eps: T },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Concat0(Vec<Var>),
    ChannelBias { x: Var, bias: Var },
    Conv2d { x: Var, kernel: Var, bias: Var, cols: Vec<T> },
    AvgPool2(Var),
    Resize(Var),
    GridSample { image: Var, flow: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed primitives. Build values with the methods below, then
/// call [`Tape::backward`] on a scalar.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.derived(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.derived(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.derived(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.derived(v, Op::Scale(a, s), &[a])
    }

    /// Elementwise clamp to `[lo, hi]`; gradients pass where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| if x < lo { lo } else if x > hi { hi } else { x });
        self.derived(v, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.derived(v, Op::Square(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = kernels::silu(self.value(a));
        self.derived(v, Op::Silu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.derived(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / T::lit(x.len().max(1) as f64));
        self.derived(v, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.derived(v, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = kernels::transpose2d(self.value(a))?;
        Ok(self.derived(v, Op::Transpose(a), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.derived(v, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn softmax(&mut self, x: Var, temperature: T) -> Result<Var> {
        let v = kernels::softmax_lastdim(self.value(x), temperature)?;
        Ok(self.derived(v, Op::Softmax { x, temperature }, &[x]))
    }

    pub fn row_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let v = kernels::row_normalize(self.value(x), eps)?;
        Ok(self.derived(v, Op::RowNormalize { x, eps }, &[x]))
    }

    /// Per-row zero mean, unit variance.
    pub fn row_standardize(&mut self, x: Var, eps: T) -> Result<Var> {
        let v = kernels::row_standardize(self.value(x), eps)?;
        Ok(self.derived(v, Op::RowStandardize { x, eps }, &[x]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || start > end || end > xv.dim(1) {
            return shape_err("slice_cols", xv.shape(), format!("a matrix with at least {end} columns"));
        }
        let (m, n) = (xv.dim(0), xv.dim(1));
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&xv.data()[r * n + start..r * n + end]);
        }
        let v = Tensor::new(vec![m, w], out)?;
        Ok(self.derived(v, Op::SliceCols { x, start }, &[x]))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dim(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return dim_err("concat_cols", self.shape(parts[0]), s);
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let v = Tensor::new(vec![m, total], out)?;
        Ok(self.derived(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Concatenation along the leading axis; trailing shapes must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return dim_err("concat0", self.shape(parts[0]), s);
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let v = Tensor::new(shape, out)?;
        Ok(self.derived(v, Op::Concat0(parts.to_vec()), parts))
    }

    /// Adds `bias[c]` to every element of channel `c` of `x[c×...]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.dim(0);
        if bv.len() != c {
            return dim_err("channel_bias", xv.shape(), bv.shape());
        }
        let per = xv.len() / c.max(1);
        let mut out = xv.data().to_vec();
        for (chunk, &b) in out.chunks_mut(per.max(1)).zip(bv.data()) {
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.derived(v, Op::ChannelBias { x, bias }, &[x, bias]))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (v, cols) = kernels::conv2d_with_cols(self.value(x), self.value(kernel), Some(self.value(bias)))?;
        Ok(self.derived(v, Op::Conv2d { x, kernel, bias, cols }, &[x, kernel, bias]))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let v = kernels::avg_pool2(self.value(x))?;
        Ok(self.derived(v, Op::AvgPool2(x), &[x]))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = kernels::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.derived(v, Op::Resize(x), &[x]))
    }

    pub fn grid_sample(&mut self, image: Var, flow: Var) -> Result<Var> {
        let v = kernels::grid_sample(self.value(image), self.value(flow))?;
        Ok(self.derived(v, Op::GridSample { image, flow }, &[image, flow]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![T::one()])?);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Tensor<T>| accumulate(grads, v, d);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    acc(*a, g.clone());
                }
                if rg(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    acc(*a, g.clone());
                }
                if rg(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, g.zip_map(val(*b), "mul", |x, y| x * y).unwrap());
                }
                if rg(*b) {
                    acc(*b, g.zip_map(val(*a), "mul", |x, y| x * y).unwrap());
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * *s)),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.zip_map(val(*a), "clamp", |d, x| if x < *lo || x > *hi { T::zero() } else { d }).unwrap(),
            ),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), "square", |x, y| T::lit(2.0) * x * y).unwrap()),
            Op::Silu(a) => acc(*a, kernels::silu_backward(val(*a), g)),
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0])),
            Op::Mean(a) => {
                let n = T::lit(val(*a).len().max(1) as f64);
                acc(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0] / n))
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(val(*a).shape().to_vec()).unwrap()),
            Op::Transpose(a) => acc(*a, kernels::transpose2d(g).unwrap()),
            Op::MatMul(a, b) => {
                if rg(*a) {
                    acc(*a, kernels::matmul_bt(g, val(*b)).unwrap());
                }
                if rg(*b) {
                    acc(*b, kernels::matmul_at(val(*a), g).unwrap());
                }
            }
            Op::MatMulBt(a, b) => {
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                if rg(*a) {
                    acc(*a, kernels::matmul(g, val(*b)).unwrap());
                }
                if rg(*b) {
                    acc(*b, kernels::matmul_at(g, val(*a)).unwrap());
                }
            }
            Op::Softmax { x, temperature } => acc(*x, kernels::softmax_backward(out, g, *temperature)),
            Op::RowNormalize { x, eps } => acc(*x, kernels::row_normalize_backward(val(*x), g, *eps)),
            Op::RowStandardize { x, eps } => acc(*x, kernels::row_standardize_backward(val(*x), g, *eps)),
            Op::SliceCols { x, start } => {
                let xs = val(*x).shape();
                let (m, n) = (xs[0], xs[1]);
                let w = g.dim(1);
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                acc(*x, Tensor::new(vec![m, n], d).unwrap());
            }
            Op::ConcatCols(parts) => {
                let m = g.dim(0);
                let total = g.dim(1);
                let mut off = 0;
                for &p in parts {
                    let w = val(p).dim(1);
                    if rg(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        acc(p, Tensor::new(vec![m, w], d).unwrap());
                    }
                    off += w;
                }
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if rg(p) {
                        let d = g.data()[off..off + n].to_vec();
                        acc(p, Tensor::new(val(p).shape().to_vec(), d).unwrap());
                    }
                    off += n;
                }
            }
            Op::ChannelBias { x, bias } => {
                if rg(*x) {
                    acc(*x, g.clone());
                }
                if rg(*bias) {
                    let c = g.dim(0);
                    let per = g.len() / c.max(1);
                    let d: Vec<T> = g.data().chunks(per.max(1)).map(|ch| ch.iter().copied().sum()).collect();
                    acc(*bias, Tensor::new(val(*bias).shape().to_vec(), d).unwrap());
                }
            }
            Op::Conv2d { x, kernel, bias, cols } => {
                let ConvGrads { dx, dkernel, dbias } =
                    kernels::conv2d_backward(cols, val(*x).shape(), val(*kernel), g, rg(*x));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if rg(*kernel) {
                    acc(*kernel, dkernel);
                }
                if rg(*bias) {
                    acc(*bias, dbias);
                }
            }
            Op::AvgPool2(x) => acc(*x, kernels::avg_pool2_backward(g)),
            Op::Resize(x) => {
                let s = val(*x).shape();
                acc(*x, kernels::bilinear_resize_backward(g, s[1], s[2]));
            }
            Op::GridSample { image, flow } => {
                let (di, df) = kernels::grid_sample_backward(val(*image), val(*flow), g, rg(*image), rg(*flow));
                if let Some(di) = di {
                    acc(*image, di);
                }
                if let Some(df) = df {
                    acc(*flow, df);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.data_mut().iter_mut().zip(d.data()).for_each(|(e, &x)| *e += x),
        slot @ None => *slot = Some(d),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Moves the gradient out, avoiding a copy.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 7., 1.]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x), Tensor::ones(vec![2, 3]));
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1., 2.]).unwrap());
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx);
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = sum(3x) + sum(x²): df/dx = 3 + 2x
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1., -1., 0.5]).unwrap());
        let a = tape.scale(x, 3.0);
        let b = tape.square(x);
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c);
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[5.0, 1.0, 4.0]);
    }

    #[test]
    fn untouched_leaf_gets_zeros() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(vec![2]));
        let unused = tape.leaf(Tensor::ones(vec![4, 2]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(vec![4, 2]));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(vec![2]));
        let c = tape.constant(Tensor::full(vec![2], 2.0));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 2.0]);
        assert_eq!(g.wrt(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(vec![2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }
}
