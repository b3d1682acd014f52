//! The tape: forward primitives record nodes, [`Graph::backward`] replays
//! them in reverse.
//!
//! Shape rules (all tensors are row-major):
//!
//! | primitive            | operands                         | result            |
//! |----------------------|----------------------------------|-------------------|
//! | add, sub, mul        | `s`, `s`                         | `s`               |
//! | add_row, mul_row     | `[R, C]`, `[C]`                  | `[R, C]`          |
//! | matmul               | `[M, K]`, `[K, N]`               | `[M, N]`          |
//! | transpose            | `[R, C]`                         | `[C, R]`          |
//! | reshape              | `s` with equal element count     | new shape         |
//! | sum, mean            | any                              | `[]`              |
//! | norm_axis(a)         | any, `a < ndim`                  | shape without `a` |
//! | layer_norm, normalize_rows | `[R, C]`                   | `[R, C]`          |
//! | conv2d               | `[Cin, H, W]`, `[Cout, Cin, kh, kw]`, `[Cout]` | `[Cout, Ho, Wo]` |
//! | conv1d               | `[T, Cin]`, `[Cout, Cin, k]`, `[Cout]` (k odd) | `[T, Cout]` |
//! | depthwise_conv1d     | `[T, C]`, `[C, k]`, `[C]` (k odd) | `[T, C]`         |
//! | repeat_rows(f)       | `[R, C]`                         | `[R·f, C]`        |
//! | slice_cols(a, b)     | `[R, C]`, `a < b ≤ C`            | `[R, b − a]`      |
//! | slice1d, pad1d       | `[N]`                            | `[L]`             |
//! | stft_power           | `[N]`                            | `[N/hop + 1, bins]` |
//! | mel_project          | `[F, bins]`                      | `[F, mels]`       |
//! | istft                | `[F, bins]`, `[F, bins]`         | `[L]`             |
//!
//! Unary element-wise primitives preserve shape.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use rustfft::num_complex::Complex;

use super::kernels::{self, Conv2dGeom};
use super::GradError;
use crate::dsp::{MelFilterbank, StftPlan};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy)]
enum Unary<T> {
    Tanh,
    Gelu,
    LeakyRelu(T),
    Relu,
    Exp,
    Log,
    Abs,
    Sqrt,
    Sin,
    Cos,
    Square,
    Clamp(T, T),
}

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    Shift(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    NormAxis(usize, usize),
    Unary(usize, Unary<T>),
    LayerNorm { src: usize, inv_std: Vec<T> },
    NormalizeRows { src: usize, inv_norm: Vec<T> },
    StopGrad,
    Conv2d { input: usize, weight: usize, bias: Option<usize>, geom: Conv2dGeom },
    Conv1d { input: usize, weight: usize, bias: Option<usize>, k: usize },
    DepthwiseConv1d { input: usize, weight: usize, bias: Option<usize>, k: usize },
    RepeatRows(usize, usize),
    SliceCols(usize, usize),
    Slice1d(usize, usize),
    Pad1d(usize),
    StftPower { src: usize, plan: Arc<StftPlan<T>>, spec: Vec<Complex<T>> },
    MelProject { src: usize, bank: Arc<MelFilterbank> },
    Istft { re: usize, im: usize, plan: Arc<StftPlan<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use computation tape.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`, or `None` when no gradient reached it.
    pub fn get(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.get_id(var.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<Tensor<T>> {
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor::new(self.shapes[id].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<(), GradError> {
    if a.shape() != b.shape() {
        return Err(GradError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::lit(value)))
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary_node(&self, src: usize, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = self.rg(src);
        self.push(value, op, rg)
    }

    fn binary_node(&self, a: usize, b: usize, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn with2<R>(&self, a: usize, b: usize, f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value, &nodes[b].value)
    }

    fn with1<R>(&self, a: usize, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[a].value)
    }

    /// Inverse STFT of a `(real, imaginary)` spectrum pair to `out_len` samples.
    pub fn istft<'g>(
        &'g self,
        re: Var<'g, T>,
        im: Var<'g, T>,
        plan: &Arc<StftPlan<T>>,
        out_len: usize,
    ) -> Result<Var<'g, T>, GradError> {
        let value = self.with2(re.id, im.id, |r, i| {
            same_shape("istft", r, i)?;
            if r.ndim() != 2 || r.shape()[1] != plan.bins() {
                return Err(GradError::shape("istft", r.shape(), &[0, plan.bins()]));
            }
            Ok(Tensor::vector(plan.synthesize(r.data(), i.data(), out_len)))
        })?;
        Ok(self.binary_node(re.id, im.id, value, Op::Istft { re: re.id, im: im.id, plan: plan.clone() }))
    }

    /// Reverse pass from a scalar loss. The tape can be replayed only once.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, GradError> {
        if self.consumed.get() {
            return Err(GradError::TapeExhausted);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(GradError::NonScalarLoss(root.value.shape().to_vec()));
        }
        self.consumed.set(true);

        let n = nodes.len();
        let mut pending: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        pending[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, id, g, &mut pending, &mut leaves);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads: leaves, shapes })
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], pending: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut pending[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        slot => *slot = Some(g),
    }
}

fn col_sums<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks(cols) {
        out.iter_mut().zip(row).for_each(|(o, &x)| *o = *o + x);
    }
    out
}

fn backprop<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    g: Vec<T>,
    pending: &mut [Option<Vec<T>>],
    leaves: &mut [Option<Vec<T>>],
) {
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => leaves[id] = Some(g),
        Op::StopGrad => {}
        Op::Add(a, b) => {
            if rg(*b) {
                accumulate(nodes, pending, *b, g.clone());
            }
            accumulate(nodes, pending, *a, g);
        }
        Op::Sub(a, b) => {
            if rg(*b) {
                accumulate(nodes, pending, *b, g.iter().map(|&x| -x).collect());
            }
            accumulate(nodes, pending, *a, g);
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                accumulate(nodes, pending, *a, zip_map(&g, val(*b).data(), |x, y| x * y));
            }
            if rg(*b) {
                accumulate(nodes, pending, *b, zip_map(&g, val(*a).data(), |x, y| x * y));
            }
        }
        Op::AddRow(a, b) => {
            if rg(*b) {
                accumulate(nodes, pending, *b, col_sums(&g, val(*b).len()));
            }
            accumulate(nodes, pending, *a, g);
        }
        Op::MulRow(a, b) => {
            let cols = val(*b).len();
            let bv = val(*b).data();
            if rg(*b) {
                let prod = zip_map(&g, val(*a).data(), |x, y| x * y);
                accumulate(nodes, pending, *b, col_sums(&prod, cols));
            }
            if rg(*a) {
                let ga = g.iter().enumerate().map(|(i, &x)| x * bv[i % cols]).collect();
                accumulate(nodes, pending, *a, ga);
            }
        }
        Op::Scale(a, c) => accumulate(nodes, pending, *a, g.iter().map(|&x| x * *c).collect()),
        Op::Shift(a) => accumulate(nodes, pending, *a, g),
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2();
            let n = val(*b).dims2().1;
            if rg(*a) {
                accumulate(nodes, pending, *a, kernels::matmul_nt(&g, val(*b).data(), m, n, k));
            }
            if rg(*b) {
                accumulate(nodes, pending, *b, kernels::matmul_tn(val(*a).data(), &g, m, k, n));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = val(*a).dims2();
            accumulate(nodes, pending, *a, kernels::transpose(&g, c, r));
        }
        Op::Reshape(a) => accumulate(nodes, pending, *a, g),
        Op::Sum(a) => accumulate(nodes, pending, *a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            let v = g[0] / T::lit(n.max(1) as f64);
            accumulate(nodes, pending, *a, vec![v; n]);
        }
        Op::NormAxis(a, axis) => {
            let x = val(*a);
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut ga = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let norm = out.data()[o * inner + i];
                    if norm == T::zero() {
                        continue;
                    }
                    let s = g[o * inner + i] / norm;
                    for l in 0..len {
                        let idx = (o * len + l) * inner + i;
                        ga[idx] = x.data()[idx] * s;
                    }
                }
            }
            accumulate(nodes, pending, *a, ga);
        }
        Op::Unary(a, u) => {
            let x = val(*a).data();
            let y = out.data();
            let ga: Vec<T> = match *u {
                Unary::Tanh => zip_map(&g, y, |g, y| g * (T::one() - y * y)),
                Unary::Gelu => zip_map(&g, x, |g, x| g * kernels::gelu_grad(x)),
                Unary::LeakyRelu(s) => zip_map(&g, x, |g, x| if x > T::zero() { g } else { g * s }),
                Unary::Relu => zip_map(&g, x, |g, x| if x > T::zero() { g } else { T::zero() }),
                Unary::Exp => zip_map(&g, y, |g, y| g * y),
                Unary::Log => zip_map(&g, x, |g, x| g / x),
                Unary::Abs => zip_map(&g, x, |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }),
                Unary::Sqrt => zip_map(&g, y, |g, y| if y > T::zero() { g / (y + y) } else { T::zero() }),
                Unary::Sin => zip_map(&g, x, |g, x| g * x.cos()),
                Unary::Cos => zip_map(&g, x, |g, x| -g * x.sin()),
                Unary::Square => zip_map(&g, x, |g, x| g * (x + x)),
                Unary::Clamp(lo, hi) => zip_map(&g, x, |g, x| if x >= lo && x <= hi { g } else { T::zero() }),
            };
            accumulate(nodes, pending, *a, ga);
        }
        Op::LayerNorm { src, inv_std } => {
            let (rows, cols) = out.dims2();
            let y = out.data();
            let c = T::lit(cols as f64);
            let mut ga = vec![T::zero(); rows * cols];
            for r in 0..rows {
                let gr = &g[r * cols..(r + 1) * cols];
                let yr = &y[r * cols..(r + 1) * cols];
                let sum_g: T = gr.iter().copied().sum();
                let sum_gy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..cols {
                    ga[r * cols + j] = inv_std[r] / c * (c * gr[j] - sum_g - yr[j] * sum_gy);
                }
            }
            accumulate(nodes, pending, *src, ga);
        }
        Op::NormalizeRows { src, inv_norm } => {
            let (rows, cols) = out.dims2();
            let y = out.data();
            let mut ga = vec![T::zero(); rows * cols];
            for r in 0..rows {
                let gr = &g[r * cols..(r + 1) * cols];
                let yr = &y[r * cols..(r + 1) * cols];
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..cols {
                    ga[r * cols + j] = inv_norm[r] * (gr[j] - yr[j] * dot);
                }
            }
            accumulate(nodes, pending, *src, ga);
        }
        Op::Conv2d { input, weight, bias, geom } => {
            let p = geom.out_h() * geom.out_w();
            let patch = geom.cin * geom.kh * geom.kw;
            if let Some(b) = bias {
                if rg(*b) {
                    let gb = g.chunks(p).map(|c| c.iter().copied().sum()).collect();
                    accumulate(nodes, pending, *b, gb);
                }
            }
            if rg(*weight) {
                let col = kernels::im2col(val(*input).data(), geom);
                accumulate(nodes, pending, *weight, kernels::matmul_nt(&g, &col, geom.cout, p, patch));
            }
            if rg(*input) {
                let dcol = kernels::matmul_tn(val(*weight).data(), &g, geom.cout, patch, p);
                accumulate(nodes, pending, *input, kernels::col2im(&dcol, geom));
            }
        }
        Op::Conv1d { input, weight, bias, k } => {
            let (t, cin) = val(*input).dims2();
            let cout = out.dims2().1;
            let pad = k / 2;
            if let Some(b) = bias {
                if rg(*b) {
                    accumulate(nodes, pending, *b, col_sums(&g, cout));
                }
            }
            if rg(*weight) {
                let col = kernels::unfold_rows(val(*input).data(), t, cin, *k, pad);
                accumulate(nodes, pending, *weight, kernels::matmul_tn(&g, &col, t, cout, cin * k));
            }
            if rg(*input) {
                let dcol = kernels::matmul_nn(&g, val(*weight).data(), t, cout, cin * k);
                accumulate(nodes, pending, *input, kernels::fold_rows(&dcol, t, cin, *k, pad));
            }
        }
        Op::DepthwiseConv1d { input, weight, bias, k } => {
            let x = val(*input);
            let (t, c) = x.dims2();
            let w = val(*weight).data();
            let pad = (k / 2) as isize;
            if let Some(b) = bias {
                if rg(*b) {
                    accumulate(nodes, pending, *b, col_sums(&g, c));
                }
            }
            let mut gx = vec![T::zero(); t * c];
            let mut gw = vec![T::zero(); c * k];
            for ti in 0..t {
                for j in 0..*k {
                    let src = ti as isize + j as isize - pad;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let s = src as usize;
                    for ch in 0..c {
                        let go = g[ti * c + ch];
                        gw[ch * k + j] = gw[ch * k + j] + go * x.data()[s * c + ch];
                        gx[s * c + ch] = gx[s * c + ch] + go * w[ch * k + j];
                    }
                }
            }
            if rg(*weight) {
                accumulate(nodes, pending, *weight, gw);
            }
            accumulate(nodes, pending, *input, gx);
        }
        Op::RepeatRows(a, factor) => {
            let (rows, cols) = val(*a).dims2();
            let mut ga = vec![T::zero(); rows * cols];
            for r in 0..rows * factor {
                let src = r / factor;
                for j in 0..cols {
                    ga[src * cols + j] = ga[src * cols + j] + g[r * cols + j];
                }
            }
            accumulate(nodes, pending, *a, ga);
        }
        Op::SliceCols(a, start) => {
            let (rows, cols) = val(*a).dims2();
            let w = out.dims2().1;
            let mut ga = vec![T::zero(); rows * cols];
            for r in 0..rows {
                ga[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            accumulate(nodes, pending, *a, ga);
        }
        Op::Slice1d(a, start) => {
            let mut ga = vec![T::zero(); val(*a).len()];
            ga[*start..*start + g.len()].copy_from_slice(&g);
            accumulate(nodes, pending, *a, ga);
        }
        Op::Pad1d(a) => {
            let n = val(*a).len();
            accumulate(nodes, pending, *a, g[..n].to_vec());
        }
        Op::StftPower { src, plan, spec } => {
            let n = val(*src).len();
            accumulate(nodes, pending, *src, plan.power_backward(spec, &g, n));
        }
        Op::MelProject { src, bank } => {
            accumulate(nodes, pending, *src, bank.project_backward(&g));
        }
        Op::Istft { re, im, plan } => {
            let frames = val(*re).dims2().0;
            let (gr, gi) = plan.synthesize_backward(&g, frames);
            if rg(*im) {
                accumulate(nodes, pending, *im, gi);
            }
            accumulate(nodes, pending, *re, gr);
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.with1(self.id, |t| t.shape().to_vec())
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.with1(self.id, Tensor::clone)
    }

    /// Value of a one-element node.
    pub fn item(&self) -> T {
        self.graph.with1(self.id, Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    fn binary(
        self,
        other: Var<'g, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'g, T>, GradError> {
        let value = self.graph.with2(self.id, other.id, |a, b| {
            same_shape(name, a, b)?;
            Ok(Tensor::new(a.shape().to_vec(), zip_map(a.data(), b.data(), f)).expect("shape"))
        })?;
        Ok(self.graph.binary_node(self.id, other.id, value, op(self.id, other.id)))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    fn row_op(
        self,
        row: Var<'g, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'g, T>, GradError> {
        let value = self.graph.with2(self.id, row.id, |a, b| {
            if a.ndim() != 2 || b.ndim() != 1 || a.shape()[1] != b.len() {
                return Err(GradError::shape(name, a.shape(), b.shape()));
            }
            let c = b.len();
            let data = a.data().iter().enumerate().map(|(i, &x)| f(x, b.data()[i % c])).collect();
            Ok(Tensor::new(a.shape().to_vec(), data).expect("shape"))
        })?;
        Ok(self.graph.binary_node(self.id, row.id, value, op(self.id, row.id)))
    }

    /// Adds a `[C]` vector to every row of a `[R, C]` matrix.
    pub fn add_row(self, row: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
        self.row_op(row, "add_row", |a, b| a + b, Op::AddRow)
    }

    pub fn mul_row(self, row: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
        self.row_op(row, "mul_row", |a, b| a * b, Op::MulRow)
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::lit(c);
        let value = self.graph.with1(self.id, |a| a.map(|x| x * c));
        self.graph.unary_node(self.id, value, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::lit(c);
        let value = self.graph.with1(self.id, |a| a.map(|x| x + c));
        self.graph.unary_node(self.id, value, Op::Shift(self.id))
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>, GradError> {
        let value = self.graph.with2(self.id, other.id, |a, b| {
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(GradError::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k) = a.dims2();
            let n = b.dims2().1;
            Ok(Tensor::matrix(m, n, kernels::matmul_nn(a.data(), b.data(), m, k, n)).expect("shape"))
        })?;
        Ok(self.graph.binary_node(self.id, other.id, value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Var<'g, T>, GradError> {
        let value = self.graph.with1(self.id, |a| {
            if a.ndim() != 2 {
                return Err(GradError::shape("transpose", a.shape(), &[]));
            }
            Ok(a.transpose2())
        })?;
        Ok(self.graph.unary_node(self.id, value, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>, GradError> {
        let value = self.graph.with1(self.id, |a| {
            a.clone().reshape(shape.to_vec()).map_err(|_| GradError::shape("reshape", a.shape(), shape))
        })?;
        Ok(self.graph.unary_node(self.id, value, Op::Reshape(self.id)))
    }

    pub fn sum(self) -> Var<'g, T> {
        let value = self.graph.with1(self.id, |a| Tensor::scalar(a.data().iter().copied().sum()));
        self.graph.unary_node(self.id, value, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g, T> {
        let value = self.graph.with1(self.id, |a| {
            let s: T = a.data().iter().copied().sum();
            Tensor::scalar(s / T::lit(a.len().max(1) as f64))
        });
        self.graph.unary_node(self.id, value, Op::Mean(self.id))
    }

    /// Euclidean norm along `axis`.
    pub fn norm_axis(self, axis: usize) -> Result<Var<'g, T>, GradError> {
        let value = self.graph.with1(self.id, |a| {
            if axis >= a.ndim() {
                return Err(GradError::shape("norm_axis", a.shape(), &[axis]));
            }
            let (outer, len, inner) = axis_split(a.shape(), axis);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let s: T = (0..len).map(|l| a.data()[(o * len + l) * inner + i].powi(2)).sum();
                    out[o * inner + i] = s.sqrt();
                }
            }
            let mut shape = a.shape().to_vec();
            shape.remove(axis);
            Ok(Tensor::new(shape, out).expect("shape"))
        })?;
        Ok(self.graph.unary_node(self.id, value, Op::NormAxis(self.id, axis)))
    }

    /// Frobenius norm of the whole tensor.
    pub fn norm_all(self) -> Var<'g, T> {
        let n = self.graph.with1(self.id, Tensor::len);
        self.reshape(&[n]).and_then(|v| v.norm_axis(0)).expect("flattened norm")
    }

    fn unary(self, u: Unary<T>, f: impl Fn(T) -> T) -> Var<'g, T> {
        let value = self.graph.with1(self.id, |a| a.map(f));
        self.graph.unary_node(self.id, value, Op::Unary(self.id, u))
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(Unary::Tanh, T::tanh)
    }

    pub fn gelu(self) -> Var<'g, T> {
        self.unary(Unary::Gelu, kernels::gelu)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let s = T::lit(slope);
        self.unary(Unary::LeakyRelu(s), move |x| if x > T::zero() { x } else { x * s })
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(Unary::Relu, |x| x.max(T::zero()))
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(Unary::Exp, T::exp)
    }

    pub fn log(self) -> Var<'g, T> {
        self.unary(Unary::Log, T::ln)
    }

    pub fn abs(self) -> Var<'g, T> {
        self.unary(Unary::Abs, |x| x.abs())
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(Unary::Sqrt, T::sqrt)
    }

    pub fn sin(self) -> Var<'g, T> {
        self.unary(Unary::Sin, T::sin)
    }

    pub fn cos(self) -> Var<'g, T> {
        self.unary(Unary::Cos, T::cos)
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(Unary::Square, |x| x * x)
    }

    /// Element-wise clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g, T> {
        let (l, h) = (T::lit(lo), T::lit(hi));
        self.unary(Unary::Clamp(l, h), move |x| x.max(l).min(h))
    }

    /// Identity forward; blocks all gradient flow backward.
    pub fn stop_gradient(self) -> Var<'g, T> {
        let value = self.value();
        self.graph.push(value, Op::StopGrad, false)
    }

    /// Row-wise standardization (zero mean, unit variance) without affine terms.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'g, T>, GradError> {
        let (value, inv_std) = self.graph.with1(self.id, |a| {
            if a.ndim() != 2 {
                return Err(GradError::shape("layer_norm", a.shape(), &[]));
            }
            let (rows, cols) = a.dims2();
            let c = T::lit(cols as f64);
            let mut out = vec![T::zero(); rows * cols];
            let mut inv = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = a.row(r);
                let mean = row.iter().copied().sum::<T>() / c;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / c;
                let s = T::one() / (var + T::lit(eps)).sqrt();
                for j in 0..cols {
                    out[r * cols + j] = (row[j] - mean) * s;
                }
                inv.push(s);
            }
            Ok((Tensor::matrix(rows, cols, out).expect("shape"), inv))
        })?;
        Ok(self.graph.unary_node(self.id, value, Op::LayerNorm { src: self.id, inv_std }))
    }

    /// Scales each row to unit L2 norm: `x / sqrt(‖x‖² + eps²)`.
    pub fn normalize_rows(self, eps: f64) -> Result<Var<'g, T>, GradError> {
        let (value, inv_norm) = self.graph.with1(self.id, |a| {
            if a.ndim() != 2 {
                return Err(GradError::shape("normalize_rows", a.shape(), &[]));
            }
            let (rows, cols) = a.dims2();
            let e2 = T::lit(eps * eps);
            let mut out = vec![T::zero(); rows * cols];
            let mut inv = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = a.row(r);
                let s = T::one() / (row.iter().map(|&x| x * x).sum::<T>() + e2).sqrt();
                for j in 0..cols {
                    out[r * cols + j] = row[j] * s;
                }
                inv.push(s);
            }
            Ok((Tensor::matrix(rows, cols, out).expect("shape"), inv))
        })?;
        Ok(self.graph.unary_node(self.id, value, Op::NormalizeRows { src: self.id, inv_norm }))
    }

    fn conv_node(&self, ids: &[usize], value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = ids.iter().any(|&i| self.graph.rg(i));
        self.graph.push(value, op, rg)
    }

    /// 2-D convolution of a `[Cin, H, W]` input.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var<'g, T>, GradError> {
        let nodes = self.graph.nodes.borrow();
        let x = &nodes[self.id].value;
        let w = &nodes[weight.id].value;
        if x.ndim() != 3 || w.ndim() != 4 || w.shape()[1] != x.shape()[0] || stride.0 == 0 || stride.1 == 0 {
            return Err(GradError::shape("conv2d", x.shape(), w.shape()));
        }
        let geom = Conv2dGeom {
            cin: x.shape()[0],
            h: x.shape()[1],
            w: x.shape()[2],
            cout: w.shape()[0],
            kh: w.shape()[2],
            kw: w.shape()[3],
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
        };
        if geom.h + 2 * geom.ph < geom.kh || geom.w + 2 * geom.pw < geom.kw {
            return Err(GradError::shape("conv2d", x.shape(), w.shape()));
        }
        let b = match bias {
            Some(b) => {
                let bv = &nodes[b.id].value;
                if bv.shape() != [geom.cout] {
                    return Err(GradError::shape("conv2d", bv.shape(), &[geom.cout]));
                }
                Some(bv.data())
            }
            None => None,
        };
        let data = kernels::conv2d(x.data(), w.data(), b, &geom);
        drop(nodes);
        let value = Tensor::new(vec![geom.cout, geom.out_h(), geom.out_w()], data).expect("shape");
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        Ok(self.conv_node(
            &ids,
            value,
            Op::Conv2d { input: self.id, weight: weight.id, bias: bias.map(|b| b.id), geom },
        ))
    }

    /// Same-padded 1-D convolution along the rows of a `[T, Cin]` sequence.
    pub fn conv1d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>, GradError> {
        let nodes = self.graph.nodes.borrow();
        let x = &nodes[self.id].value;
        let w = &nodes[weight.id].value;
        if x.ndim() != 2 || w.ndim() != 3 || w.shape()[1] != x.shape()[1] || w.shape()[2] % 2 == 0 {
            return Err(GradError::shape("conv1d", x.shape(), w.shape()));
        }
        let (t, cin) = x.dims2();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let col = kernels::unfold_rows(x.data(), t, cin, k, k / 2);
        let mut data = kernels::matmul_nt(&col, w.data(), t, cin * k, cout);
        if let Some(b) = bias {
            let bv = &nodes[b.id].value;
            if bv.shape() != [cout] {
                return Err(GradError::shape("conv1d", bv.shape(), &[cout]));
            }
            for row in data.chunks_mut(cout) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o = *o + b);
            }
        }
        drop(nodes);
        let value = Tensor::matrix(t, cout, data).expect("shape");
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        Ok(self.conv_node(&ids, value, Op::Conv1d { input: self.id, weight: weight.id, bias: bias.map(|b| b.id), k }))
    }

    /// Per-channel same-padded 1-D convolution of a `[T, C]` sequence.
    pub fn depthwise_conv1d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>, GradError> {
        let nodes = self.graph.nodes.borrow();
        let x = &nodes[self.id].value;
        let w = &nodes[weight.id].value;
        if x.ndim() != 2 || w.ndim() != 2 || w.shape()[0] != x.shape()[1] || w.shape()[1] % 2 == 0 {
            return Err(GradError::shape("depthwise_conv1d", x.shape(), w.shape()));
        }
        let (t, c) = x.dims2();
        let k = w.shape()[1];
        let pad = (k / 2) as isize;
        let mut data = vec![T::zero(); t * c];
        for ti in 0..t {
            for j in 0..k {
                let src = ti as isize + j as isize - pad;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let s = src as usize;
                for ch in 0..c {
                    data[ti * c + ch] = data[ti * c + ch] + w.data()[ch * k + j] * x.data()[s * c + ch];
                }
            }
        }
        if let Some(b) = bias {
            let bv = &nodes[b.id].value;
            if bv.shape() != [c] {
                return Err(GradError::shape("depthwise_conv1d", bv.shape(), &[c]));
            }
            for row in data.chunks_mut(c) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o = *o + b);
            }
        }
        drop(nodes);
        let value = Tensor::matrix(t, c, data).expect("shape");
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        Ok(self.conv_node(
            &ids,
            value,
            Op::DepthwiseConv1d { input: self.id, weight: weight.id, bias: bias.map(|b| b.id), k },
        ))
    }

    /// Nearest-neighbour upsampling along rows.
    pub fn repeat_rows(self, factor: usize) -> Result<Var<'g, T>, GradError> {
        let value = self.graph.with1(self.id, |a| {
            if a.ndim() != 2 || factor == 0 {
                return Err(GradError::shape("repeat_rows", a.shape(), &[factor]));
            }
            let (rows, cols) = a.dims2();
            let mut out = Vec::with_capacity(rows * factor * cols);
            for r in 0..rows {
                for _ in 0..factor {
                    out.extend_from_slice(a.row(r));
                }
            }
            Ok(Tensor::matrix(rows * factor, cols, out).expect("shape"))
        })?;
        Ok(self.graph.unary_node(self.id, value, Op::RepeatRows(self.id, factor)))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'g, T>, GradError> {
        let value = self.graph.with1(self.id, |a| {
            if a.ndim() != 2 || start >= end || end > a.shape()[1] {
                return Err(GradError::shape("slice_cols", a.shape(), &[start, end]));
            }
            let rows = a.dims2().0;
            let out = (0..rows).flat_map(|r| a.row(r)[start..end].iter().copied()).collect();
            Ok(Tensor::matrix(rows, end - start, out).expect("shape"))
        })?;
        Ok(self.graph.unary_node(self.id, value, Op::SliceCols(self.id, start)))
    }

    /// Elements `[start, start + len)` of a vector.
    pub fn slice1d(self, start: usize, len: usize) -> Result<Var<'g, T>, GradError> {
        let value = self.graph.with1(self.id, |a| {
            if a.ndim() != 1 || start + len > a.len() {
                return Err(GradError::shape("slice1d", a.shape(), &[start, len]));
            }
            Ok(Tensor::vector(a.data()[start..start + len].to_vec()))
        })?;
        Ok(self.graph.unary_node(self.id, value, Op::Slice1d(self.id, start)))
    }

    /// Zero-pads a vector at the end up to `len`.
    pub fn pad1d(self, len: usize) -> Result<Var<'g, T>, GradError> {
        let value = self.graph.with1(self.id, |a| {
            if a.ndim() != 1 || len < a.len() {
                return Err(GradError::shape("pad1d", a.shape(), &[len]));
            }
            let mut d = a.data().to_vec();
            d.resize(len, T::zero());
            Ok(Tensor::vector(d))
        })?;
        Ok(self.graph.unary_node(self.id, value, Op::Pad1d(self.id)))
    }

    /// `|STFT|²` of a waveform vector.
    pub fn stft_power(self, plan: &Arc<StftPlan<T>>) -> Result<Var<'g, T>, GradError> {
        let (value, spec) = self.graph.with1(self.id, |a| {
            if a.ndim() != 1 {
                return Err(GradError::shape("stft_power", a.shape(), &[]));
            }
            let (power, spec) = plan.power(a.data());
            let frames = plan.num_frames(a.len());
            Ok((Tensor::matrix(frames, plan.bins(), power).expect("shape"), spec))
        })?;
        Ok(self.graph.unary_node(self.id, value, Op::StftPower { src: self.id, plan: plan.clone(), spec }))
    }

    /// Projects a `[F, bins]` power spectrogram onto mel filters.
    pub fn mel_project(self, bank: &Arc<MelFilterbank>) -> Result<Var<'g, T>, GradError> {
        let value = self.graph.with1(self.id, |a| {
            if a.ndim() != 2 || a.shape()[1] != bank.n_bins() {
                return Err(GradError::shape("mel_project", a.shape(), &[0, bank.n_bins()]));
            }
            let frames = a.dims2().0;
            Ok(Tensor::matrix(frames, bank.n_mels(), bank.project(a.data())).expect("shape"))
        })?;
        Ok(self.graph.unary_node(self.id, value, Op::MelProject { src: self.id, bank: bank.clone() }))
    }
}
