//! Reverse-mode automatic differentiation over 2-D `f64` tensors.
//!
//! Every tensor is a `[rows, cols]` matrix. Spatial feature maps use the
//! channels-last token layout: row `y * w + x` of an `h × w` grid holds the
//! channel vector at `(y, x)`. A 1×1 convolution is therefore a plain
//! matrix product, and the k×k convolutions go through [`Graph::im2col`] or
//! [`Graph::depthwise_conv`].
//!
//! A [`Graph`] is built fresh for each forward pass. Leaves created with
//! [`Graph::param`] accumulate gradients; leaves created with
//! [`Graph::constant`] never do, and nothing upstream of them is visited.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Dense row-major matrix used for every activation and parameter.
pub type Tensor = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial extent of a token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Abs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanCols(Var),
    Sum(Var),
    Im2Col { x: Var, grid: Grid, kernel: usize, dilation: usize },
    Depthwise { x: Var, weight: Var, grid: Grid, kernel: usize, dilation: usize },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` is a
    /// constant or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but materializes zeros of the given shape.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn shape(t: &Tensor) -> (usize, usize) {
    t.dim()
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{op}: operand shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Offset from an output position to the input position of tap `t` along
/// one axis, for a same-padded kernel.
fn tap_offset(t: usize, kernel: usize, dilation: usize) -> isize {
    (t as isize - (kernel / 2) as isize) * dilation as isize
}

/// Visits every in-bounds `(output_row, tap_index, input_row)` triple of a
/// same-padded k×k convolution over `grid`.
fn for_each_tap(grid: Grid, kernel: usize, dilation: usize, mut f: impl FnMut(usize, usize, usize)) {
    for y in 0..grid.rows {
        for x in 0..grid.cols {
            let out = y * grid.cols + x;
            for ky in 0..kernel {
                let iy = y as isize + tap_offset(ky, kernel, dilation);
                if iy < 0 || iy >= grid.rows as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = x as isize + tap_offset(kx, kernel, dilation);
                    if ix < 0 || ix >= grid.cols as isize {
                        continue;
                    }
                    f(out, ky * kernel + kx, iy as usize * grid.cols + ix as usize);
                }
            }
        }
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf sharing storage with `value`.
    pub fn param(&mut self, value: &Arc<Tensor>) -> Var {
        self.push_arc(Arc::clone(value), Op::Leaf, true)
    }

    /// Frozen leaf sharing storage with `value`.
    pub fn constant_shared(&mut self, value: &Arc<Tensor>) -> Var {
        self.push_arc(Arc::clone(value), Op::Leaf, false)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_arc(Arc::new(value), Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros((rows, cols)))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape(format!("matmul: {:?} x {:?} inner dimensions differ", va.dim(), vb.dim())));
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("div", self.value(a), self.value(b))?;
        let out = self.value(a) / self.value(b);
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("minimum", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        Zip::from(&mut out).and(self.value(b)).for_each(|o, &b| *o = o.min(b));
        Ok(self.push(out, Op::Minimum(a, b), &[a, b]))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("maximum", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        Zip::from(&mut out).and(self.value(b)).for_each(|o, &b| *o = o.max(b));
        Ok(self.push(out, Op::Maximum(a, b), &[a, b]))
    }

    /// `a[N, C] + row[1, C]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::Shape(format!("add_row: cannot broadcast {:?} over {:?}", vr.dim(), va.dim())));
        }
        let out = va + vr;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// `a[N, C] * col[N, 1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.ncols() != 1 || vc.nrows() != va.nrows() {
            return Err(Error::Shape(format!("mul_col: cannot broadcast {:?} over {:?}", vc.dim(), va.dim())));
        }
        let out = va * vc;
        Ok(self.push(out, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `a + c` for a scalar constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::Offset(a), &[a])
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => gelu,
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Abs => f64::abs,
        };
        let out = self.value(a).mapv(f);
        self.push(out, Op::Unary(a, kind), &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Softmax along each column (over the rows of a column).
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let out = softmax_rows(&self.value(a).t().to_owned()).t().to_owned();
        self.push(out, Op::SoftmaxCols(a), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1, C]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.ncols();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).dim() != (1, c) {
                return Err(Error::Shape(format!(
                    "layer_norm: {name} has shape {:?}, expected (1, {c})",
                    self.value(p).dim()
                )));
            }
        }
        let (xhat, _) = normalize_rows(vx, eps);
        let out = &xhat * self.value(gamma) + self.value(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, &[x, gamma, beta]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.nrows() {
            return Err(Error::Shape(format!("slice_rows: {start}..{} out of {} rows", start + len, va.nrows())));
        }
        let out = va.slice(s![start..start + len, ..]).to_owned();
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.ncols() {
            return Err(Error::Shape(format!("slice_cols: {start}..{} out of {} columns", start + len, va.ncols())));
        }
        let out = va.slice(s![.., start..start + len]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(format!("concat_rows: {e}")))?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(format!("concat_cols: {e}")))?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean over channels: `[N, C] -> [N, 1]`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.ncols().max(1) as f64;
        let out = va.sum_axis(Axis(1)).insert_axis(Axis(1)) / c;
        self.push(out, Op::MeanCols(a), &[a])
    }

    /// Sum of all elements as a `[1, 1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let total = self.sum(a);
        self.scale(total, 1.0 / n)
    }

    /// Unfolds same-padded k×k patches: `[H·W, C] -> [H·W, k·k·C]`, column
    /// `(ky·k + kx)·C + c`. Out-of-bounds taps read zero.
    pub fn im2col(&mut self, x: Var, grid: Grid, kernel: usize, dilation: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.nrows() != grid.len() {
            return Err(Error::Shape(format!(
                "im2col: {} tokens do not form a {}x{} grid",
                vx.nrows(),
                grid.rows,
                grid.cols
            )));
        }
        let c = vx.ncols();
        let mut out = Tensor::zeros((grid.len(), kernel * kernel * c));
        for_each_tap(grid, kernel, dilation, |o, t, i| {
            out.slice_mut(s![o, t * c..(t + 1) * c]).assign(&vx.row(i));
        });
        Ok(self.push(out, Op::Im2Col { x, grid, kernel, dilation }, &[x]))
    }

    /// Same-padded depthwise k×k convolution; `weight` is `[k·k, C]`.
    pub fn depthwise_conv(&mut self, x: Var, weight: Var, grid: Grid, kernel: usize, dilation: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(weight));
        if vx.nrows() != grid.len() {
            return Err(Error::Shape(format!(
                "depthwise_conv: {} tokens do not form a {}x{} grid",
                vx.nrows(),
                grid.rows,
                grid.cols
            )));
        }
        if vw.dim() != (kernel * kernel, vx.ncols()) {
            return Err(Error::Shape(format!(
                "depthwise_conv: weight {:?}, expected ({}, {})",
                vw.dim(),
                kernel * kernel,
                vx.ncols()
            )));
        }
        let mut out = Tensor::zeros(vx.dim());
        for_each_tap(grid, kernel, dilation, |o, t, i| {
            let contrib = &vx.row(i) * &vw.row(t);
            let mut row = out.row_mut(o);
            row += &contrib;
        });
        Ok(self.push(out, Op::Depthwise { x, weight, grid, kernel, dilation }, &[x, weight]))
    }

    /// Reverse sweep from a `[1, 1]` loss. Only nodes that transitively
    /// depend on a [`Graph::param`] leaf receive gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!("backward: loss must be (1, 1), got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        // Only leaf gradients survive the sweep.
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &contrib,
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g * val(*b));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g * val(*a));
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if needs(*a) {
                    self.accumulate(grads, *a, g / vb);
                }
                if needs(*b) {
                    let mut gb = g * &**out;
                    gb /= vb;
                    self.accumulate(grads, *b, -gb);
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let take_a = matches!(self.nodes[i].op, Op::Minimum(..));
                let (va, vb) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(g.dim());
                let mut gb = Tensor::zeros(g.dim());
                Zip::from(&mut ga).and(&mut gb).and(g).and(va).and(vb).for_each(|ga, gb, &g, &x, &y| {
                    let choose_a = if take_a { x <= y } else { x >= y };
                    if choose_a {
                        *ga = g;
                    } else {
                        *gb = g;
                    }
                });
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if needs(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g * val(*col));
                }
                if needs(*col) {
                    let gc = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g * *s),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Unary(a, kind) => {
                let x = val(*a);
                let mut ga = g.clone();
                match kind {
                    Unary::Gelu => Zip::from(&mut ga).and(x).for_each(|d, &x| *d *= gelu_grad(x)),
                    Unary::Sigmoid => Zip::from(&mut ga).and(&**out).for_each(|d, &y| *d *= y * (1.0 - y)),
                    Unary::Tanh => Zip::from(&mut ga).and(&**out).for_each(|d, &y| *d *= 1.0 - y * y),
                    Unary::Exp => Zip::from(&mut ga).and(&**out).for_each(|d, &y| *d *= y),
                    Unary::Log => Zip::from(&mut ga).and(x).for_each(|d, &x| *d /= x),
                    Unary::Abs => Zip::from(&mut ga).and(x).for_each(|d, &x| {
                        *d *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }),
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(val(*a)).for_each(|d, &x| {
                    if x < *lo || x > *hi {
                        *d = 0.0;
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g * &**out;
                let dots = ga.sum_axis(Axis(1));
                Zip::from(ga.rows_mut()).and(out.rows()).and(&dots).for_each(|mut r, y, &d| r.scaled_add(-d, &y));
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxCols(a) => {
                let mut ga = g * &**out;
                let dots = ga.sum_axis(Axis(0));
                Zip::from(ga.columns_mut()).and(out.columns()).and(&dots).for_each(|mut c, y, &d| c.scaled_add(-d, &y));
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (xhat, rstd) = normalize_rows(val(*x), *eps);
                if needs(*gamma) {
                    let gg = (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gamma, gg);
                }
                if needs(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(*x) {
                    let dxhat = g * val(*gamma);
                    let c = xhat.ncols() as f64;
                    let mut gx = Tensor::zeros(xhat.dim());
                    Zip::from(gx.rows_mut()).and(dxhat.rows()).and(xhat.rows()).and(&rstd).for_each(
                        |mut row, dh, xh, &rs| {
                            let mean_dh = dh.sum() / c;
                            let mean_dh_xh = (&dh * &xh).sum() / c;
                            Zip::from(&mut row).and(&dh).and(&xh).for_each(|o, &d, &h| {
                                *o = rs * (d - mean_dh - h * mean_dh_xh);
                            });
                        },
                    );
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::SliceRows(a, start) => {
                let mut ga = Tensor::zeros(val(*a).dim());
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let mut ga = Tensor::zeros(val(*a).dim());
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).nrows();
                    if needs(p) {
                        self.accumulate(grads, p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).ncols();
                    if needs(p) {
                        self.accumulate(grads, p, g.slice(s![.., start..start + n]).to_owned());
                    }
                    start += n;
                }
            }
            Op::MeanCols(a) => {
                let va = val(*a);
                let c = va.ncols().max(1) as f64;
                let ga = Tensor::from_shape_fn(va.dim(), |(r, _)| g[[r, 0]] / c);
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let ga = Tensor::from_elem(shape(val(*a)), g[[0, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::Im2Col { x, grid, kernel, dilation } => {
                let c = val(*x).ncols();
                let mut gx = Tensor::zeros(val(*x).dim());
                for_each_tap(*grid, *kernel, *dilation, |o, t, i| {
                    let mut row = gx.row_mut(i);
                    row += &g.slice(s![o, t * c..(t + 1) * c]);
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Depthwise { x, weight, grid, kernel, dilation } => {
                let (vx, vw) = (val(*x), val(*weight));
                let mut gx = Tensor::zeros(vx.dim());
                let mut gw = Tensor::zeros(vw.dim());
                for_each_tap(*grid, *kernel, *dilation, |o, t, i| {
                    let go = g.row(o);
                    let mut rx = gx.row_mut(i);
                    rx += &(&go * &vw.row(t));
                    let mut rw = gw.row_mut(t);
                    rw += &(&go * &vx.row(i));
                });
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *weight, gw);
            }
        }
    }
}

/// Returns the row-normalized input and the per-row reciprocal std.
fn normalize_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let c = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / c;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / c;
        let r = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| v * r);
        rstd.push(r);
    }
    (xhat, rstd)
}
