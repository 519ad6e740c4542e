//! A small reverse-mode autodiff tape over `f64` matrices.
//!
//! Every tensor in the pipeline is a 2-D `ndarray` matrix; a [`Tape`] is
//! rebuilt for each forward pass (define-by-run) and [`Tape::backward`]
//! walks it once in reverse. Clarity and verifiability win over speed:
//! each op has a hand-written gradient, and [`grad_check`] compares any
//! composite against central finite differences.

use ndarray::{Array2, Axis};

pub type Matrix = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `A · B^T`.
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `A + r` with `r` a `1 x d` row broadcast over rows.
    AddRow(usize, usize),
    /// `A ∘ r` with `r` a `1 x d` row broadcast over rows.
    MulRow(usize, usize),
    /// `A + c` with `c` an `n x 1` column broadcast over columns.
    AddCol(usize, usize),
    /// `A / c` with `c` an `n x 1` column broadcast over columns.
    DivCol(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Abs(usize),
    Min(usize, usize),
    Max(usize, usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    MeanRows(usize),
    SqrtEps(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SelectRows(usize, Vec<usize>),
    SumAll(usize),
    MeanAll(usize),
    /// Patch extraction for a `(h*w) x c` image matrix: output row = one
    /// `k x k` patch at stride `s`, flattened as `(ky, kx, channel)`.
    Im2Col {
        x: usize,
        h: usize,
        w: usize,
        c: usize,
        k: usize,
        s: usize,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a node, or zeros of its shape when it never received one.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softmax_rows_value(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let d = self.nodes[v.0].value.dim();
        (d.0, d.1)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].requires_grad)
    }

    /// Leaf with gradient tracking (parameters, checked inputs).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient tracking (masks, targets, fixed data).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(v, Op::MatMul(a.0, b.0), rg)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(v, Op::MatMulNt(a.0, b.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(v, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(v, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(v, Op::Mul(a.0, b.0), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(v, Op::Div(a.0, b.0), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        let rg = self.any_grad(&[a.0, row.0]);
        self.push(v, Op::AddRow(a.0, row.0), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = &self.nodes[a.0].value * &self.nodes[row.0].value;
        let rg = self.any_grad(&[a.0, row.0]);
        self.push(v, Op::MulRow(a.0, row.0), rg)
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.shape(col).1, 1);
        let v = &self.nodes[a.0].value + &self.nodes[col.0].value;
        let rg = self.any_grad(&[a.0, col.0]);
        self.push(v, Op::AddCol(a.0, col.0), rg)
    }

    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.shape(col).1, 1);
        let v = &self.nodes[a.0].value / &self.nodes[col.0].value;
        let rg = self.any_grad(&[a.0, col.0]);
        self.push(v, Op::DivCol(a.0, col.0), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * k);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Scale(a.0, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Relu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Sigmoid(a.0), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Softplus(a.0), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Abs(a.0), rg)
    }

    /// Elementwise minimum; at ties the gradient flows to `a`.
    pub fn emin(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::Zip::from(&self.nodes[a.0].value)
            .and(&self.nodes[b.0].value)
            .map_collect(|&x, &y| x.min(y));
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(v, Op::Min(a.0, b.0), rg)
    }

    /// Elementwise maximum; at ties the gradient flows to `a`.
    pub fn emax(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::Zip::from(&self.nodes[a.0].value)
            .and(&self.nodes[b.0].value)
            .map_collect(|&x, &y| x.max(y));
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(v, Op::Max(a.0, b.0), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows_value(&self.nodes[a.0].value);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::SoftmaxRows(a.0), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|x| x - log_sum);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::LogSoftmaxRows(a.0), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .mean_axis(Axis(1))
            .expect("non-empty rows")
            .insert_axis(Axis(1));
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::MeanRows(a.0), rg)
    }

    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| (x + eps).sqrt());
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::SqrtEps(a.0), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shapes");
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let rg = self.any_grad(&idx);
        self.push(v, Op::ConcatCols(idx), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shapes");
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let rg = self.any_grad(&idx);
        self.push(v, Op::ConcatRows(idx), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::SliceCols(a.0, start), rg)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = &self.nodes[a.0].value;
        let mut v = Matrix::zeros((idx.len(), src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&src.row(r));
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::SelectRows(a.0, idx.to_vec()), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Matrix::from_elem((1, 1), self.nodes[a.0].value.sum());
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let v = Matrix::from_elem((1, 1), self.nodes[a.0].value.sum() / n);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::MeanAll(a.0), rg)
    }

    /// Extracts non-overlapping-or-strided `k x k` patches from an image
    /// stored as an `(h*w) x c` matrix. Output is `(oh*ow) x (k*k*c)`.
    pub fn im2col(&mut self, a: Var, h: usize, w: usize, c: usize, k: usize, s: usize) -> Var {
        let src = &self.nodes[a.0].value;
        assert_eq!(src.dim(), (h * w, c), "im2col input shape");
        assert!(h >= k && w >= k && s > 0);
        let oh = (h - k) / s + 1;
        let ow = (w - k) / s + 1;
        let mut v = Matrix::zeros((oh * ow, k * k * c));
        for py in 0..oh {
            for px in 0..ow {
                let orow = py * ow + px;
                for ky in 0..k {
                    for kx in 0..k {
                        let irow = (py * s + ky) * w + (px * s + kx);
                        for ch in 0..c {
                            v[[orow, (ky * k + kx) * c + ch]] = src[[irow, ch]];
                        }
                    }
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            v,
            Op::Im2Col {
                x: a.0,
                h,
                w,
                c,
                k,
                s,
            },
            rg,
        )
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.nodes[v.0].value;
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.nodes[root.0].value.dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], idx: usize, delta: Matrix) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.nodes[*b].value.t());
                let gb = self.nodes[*a].value.t().dot(g);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::MatMulNt(a, b) => {
                let ga = g.dot(&self.nodes[*b].value);
                let gb = g.t().dot(&self.nodes[*a].value);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g.clone());
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g * &self.nodes[*b].value);
                self.acc(grads, *b, g * &self.nodes[*a].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[*b].value;
                self.acc(grads, *a, g / bv);
                let gb = -(g * &self.nodes[i].value / bv);
                self.acc(grads, *b, gb);
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc(grads, *r, gr);
            }
            Op::MulRow(a, r) => {
                self.acc(grads, *a, g * &self.nodes[*r].value);
                let gr = (g * &self.nodes[*a].value)
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0));
                self.acc(grads, *r, gr);
            }
            Op::AddCol(a, c) => {
                self.acc(grads, *a, g.clone());
                let gc = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                self.acc(grads, *c, gc);
            }
            Op::DivCol(a, c) => {
                let cv = &self.nodes[*c].value;
                self.acc(grads, *a, g / cv);
                let gc = -((g * &self.nodes[i].value / cv)
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1)));
                self.acc(grads, *c, gc);
            }
            Op::Scale(a, k) => {
                self.acc(grads, *a, g.mapv(|x| x * k));
            }
            Op::Relu(a) => {
                let mask = self.nodes[*a].value.mapv(|x| (x > 0.0) as u8 as f64);
                self.acc(grads, *a, g * &mask);
            }
            Op::Sigmoid(a) => {
                let s = &self.nodes[i].value;
                self.acc(grads, *a, g * &(s * &s.mapv(|v| 1.0 - v)));
            }
            Op::Softplus(a) => {
                let d = self.nodes[*a].value.mapv(sigmoid);
                self.acc(grads, *a, g * &d);
            }
            Op::Abs(a) => {
                let sign = self.nodes[*a].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *a, g * &sign);
            }
            Op::Min(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let pick_a = ndarray::Zip::from(av)
                    .and(bv)
                    .map_collect(|&x, &y| (x <= y) as u8 as f64);
                self.acc(grads, *a, g * &pick_a);
                self.acc(grads, *b, g * &pick_a.mapv(|v| 1.0 - v));
            }
            Op::Max(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let pick_a = ndarray::Zip::from(av)
                    .and(bv)
                    .map_collect(|&x, &y| (x >= y) as u8 as f64);
                self.acc(grads, *a, g * &pick_a);
                self.acc(grads, *b, g * &pick_a.mapv(|v| 1.0 - v));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let gy = g * y;
                let row_sums = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                let gx = &gy - &(y * &row_sums);
                self.acc(grads, *a, gx);
            }
            Op::LogSoftmaxRows(a) => {
                let soft = self.nodes[i].value.mapv(f64::exp);
                let row_sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let gx = g - &(&soft * &row_sums);
                self.acc(grads, *a, gx);
            }
            Op::MeanRows(a) => {
                let d = self.nodes[*a].value.ncols() as f64;
                let ones = Matrix::ones((1, self.nodes[*a].value.ncols()));
                let gx = g.dot(&ones).mapv(|x| x / d);
                self.acc(grads, *a, gx);
            }
            Op::SqrtEps(a) => {
                let y = &self.nodes[i].value;
                self.acc(grads, *a, g * &y.mapv(|v| 0.5 / v));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.nodes[p].value.ncols();
                    let gp = g.slice(ndarray::s![.., start..start + w]).to_owned();
                    self.acc(grads, p, gp);
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.nodes[p].value.nrows();
                    let gp = g.slice(ndarray::s![start..start + h, ..]).to_owned();
                    self.acc(grads, p, gp);
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                let mut gx = Matrix::zeros(self.nodes[*a].value.dim());
                gx.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                    .assign(g);
                self.acc(grads, *a, gx);
            }
            Op::SelectRows(a, idx) => {
                let mut gx = Matrix::zeros(self.nodes[*a].value.dim());
                for (i_out, &r) in idx.iter().enumerate() {
                    let mut row = gx.row_mut(r);
                    row += &g.row(i_out);
                }
                self.acc(grads, *a, gx);
            }
            Op::SumAll(a) => {
                let gx = Matrix::from_elem(self.nodes[*a].value.dim(), g[[0, 0]]);
                self.acc(grads, *a, gx);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.len() as f64;
                let gx = Matrix::from_elem(self.nodes[*a].value.dim(), g[[0, 0]] / n);
                self.acc(grads, *a, gx);
            }
            Op::Im2Col { x, h, w, c, k, s } => {
                let mut gx = Matrix::zeros(self.nodes[*x].value.dim());
                let oh = (h - k) / s + 1;
                let ow = (w - k) / s + 1;
                for py in 0..oh {
                    for px in 0..ow {
                        let orow = py * ow + px;
                        for ky in 0..*k {
                            for kx in 0..*k {
                                let irow = (py * s + ky) * w + (px * s + kx);
                                for ch in 0..*c {
                                    gx[[irow, ch]] += g[[orow, (ky * k + kx) * c + ch]];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
        }
    }
}

/// Finite-difference verification utilities.
pub mod grad_check {
    use super::{Matrix, Tape, Var};

    /// Central-difference step used throughout the verification suite.
    pub const DEFAULT_STEP: f64 = 1e-5;

    /// Compares analytic gradients of `f` (a scalar-valued tape program
    /// over the given leaf inputs) against central finite differences.
    ///
    /// Returns the maximum relative error over all input elements, with
    /// `|a - n| / max(|a|, |n|, floor)` as the per-element measure.
    pub fn max_rel_error<F>(inputs: &[Matrix], step: f64, f: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |values: &[Matrix]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.scalar(out)
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);

        let mut worst = 0.0f64;
        for (vi, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[vi], (input.nrows(), input.ncols()));
            for r in 0..input.nrows() {
                for c in 0..input.ncols() {
                    let mut plus = inputs.to_vec();
                    plus[vi][[r, c]] += step;
                    let mut minus = inputs.to_vec();
                    minus[vi][[r, c]] -= step;
                    let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
                    let a = analytic[[r, c]];
                    let denom = a.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max((a - numeric).abs() / denom);
                }
            }
        }
        worst
    }
}
