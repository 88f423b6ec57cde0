//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value plus whatever the backward pass needs. [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every node that depends on a
//! trainable leaf. Graphs built with `Graph::new(false)` never record
//! trainable leaves, which is how teacher passes stay gradient-free.

use std::collections::HashMap;

use crate::error::{FsrError, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, softmax_in_place, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Sentinel in gather indices meaning "read a zero" (used for conv padding).
pub const GATHER_ZERO: usize = usize::MAX;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    SumAll(Var),
    L2NormalizeRows(Var, Vec<f64>),
    WeightNormCols {
        v: Var,
        g: Var,
        vhat: Matrix,
        norms: Vec<f64>,
    },
    ReplaceRows {
        base: Var,
        fill: Var,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    trainable: bool,
    bound: HashMap<String, Var>,
}

pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> FsrError {
    FsrError::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl Graph {
    /// `trainable = false` turns every parameter into a constant.
    pub fn new(trainable: bool) -> Self {
        Self {
            nodes: Vec::new(),
            trainable,
            bound: HashMap::new(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad && self.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter once per graph; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| FsrError::Config(format!("unknown parameter '{name}'")))?
            .clone();
        let v = self.leaf(value, true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter nodes bound so far, by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("sub", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with a constant that never receives gradient.
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(shape_err("mul_const", self.shape(a), c.shape()));
        }
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        Ok(self.push(out, Op::MulConst(a, c), &[a]))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(shape_err("add_row", (r, c), self.shape(row)));
        }
        let mut out = self.value(a).clone();
        let b = self.value(row).as_slice().to_vec();
        for i in 0..r {
            for (o, x) in out.row_mut(i).iter_mut().zip(&b) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    /// Row-wise layer normalization with affine `1 x c` scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(shape_err("layer_norm", (r, c), self.shape(gamma)));
        }
        let xv = self.value(x);
        let mut xhat = Matrix::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (h, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let gv = self.value(gamma).as_slice();
        let bv = self.value(beta).as_slice();
        let mut out = xhat.clone();
        for i in 0..r {
            for ((o, g), b) in out.row_mut(i).iter_mut().zip(gv).zip(bv) {
                *o = *o * g + b;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Row-wise softmax where columns flagged in `excluded` get exactly zero
    /// weight and receive no gradient. Errors if every column is excluded.
    pub fn masked_softmax(&mut self, a: Var, excluded: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if excluded.len() != c {
            return Err(FsrError::Shape(format!(
                "mask of length {} for {c} columns",
                excluded.len()
            )));
        }
        if excluded.iter().all(|&m| m) {
            return Err(FsrError::NoAttendableToken);
        }
        let src = self.value(a);
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            let row = src.row(i);
            let max = row
                .iter()
                .zip(excluded)
                .filter(|(_, &m)| !m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let dst = out.row_mut(i);
            for j in 0..c {
                if !excluded[j] {
                    dst[j] = (row[j] - max).exp();
                    sum += dst[j];
                }
            }
            dst.iter_mut().for_each(|x| *x /= sum);
        }
        // Backward of softmax only needs the output, and excluded outputs are 0.
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + width > c {
            return Err(FsrError::Shape(format!(
                "slice_cols {start}+{width} of {c}"
            )));
        }
        let src = self.value(a);
        let mut out = Matrix::zeros(r, width);
        for i in 0..r {
            out.row_mut(i)
                .copy_from_slice(&src.row(i)[start..start + width]);
        }
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |&p| self.shape(p).0);
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(FsrError::Shape("concat_cols: row counts differ".into()));
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(r, c);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            let w = v.cols();
            for i in 0..r {
                out.row_mut(i)[off..off + w].copy_from_slice(v.row(i));
            }
            off += w;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Builds a `rows x cols` matrix whose flat element `i` is the flat element
    /// `index[i]` of `a`, or zero for [`GATHER_ZERO`].
    pub fn gather(&mut self, a: Var, rows: usize, cols: usize, index: Vec<usize>) -> Result<Var> {
        if index.len() != rows * cols {
            return Err(FsrError::Shape(format!(
                "gather: {} indices for {rows}x{cols}",
                index.len()
            )));
        }
        let src = self.value(a).as_slice();
        if index.iter().any(|&i| i != GATHER_ZERO && i >= src.len()) {
            return Err(FsrError::Shape("gather index out of range".into()));
        }
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i] })
            .collect();
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::Gather(a, index), &[a]))
    }

    /// Selects whole rows of `a` in the given order.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let c = self.shape(a).1;
        let index = rows.iter().flat_map(|&r| r * c..(r + 1) * c).collect();
        self.gather(a, rows.len(), c, index)
    }

    /// Column means as a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_rows();
        self.push(out, Op::MeanRows(a), &[a])
    }

    /// Column maxima as a `1 x c` row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rows() == 0 {
            return Err(FsrError::Shape("max over zero rows".into()));
        }
        let mut out = Matrix::filled(1, v.cols(), f64::NEG_INFINITY);
        let mut arg = vec![0usize; v.cols()];
        for (i, row) in v.iter_rows().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                if x > out[(0, j)] {
                    out[(0, j)] = x;
                    arg[j] = i;
                }
            }
        }
        Ok(self.push(out, Op::MaxRows(a, arg), &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Scales each row to unit Euclidean norm (norm floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows(a, norms), &[a])
    }

    /// Weight normalization of an `in x out` weight: column `j` becomes
    /// `g_j · v_j / ‖v_j‖` with `g` a `1 x out` row.
    pub fn weight_norm_cols(&mut self, v: Var, g: Var) -> Result<Var> {
        let (r, c) = self.shape(v);
        if self.shape(g) != (1, c) {
            return Err(shape_err("weight_norm", (r, c), self.shape(g)));
        }
        let vv = self.value(v);
        let mut norms = vec![0.0; c];
        for row in vv.iter_rows() {
            for (n, x) in norms.iter_mut().zip(row) {
                *n += x * x;
            }
        }
        norms.iter_mut().for_each(|n| *n = n.sqrt().max(1e-12));
        let mut vhat = vv.clone();
        for i in 0..r {
            for (x, n) in vhat.row_mut(i).iter_mut().zip(&norms) {
                *x /= n;
            }
        }
        let gv = self.value(g).as_slice();
        let mut out = vhat.clone();
        for i in 0..r {
            for (x, s) in out.row_mut(i).iter_mut().zip(gv) {
                *x *= s;
            }
        }
        Ok(self.push(out, Op::WeightNormCols { v, g, vhat, norms }, &[v, g]))
    }

    /// Rows flagged in `mask` are replaced by the `1 x c` row `fill`.
    pub fn replace_rows(&mut self, base: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(base);
        if self.shape(fill) != (1, c) || mask.len() != r {
            return Err(shape_err("replace_rows", (r, c), self.shape(fill)));
        }
        let mut out = self.value(base).clone();
        let f = self.value(fill).as_slice().to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(i).copy_from_slice(&f);
            }
        }
        Ok(self.push(
            out,
            Op::ReplaceRows {
                base,
                fill,
                mask: mask.to_vec(),
            },
            &[base, fill],
        ))
    }

    /// `x · w + b` for an `in x out` weight and `1 x out` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a `1x1` node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.shape(loss) != (1, 1) {
            return Err(FsrError::Shape("backward expects a scalar loss".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let acc = |grads: &mut [Option<Matrix>], v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&delta, 1.0),
            slot @ None => *slot = Some(delta),
        };
        // Accumulate `op(a) · op(b)` straight into a gradient slot.
        let acc_gemm = |grads: &mut [Option<Matrix>],
                        v: Var,
                        shape: (usize, usize),
                        a: &Matrix,
                        ta: bool,
                        b: &Matrix,
                        tb: bool| {
            let slot = grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
            gemm(a, ta, b, tb, slot, 1.0);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc_gemm(grads, *a, self.shape(*a), g, false, self.value(*b), true);
                }
                if self.wants(*b) {
                    acc_gemm(grads, *b, self.shape(*b), self.value(*a), true, g, false);
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    acc_gemm(grads, *a, self.shape(*a), g, false, self.value(*b), false);
                }
                if self.wants(*b) {
                    acc_gemm(grads, *b, self.shape(*b), g, true, self.value(*a), false);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::MulConst(a, c) => acc(grads, *a, g.zip_map(c, |x, y| x * y)),
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*row) {
                    let mut s = g.mean_rows();
                    let n = g.rows() as f64;
                    s.as_mut_slice().iter_mut().for_each(|x| *x *= n);
                    acc(grads, *row, s);
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s)),
            Op::Relu(a) => acc(
                grads,
                *a,
                g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 }),
            ),
            Op::Gelu(a) => acc(
                grads,
                *a,
                g.zip_map(self.value(*a), |d, x| {
                    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    d * (0.5 * (1.0 + t) + 0.5 * x * dt)
                }),
            ),
            Op::Softplus(a) => acc(grads, *a, g.zip_map(self.value(*a), |d, x| d * sigmoid(x))),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = xhat.shape();
                if self.wants(*gamma) {
                    let mut gg = Matrix::zeros(1, c);
                    for i in 0..r {
                        for ((o, d), h) in
                            gg.as_mut_slice().iter_mut().zip(g.row(i)).zip(xhat.row(i))
                        {
                            *o += d * h;
                        }
                    }
                    acc(grads, *gamma, gg);
                }
                if self.wants(*beta) {
                    let mut gb = g.mean_rows();
                    gb.as_mut_slice().iter_mut().for_each(|v| *v *= r as f64);
                    acc(grads, *beta, gb);
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).as_slice();
                    let mut gx = Matrix::zeros(r, c);
                    let cf = c as f64;
                    for (i, &inv) in inv_std.iter().enumerate().take(r) {
                        let dxh: Vec<f64> = g.row(i).iter().zip(gam).map(|(d, s)| d * s).collect();
                        let sum: f64 = dxh.iter().sum();
                        let dot: f64 = dxh.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum();
                        for ((o, d), h) in gx.row_mut(i).iter_mut().zip(&dxh).zip(xhat.row(i)) {
                            *o = inv / cf * (cf * d - sum - h * dot);
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(d, p)| d * p).sum();
                    for ((o, d), p) in gx.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = p * (d - dot);
                    }
                }
                acc(grads, *a, gx);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let sum: f64 = g.row(i).iter().sum();
                    for ((o, d), ly) in gx.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = d - ly.exp() * sum;
                    }
                }
                acc(grads, *a, gx);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let slot = grads[a.0].get_or_insert_with(|| Matrix::zeros(r, c));
                let w = g.cols();
                for i in 0..r {
                    for (o, d) in slot.row_mut(i)[*start..*start + w].iter_mut().zip(g.row(i)) {
                        *o += d;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, w) = self.shape(p);
                    if self.wants(p) {
                        let slot = grads[p.0].get_or_insert_with(|| Matrix::zeros(r, w));
                        for i in 0..r {
                            for (o, d) in slot.row_mut(i).iter_mut().zip(&g.row(i)[off..off + w]) {
                                *o += d;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.wants(p) {
                        let slice = g.as_slice()[off * c..(off + r) * c].to_vec();
                        acc(grads, p, Matrix::from_vec(r, c, slice)?);
                    }
                    off += r;
                }
            }
            Op::Gather(a, index) => {
                let (r, c) = self.shape(*a);
                let slot = grads[a.0].get_or_insert_with(|| Matrix::zeros(r, c));
                let dst = slot.as_mut_slice();
                for (&i, d) in index.iter().zip(g.as_slice()) {
                    if i != GATHER_ZERO {
                        dst[i] += d;
                    }
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let slot = grads[a.0].get_or_insert_with(|| Matrix::zeros(r, c));
                let inv = 1.0 / r as f64;
                for i in 0..r {
                    for (o, d) in slot.row_mut(i).iter_mut().zip(g.as_slice()) {
                        *o += d * inv;
                    }
                }
            }
            Op::MaxRows(a, arg) => {
                let (r, c) = self.shape(*a);
                let slot = grads[a.0].get_or_insert_with(|| Matrix::zeros(r, c));
                for (j, (&i, d)) in arg.iter().zip(g.as_slice()).enumerate() {
                    slot[(i, j)] += d;
                }
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(grads, *a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::L2NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for (i, &norm) in norms.iter().enumerate().take(y.rows()) {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(d, p)| d * p).sum();
                    for ((o, d), p) in gx.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = (d - p * dot) / norm;
                    }
                }
                acc(grads, *a, gx);
            }
            Op::WeightNormCols {
                v,
                g: gain,
                vhat,
                norms,
            } => {
                let (r, c) = vhat.shape();
                let mut dots = vec![0.0; c];
                for i in 0..r {
                    for ((s, d), h) in dots.iter_mut().zip(g.row(i)).zip(vhat.row(i)) {
                        *s += d * h;
                    }
                }
                if self.wants(*v) {
                    let gv = self.value(*gain).as_slice();
                    let mut dv = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            dv[(i, j)] = gv[j] / norms[j] * (g[(i, j)] - vhat[(i, j)] * dots[j]);
                        }
                    }
                    acc(grads, *v, dv);
                }
                if self.wants(*gain) {
                    acc(grads, *gain, Matrix::row_vector(dots));
                }
            }
            Op::ReplaceRows { base, fill, mask } => {
                let c = g.cols();
                if self.wants(*base) {
                    let mut gb = g.clone();
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            gb.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
                        }
                    }
                    acc(grads, *base, gb);
                }
                if self.wants(*fill) {
                    let mut gf = Matrix::zeros(1, c);
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for (o, d) in gf.as_mut_slice().iter_mut().zip(g.row(i)) {
                                *o += d;
                            }
                        }
                    }
                    acc(grads, *fill, gf);
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(f(x) ⊙ w))/dx for a fixed random `w`.
    fn check_unary(x0: &Matrix, build: impl Fn(&mut Graph, Var) -> Result<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let probe = {
            let mut g = Graph::new(true);
            let x = g.leaf(x0.clone(), true);
            let y = build(&mut g, x).unwrap();
            Matrix::uniform(g.shape(y).0, g.shape(y).1, -1.0, 1.0, &mut rng)
        };
        let eval = |xv: &Matrix| -> f64 {
            let mut g = Graph::new(false);
            let x = g.constant(xv.clone());
            let y = build(&mut g, x).unwrap();
            g.value(y).zip_map(&probe, |a, b| a * b).sum()
        };
        let mut g = Graph::new(true);
        let x = g.leaf(x0.clone(), true);
        let y = build(&mut g, x).unwrap();
        let w = g.mul_const(y, probe.clone()).unwrap();
        let loss = g.sum_all(w);
        let grads = g.backward(loss).unwrap();
        let analytic = grads
            .get(x)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(x0.rows(), x0.cols()));
        let eps = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.as_mut_slice()[i] += eps;
            let mut minus = x0.clone();
            minus.as_mut_slice()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.as_slice()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "element {i}: analytic {a} numeric {numeric}");
        }
    }

    fn rand_matrix(r: usize, c: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::uniform(r, c, -1.5, 1.5, &mut rng)
    }

    #[test]
    fn matmul_gradients() {
        let w = rand_matrix(4, 3, 1);
        check_unary(&rand_matrix(2, 4, 2), |g, x| {
            let w = g.constant(w.clone());
            g.matmul(x, w)
        });
        let a = rand_matrix(2, 4, 3);
        check_unary(&rand_matrix(3, 4, 4), |g, x| {
            let a = g.constant(a.clone());
            g.matmul_t(a, x)
        });
    }

    #[test]
    fn elementwise_gradients() {
        let x = rand_matrix(3, 5, 5);
        check_unary(&x, |g, x| Ok(g.gelu(x)));
        check_unary(&x, |g, x| Ok(g.softplus(x)));
        check_unary(&x, |g, x| Ok(g.softmax(x)));
        check_unary(&x, |g, x| Ok(g.log_softmax(x)));
        check_unary(&x, |g, x| Ok(g.l2_normalize_rows(x)));
        check_unary(&x, |g, x| g.mul(x, x));
        check_unary(&x, |g, x| {
            let y = g.scale(x, 3.0);
            g.sub(y, x)
        });
    }

    #[test]
    fn structural_gradients() {
        let x = rand_matrix(4, 6, 6);
        check_unary(&x, |g, x| {
            g.masked_softmax(x, &[false, true, false, false, true, false])
        });
        check_unary(&x, |g, x| {
            let a = g.slice_cols(x, 1, 3)?;
            let b = g.slice_cols(x, 4, 2)?;
            g.concat_cols(&[b, a])
        });
        check_unary(&x, |g, x| {
            let m = g.mean_rows(x);
            let t = g.max_rows(x)?;
            g.concat_rows(&[m, t, x])
        });
        check_unary(&x, |g, x| {
            g.gather(x, 2, 3, vec![0, GATHER_ZERO, 5, 23, 5, 7])
        });
        check_unary(&x, |g, x| {
            let fill = g.slice_cols(x, 0, 6)?;
            let fill = g.mean_rows(fill);
            g.replace_rows(x, fill, &[true, false, true, false])
        });
    }

    #[test]
    fn layer_norm_and_weight_norm_gradients() {
        let gamma = rand_matrix(1, 6, 8);
        let beta = rand_matrix(1, 6, 9);
        check_unary(&rand_matrix(3, 6, 10), |g, x| {
            let gm = g.constant(gamma.clone());
            let bt = g.constant(beta.clone());
            g.layer_norm(x, gm, bt, 1e-6)
        });
        check_unary(&gamma, |g, gm| {
            let x = g.constant(rand_matrix(3, 6, 11));
            let bt = g.constant(beta.clone());
            g.layer_norm(x, gm, bt, 1e-6)
        });
        let v = rand_matrix(5, 3, 12);
        check_unary(&v, |g, v| {
            let gain = g.constant(Matrix::row_vector(vec![0.5, 1.0, 2.0]));
            g.weight_norm_cols(v, gain)
        });
        check_unary(&Matrix::row_vector(vec![0.5, 1.0, 2.0]), |g, gain| {
            let v = g.constant(v.clone());
            g.weight_norm_cols(v, gain)
        });
    }

    #[test]
    fn add_row_gradient_reaches_bias() {
        let x = rand_matrix(3, 4, 13);
        check_unary(&rand_matrix(1, 4, 14), |g, b| {
            let x = g.constant(x.clone());
            g.add_row(x, b)
        });
    }

    #[test]
    fn masked_softmax_zeroes_excluded_columns() {
        let mut g = Graph::new(false);
        let x = g.constant(rand_matrix(2, 4, 15));
        let y = g.masked_softmax(x, &[true, false, true, false]).unwrap();
        for row in g.value(y).iter_rows() {
            assert_eq!(row[0], 0.0);
            assert_eq!(row[2], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            g.masked_softmax(x, &[true; 4]),
            Err(FsrError::NoAttendableToken)
        ));
    }

    #[test]
    fn frozen_graph_records_no_gradients() {
        let mut g = Graph::new(false);
        let x = g.leaf(rand_matrix(2, 2, 16), true);
        let y = g.sum_all(x);
        let grads = g.backward(y).unwrap();
        assert!(grads.get(x).is_none());
    }
}
