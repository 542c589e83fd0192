//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly: each node stores its forward
//! value together with the information its backward rule needs. Calling
//! [`Graph::backward`] on a `1 × 1` node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a learnable tensor inside a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

const GELU_COEFF: f64 = 0.044_715;
const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Matrix<T>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    MaskedSoftmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        indices: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    Mean(Var),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// An eagerly evaluated computation tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<T> {
    Err(Error::Shape(format!(
        "{what}: {}x{} vs {}x{}",
        a.0, a.1, b.0, b.1
    )))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.get(0, 0)
    }

    /// A constant or input leaf. Its gradient is still available after `backward`.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a parameter once per graph; later calls with the same id return the same node.
    pub fn param(&mut self, id: ParamId, value: &Matrix<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(value, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("add", sa, sb);
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return shape_err("add_row", sa, sr);
        }
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sa.0 {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// `x · w + b`, with `b` a `1 × out` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Element-wise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Matrix<T>) -> Result<Var> {
        let sa = self.shape(a);
        if sa != mask.shape() {
            return shape_err("mul_const", sa, mask.shape());
        }
        let mut value = self.value(a).clone();
        for (x, &m) in value.data_mut().iter_mut().zip(mask.data()) {
            *x *= m;
        }
        Ok(self.push(value, Op::MulConst(a, mask)))
    }

    /// Gaussian error linear unit (tanh form).
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    /// Row-wise layer normalization with learnable `1 × c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(gamma) != (1, cols) || self.shape(beta) != (1, cols) {
            return shape_err("layer_norm", (rows, cols), self.shape(gamma));
        }
        let n = T::of_usize(cols);
        let eps = T::of(LAYER_NORM_EPS);
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
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
        ))
    }

    /// Row-wise softmax restricted to the columns where `keep` is true; other columns get 0.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if keep.len() != cols {
            return shape_err("masked_softmax", (rows, cols), (1, keep.len()));
        }
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for c in 0..cols {
                if keep[c] {
                    let e = (row[c] - max).exp();
                    out.set(r, c, e);
                    total += e;
                }
            }
            for v in out.row_mut(r) {
                *v /= total;
            }
        }
        Ok(self.push(out, Op::MaskedSoftmax(x)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let value = self.value(p);
            if value.cols() != cols {
                return shape_err("concat_rows", (rows, cols), value.shape());
            }
            rows += value.rows();
            data.extend_from_slice(value.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return shape_err("concat_cols", (rows, 0), s);
            }
            widths.push(s.1);
        }
        let cols: usize = widths.iter().sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                value.row_mut(r)[offset..offset + w].copy_from_slice(self.value(p).row(r));
                offset += w;
            }
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > cols {
            return shape_err("slice_cols", (rows, cols), (start, len));
        }
        let xv = self.value(x);
        let value = Matrix::from_fn(rows, len, |r, c| xv.get(r, start + c));
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    /// Gathers rows by index; repeated indices are allowed (embedding lookup).
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("row index {bad} out of {rows}")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(xv.row(i));
        }
        let value = Matrix::from_vec(indices.len(), cols, data)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Per-row softmax cross-entropy, returned as an `R × 1` column of losses.
    ///
    /// When `include` is given (row-major `R × C`), each row's softmax runs over the
    /// included columns only; the target column must be included.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        include: Option<Vec<bool>>,
    ) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != rows {
            return shape_err(
                "softmax_cross_entropy targets",
                (rows, cols),
                (targets.len(), 1),
            );
        }
        if let Some(inc) = &include {
            if inc.len() != rows * cols {
                return shape_err(
                    "softmax_cross_entropy include",
                    (rows, cols),
                    (inc.len(), 1),
                );
            }
        }
        let z = self.value(logits);
        let mut probs = Matrix::zeros(rows, cols);
        let mut losses = Matrix::zeros(rows, 1);
        for r in 0..rows {
            let target = targets[r];
            let kept = |c: usize| include.as_ref().is_none_or(|inc| inc[r * cols + c]);
            if target >= cols || !kept(target) {
                return Err(Error::Precondition(format!(
                    "target {target} of row {r} is not an included column"
                )));
            }
            let row = z.row(r);
            let max = (0..cols)
                .filter(|&c| kept(c))
                .map(|c| row[c])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for c in (0..cols).filter(|&c| kept(c)) {
                let e = (row[c] - max).exp();
                probs.set(r, c, e);
                total += e;
            }
            for v in probs.row_mut(r) {
                *v /= total;
            }
            losses.set(r, 0, max + total.ln() - row[target]);
        }
        Ok(self.push(
            losses,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Element-wise binary cross-entropy on logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return shape_err("bce_with_logits", z.shape(), (targets.len(), 1));
        }
        let mut out = z.clone();
        for (o, &y) in out.data_mut().iter_mut().zip(targets) {
            let x = *o;
            *o = x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln();
        }
        Ok(self.push(
            out,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean of all elements, as a `1 × 1` node.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Empty("mean of an empty tensor".into()));
        }
        let m = v.data().iter().copied().sum::<T>() / T::of_usize(v.len());
        Ok(self.push(Matrix::filled(1, 1, m), Op::Mean(x)))
    }

    /// `Σ wᵢ·xᵢ` over equally shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Empty("weighted_sum without terms".into()));
        };
        let shape = self.shape(first);
        let mut value = Matrix::zeros(shape.0, shape.1);
        for &(v, w) in terms {
            if self.shape(v) != shape {
                return shape_err("weighted_sum", shape, self.shape(v));
            }
            for (o, &x) in value.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        Ok(self.push(value, Op::WeightedSum(terms.to_vec())))
    }

    /// Gradients of the `1 × 1` node `root` with respect to every node of the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward from a {:?} node",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, g.matmul_t(bv)?);
                    accumulate(&mut grads, *b, av.t_matmul(&g)?);
                }
                Op::MatMulT(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, g.matmul(bv)?);
                    accumulate(&mut grads, *b, g.t_matmul(av)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, gr);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.scale(*f)),
                Op::MulConst(a, mask) => {
                    let mut ga = g.clone();
                    for (x, &m) in ga.data_mut().iter_mut().zip(mask.data()) {
                        *x *= m;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let xv = self.value(*a);
                    let mut ga = g.clone();
                    for (x, &inp) in ga.data_mut().iter_mut().zip(xv.data()) {
                        *x *= gelu_grad(inp);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let gv = self.value(*gamma).data();
                    let n = T::of_usize(cols);
                    let mut gx = Matrix::zeros(rows, cols);
                    let mut gg = Matrix::zeros(1, cols);
                    let mut gb = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        let dy = g.row(r);
                        let h = xhat.row(r);
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for c in 0..cols {
                            let dh = dy[c] * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * h[c];
                            gg.data_mut()[c] += dy[c] * h[c];
                            gb.data_mut()[c] += dy[c];
                        }
                        let scale = inv_std[r] / n;
                        for c in 0..cols {
                            let dh = dy[c] * gv[c];
                            gx.set(r, c, scale * (n * dh - sum_dh - h[c] * sum_dh_h));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::MaskedSoftmax(x) => {
                    let p = &node.value;
                    let mut gx = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let inner = dot(pr, g.row(r));
                        for c in 0..p.cols() {
                            gx.set(r, c, pr[c] * (g.get(r, c) - inner));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut grads, p, Matrix::from_vec(rows, cols, slice)?);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let part = Matrix::from_fn(rows, cols, |r, c| g.get(r, offset + c));
                        accumulate(&mut grads, p, part);
                        offset += cols;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SelectRows { x, indices } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let mut gz = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let upstream = g.get(r, 0);
                        let cur = gz.get(r, t);
                        gz.set(r, t, cur - T::one());
                        for v in gz.row_mut(r) {
                            *v *= upstream;
                        }
                    }
                    accumulate(&mut grads, *logits, gz);
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = self.value(*logits);
                    let mut gz = g.clone();
                    for ((o, &x), &y) in gz.data_mut().iter_mut().zip(z.data()).zip(targets) {
                        *o *= sigmoid(x) - y;
                    }
                    accumulate(&mut grads, *logits, gz);
                }
                Op::Mean(x) => {
                    let (rows, cols) = self.shape(*x);
                    let share = g.get(0, 0) / T::of_usize(rows * cols);
                    accumulate(&mut grads, *x, Matrix::filled(rows, cols, share));
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, g.scale(w));
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }
}

impl PartialOrd for Var {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Var {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.cmp(&other.0)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a node; `None` when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter registered in the graph, ordered by id.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Matrix<T>>)> + '_ {
        self.params.iter().map(|&(id, v)| (id, self.wrt(v)))
    }
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::of(GELU_COEFF) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(GELU_COEFF);
    let th = (c * (x + k * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
