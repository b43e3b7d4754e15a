//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Every op evaluates eagerly and is appended to the tape, so the same forward
//! code serves inference (nothing requires a gradient, backward never runs)
//! and training. Parameters are borrowed rather than copied; constants stop
//! gradient flow.

use std::borrow::Cow;

use super::matrix::{sigmoid, Matrix, Real};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded primitive, used for fault injection in gradient tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulT,
    Add,
    AddRow,
    Mul,
    Scale,
    Sigmoid,
    Tanh,
    Relu,
    SoftmaxRows,
    LayerNormRows,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    GatherRows,
    Sum,
    BceMean,
}

const OP_NAMES: [(OpKind, &str); 19] = [
    (OpKind::Leaf, "leaf"),
    (OpKind::MatMul, "matmul"),
    (OpKind::MatMulT, "matmul_t"),
    (OpKind::Add, "add"),
    (OpKind::AddRow, "add_row"),
    (OpKind::Mul, "mul"),
    (OpKind::Scale, "scale"),
    (OpKind::Sigmoid, "sigmoid"),
    (OpKind::Tanh, "tanh"),
    (OpKind::Relu, "relu"),
    (OpKind::SoftmaxRows, "softmax_rows"),
    (OpKind::LayerNormRows, "layer_norm_rows"),
    (OpKind::ConcatRows, "concat_rows"),
    (OpKind::ConcatCols, "concat_cols"),
    (OpKind::SliceRows, "slice_rows"),
    (OpKind::SliceCols, "slice_cols"),
    (OpKind::GatherRows, "gather_rows"),
    (OpKind::Sum, "sum"),
    (OpKind::BceMean, "bce_mean"),
];

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = OP_NAMES.iter().find(|(k, _)| k == self).map_or("?", |(_, n)| n);
        f.write_str(name)
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OP_NAMES
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(k, _)| *k)
            .ok_or_else(|| Error::invalid(format!("unknown op `{s}`")))
    }
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, gain: Var, bias: Var, eps: T },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    GatherRows { src: Var, order: Vec<usize> },
    Sum(Var),
    BceMean { pred: Var, target: Matrix<T>, clip: T },
}

impl<T: Real> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulT(..) => OpKind::MatMulT,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNormRows { .. } => OpKind::LayerNormRows,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Sum(_) => OpKind::Sum,
            Op::BceMean { .. } => OpKind::BceMean,
        }
    }
}

struct Node<'p, T: Real> {
    value: Cow<'p, Matrix<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<'p, T: Real = f32> {
    nodes: Vec<Node<'p, T>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Doubles every gradient contribution emitted by `kind`'s backward rule.
    /// Only useful for checking that a gradient check can fail.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'p, Matrix<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Matrix<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Borrowed trainable parameter.
    pub fn param(&mut self, m: &'p Matrix<T>) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, true)
    }

    /// Owned trainable leaf.
    pub fn leaf(&mut self, m: Matrix<T>) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, true)
    }

    /// Owned constant; no gradient flows into it.
    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, m: &'p Matrix<T>) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.derived(v, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.derived(v, Op::Add(a, b), &[a, b]))
    }

    /// Broadcast-add a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.derived(v, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.derived(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.derived(v, Op::Scale(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.derived(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        self.derived(v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.derived(v, Op::Relu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        self.derived(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let v = self
            .value(x)
            .layer_norm_rows(self.value(gain), self.value(bias), eps)?;
        Ok(self.derived(v, Op::LayerNormRows { x, gain, bias, eps }, &[x, gain, bias]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let v = {
            let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Matrix::concat_rows(&mats)?
        };
        Ok(self.derived(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let v = {
            let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Matrix::concat_cols(&mats)?
        };
        Ok(self.derived(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, end: usize) -> Var {
        let v = self.value(src).slice_rows(start, end);
        self.derived(v, Op::SliceRows { src, start }, &[src])
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> Var {
        let v = self.value(src).slice_cols(start, end);
        self.derived(v, Op::SliceCols { src, start }, &[src])
    }

    /// Row `i` of the result is row `order[i]` of `src`.
    pub fn gather_rows(&mut self, src: Var, order: &[usize]) -> Var {
        let v = self.value(src).gather_rows(order);
        self.derived(
            v,
            Op::GatherRows {
                src,
                order: order.to_vec(),
            },
            &[src],
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.derived(Matrix::filled(1, 1, s), Op::Sum(a), &[a])
    }

    /// Mean binary cross-entropy of probabilities `pred` against a constant
    /// 0/1 `target`, with predictions clipped to `[clip, 1 − clip]`.
    pub fn bce_mean(&mut self, pred: Var, target: &Matrix<T>, clip: T) -> Result<Var> {
        let loss = bce_mean(self.value(pred), target, clip)?;
        Ok(self.derived(
            Matrix::filled(1, 1, loss),
            Op::BceMean {
                pred,
                target: target.clone(),
                clip,
            },
            &[pred],
        ))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                left: shape,
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let boost = if self.fault == Some(node.op.kind()) {
                T::lit(2.0)
            } else {
                T::one()
            };
            let emit = |grads: &mut Vec<Option<Matrix<T>>>, v: Var, d: Matrix<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                let d = if boost != T::one() { d.scale(boost) } else { d };
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d).expect("gradient shape"),
                    slot @ None => *slot = Some(d),
                }
            };

            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        emit(&mut grads, *a, g.matmul_t(vb)?);
                    }
                    if self.requires_grad(*b) {
                        emit(&mut grads, *b, va.t_matmul(&g)?);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        emit(&mut grads, *a, g.matmul(vb)?);
                    }
                    if self.requires_grad(*b) {
                        emit(&mut grads, *b, g.t_matmul(va)?);
                    }
                }
                Op::Add(a, b) => {
                    emit(&mut grads, *a, g.clone());
                    emit(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    emit(&mut grads, *row, g.col_sums());
                    emit(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        emit(&mut grads, *a, g.hadamard(vb)?);
                    }
                    if self.requires_grad(*b) {
                        emit(&mut grads, *b, g.hadamard(va)?);
                    }
                }
                Op::Scale(a, s) => emit(&mut grads, *a, g.scale(*s)),
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, "sigmoid'", |g, y| g * y * (T::one() - y))?;
                    emit(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, "tanh'", |g, y| g * (T::one() - y * y))?;
                    emit(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), "relu'", |g, x| {
                        if x > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    })?;
                    emit(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = super::matrix::dot(yr, gr);
                        for (o, (&yv, &gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - inner);
                        }
                    }
                    emit(&mut grads, *a, d);
                }
                Op::LayerNormRows { x, gain, bias, eps } => {
                    let (dx, dg, db) = layer_norm_backward(
                        self.value(*x),
                        self.value(*gain),
                        &g,
                        *eps,
                    );
                    emit(&mut grads, *x, dx);
                    emit(&mut grads, *gain, dg);
                    emit(&mut grads, *bias, db);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).rows();
                        if self.requires_grad(p) {
                            emit(&mut grads, p, g.slice_rows(start, start + n));
                        }
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).cols();
                        if self.requires_grad(p) {
                            emit(&mut grads, p, g.slice_cols(start, start + n));
                        }
                        start += n;
                    }
                }
                Op::SliceRows { src, start } => {
                    let s = self.value(*src);
                    let mut d = Matrix::zeros(s.rows(), s.cols());
                    for r in 0..g.rows() {
                        d.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    emit(&mut grads, *src, d);
                }
                Op::SliceCols { src, start } => {
                    let s = self.value(*src);
                    let mut d = Matrix::zeros(s.rows(), s.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    emit(&mut grads, *src, d);
                }
                Op::GatherRows { src, order } => {
                    let s = self.value(*src);
                    let mut d = Matrix::zeros(s.rows(), s.cols());
                    for (i, &r) in order.iter().enumerate() {
                        for (o, &v) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    emit(&mut grads, *src, d);
                }
                Op::Sum(a) => {
                    let s = self.value(*a);
                    emit(&mut grads, *a, Matrix::filled(s.rows(), s.cols(), g.data()[0]));
                }
                Op::BceMean { pred, target, clip } => {
                    let p = self.value(*pred);
                    let n = T::from_usize(p.len().max(1)).expect("count");
                    let (lo, hi) = (*clip, T::one() - *clip);
                    let upstream = g.data()[0];
                    let d = p.zip_map(target, "bce'", |p, y| {
                        if p < lo || p > hi {
                            T::zero()
                        } else {
                            upstream * (p - y) / (p * (T::one() - p) * n)
                        }
                    })?;
                    emit(&mut grads, *pred, d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Mean clipped binary cross-entropy of `pred` against `target`.
pub fn bce_mean<T: Real>(pred: &Matrix<T>, target: &Matrix<T>, clip: T) -> Result<T> {
    pred.same_shape(target, "bce")?;
    if pred.is_empty() {
        return Ok(T::zero());
    }
    let (lo, hi) = (clip, T::one() - clip);
    let mut total = T::zero();
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let p = p.max(lo).min(hi);
        total -= y * p.ln() + (T::one() - y) * (T::one() - p).ln();
    }
    Ok(total / T::from_usize(pred.len()).expect("count"))
}

fn layer_norm_backward<T: Real>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    g: &Matrix<T>,
    eps: T,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let (rows, cols) = x.shape();
    let n = T::from_usize(cols).expect("count");
    let mut dx = Matrix::zeros(rows, cols);
    let mut dg = Matrix::zeros(1, cols);
    let mut db = Matrix::zeros(1, cols);
    let mut xhat = vec![T::zero(); cols];
    let mut dxhat = vec![T::zero(); cols];
    for r in 0..rows {
        let xr = x.row(r);
        let gr = g.row(r);
        let mean = xr.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = xr.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let inv = T::one() / (var + eps).sqrt();
        for c in 0..cols {
            xhat[c] = (xr[c] - mean) * inv;
            dxhat[c] = gr[c] * gain.data()[c];
            dg.data_mut()[c] += gr[c] * xhat[c];
            db.data_mut()[c] += gr[c];
        }
        let mean_d = dxhat.iter().fold(T::zero(), |a, &v| a + v) / n;
        let mean_dx = dxhat
            .iter()
            .zip(&xhat)
            .fold(T::zero(), |a, (&d, &h)| a + d * h)
            / n;
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv * (dxhat[c] - mean_d - xhat[c] * mean_dx);
        }
    }
    (dx, dg, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn op_names_round_trip() {
        for (kind, name) in OP_NAMES {
            assert_eq!(kind.to_string(), name);
            assert_eq!(name.parse::<OpKind>().unwrap(), kind);
        }
        assert!("conv".parse::<OpKind>().is_err());
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Matrix<f64>, f: &dyn Fn(&Matrix<f64>) -> f64) -> Matrix<f64> {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn linear_map_gradient() {
        let w = Matrix::row_vector(vec![1.0f64, 2.0]);
        let x = Matrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let wv = tape.constant_ref(&w);
        let xv = tape.param(&x);
        let y = tape.matmul(wv, xv).unwrap();
        let loss = tape.sum(y);
        assert_eq!(tape.scalar(loss), 11.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap().data(), &[1.0, 2.0]);
        assert!(grads.get(wv).is_none());
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Matrix::zeros(1, 1));
        let s = tape.sigmoid(z);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(Matrix::zeros(2, 1));
        assert!(matches!(tape.backward(z), Err(Error::Shape { .. })));
    }

    /// Three-layer net built from every primitive that carries a gradient.
    fn three_layer_loss(
        tape: &mut Tape<'_, f64>,
        x: Var,
        w1: Var,
        w2: Var,
        w3: Var,
        target: &Matrix<f64>,
    ) -> Var {
        let h = tape.matmul(x, w1).unwrap();
        let g = tape.constant(Matrix::filled(1, 6, 1.0));
        let b = tape.constant(Matrix::filled(1, 6, 0.1));
        let h = tape.layer_norm_rows(h, g, b, 1e-5).unwrap();
        let h = tape.tanh(h);
        let h2 = tape.matmul(h, w2).unwrap();
        let h2 = tape.relu(h2);
        let att = tape.matmul_t(h2, h2).unwrap();
        let att = tape.scale(att, 0.5);
        let att = tape.softmax_rows(att);
        let mixed = tape.matmul(att, h2).unwrap();
        let left = tape.slice_cols(mixed, 0, 3);
        let right = tape.slice_cols(mixed, 3, 5);
        let both = tape.concat_cols(&[right, left]).unwrap();
        let top = tape.slice_rows(both, 0, 2);
        let bottom = tape.slice_rows(both, 2, 4);
        let stacked = tape.concat_rows(&[bottom, top]).unwrap();
        let shuffled = tape.gather_rows(stacked, &[3, 1, 0, 2]);
        let sq = tape.mul(shuffled, shuffled).unwrap();
        let res = tape.add(shuffled, sq).unwrap();
        let logits = tape.matmul(res, w3).unwrap();
        let bias = tape.constant(Matrix::row_vector(vec![0.2, -0.1]));
        let logits = tape.add_row(logits, bias).unwrap();
        let probs = tape.sigmoid(logits);
        tape.bce_mean(probs, target, 1e-7).unwrap()
    }

    #[test]
    fn three_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 4, 3);
        let w1 = random(&mut rng, 3, 6);
        let w2 = random(&mut rng, 6, 5);
        let w3 = random(&mut rng, 5, 2);
        let target = Matrix::from_fn(4, 2, |r, c| ((r + c) % 2) as f64);

        let eval = |x: &Matrix<f64>, w1: &Matrix<f64>, w2: &Matrix<f64>, w3: &Matrix<f64>| {
            let mut tape = Tape::new();
            let (x, w1, w2, w3) = (
                tape.constant_ref(x),
                tape.constant_ref(w1),
                tape.constant_ref(w2),
                tape.constant_ref(w3),
            );
            let l = three_layer_loss(&mut tape, x, w1, w2, w3, &target);
            tape.scalar(l)
        };

        let mut tape = Tape::new();
        let (xv, w1v, w2v, w3v) = (
            tape.param(&x),
            tape.param(&w1),
            tape.param(&w2),
            tape.param(&w3),
        );
        let loss = three_layer_loss(&mut tape, xv, w1v, w2v, w3v, &target);
        let grads = tape.backward(loss).unwrap();

        let checks = [
            (xv, numeric_grad(&x, &|m| eval(m, &w1, &w2, &w3))),
            (w1v, numeric_grad(&w1, &|m| eval(&x, m, &w2, &w3))),
            (w2v, numeric_grad(&w2, &|m| eval(&x, &w1, m, &w3))),
            (w3v, numeric_grad(&w3, &|m| eval(&x, &w1, &w2, m))),
        ];
        for (var, numeric) in checks {
            let err = rel_err(grads.get(var).unwrap(), &numeric);
            assert!(err < 1e-6, "relative error {err}");
        }
    }

    #[test]
    fn injected_fault_changes_gradients() {
        let x = Matrix::row_vector(vec![0.3f64, -0.2]);
        let run = |fault: Option<OpKind>| {
            let mut tape = Tape::new();
            if let Some(k) = fault {
                tape.inject_backward_fault(k);
            }
            let v = tape.param(&x);
            let s = tape.sigmoid(v);
            let l = tape.sum(s);
            tape.backward(l).unwrap().get(v).unwrap().clone()
        };
        let clean = run(None);
        let broken = run(Some(OpKind::Sigmoid));
        assert!((broken.get(0, 0) - 2.0 * clean.get(0, 0)).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            /// Every differentiable primitive agrees with central differences.
            #[test]
            fn primitives_match_finite_differences(seed in 0u64..1_000_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random(&mut rng, 3, 4);
                let w = random(&mut rng, 4, 4);
                let gain = random(&mut rng, 1, 4);
                let target = Matrix::from_fn(3, 4, |r, c| ((r * 3 + c) % 2) as f64);
                let build = |tape: &mut Tape<'_, f64>, xv: Var, gv: Var| {
                    let h = tape.matmul_t(xv, xv).unwrap();
                    let h = tape.softmax_rows(h);
                    let h = tape.matmul(h, xv).unwrap();
                    let wv = tape.constant(w.clone());
                    let h = tape.matmul(h, wv).unwrap();
                    let bias = tape.constant(Matrix::zeros(1, 4));
                    let h = tape.layer_norm_rows(h, gv, bias, 1e-5).unwrap();
                    let t = tape.tanh(h);
                    let s = tape.sigmoid(t);
                    tape.bce_mean(s, &target, 1e-7).unwrap()
                };
                let f = |xm: &Matrix<f64>, gm: &Matrix<f64>| {
                    let mut tape = Tape::new();
                    let xv = tape.constant_ref(xm);
                    let gv = tape.constant_ref(gm);
                    let l = build(&mut tape, xv, gv);
                    tape.scalar(l)
                };
                let mut tape = Tape::new();
                let xv = tape.param(&x);
                let gv = tape.param(&gain);
                let loss = build(&mut tape, xv, gv);
                let grads = tape.backward(loss).unwrap();
                let nx = numeric_grad(&x, &|m| f(m, &gain));
                let ng = numeric_grad(&gain, &|m| f(&x, m));
                prop_assert!(rel_err(grads.get(xv).unwrap(), &nx) < 1e-4);
                prop_assert!(rel_err(grads.get(gv).unwrap(), &ng) < 1e-4);
            }
        }
    }
}
