//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value; [`Tape::backward`] walks the nodes in
//! reverse and accumulates gradients into every node that (transitively)
//! depends on a trainable parameter or a gradient-requiring input. Frozen
//! parameters never receive gradient buffers.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{log_add_exp, sigmoid, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    PairAdd(Var, Var),
    Scale(Var, S),
    Sigmoid(Var),
    Tanh(Var),
    Swish(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Mask(Var, Vec<S>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Pick {
        x: Var,
        index: usize,
    },
    LogAddExp(Var, Var),
    Sum(Var),
    AddScalars(Vec<Var>),
}

impl<S> Op<S> {
    fn for_each_parent(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::PairAdd(a, b)
            | Op::LogAddExp(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Swish(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Mask(x, _)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Pick { x, .. } => f(*x),
            Op::LayerNorm { x, gamma, beta, .. } => {
                f(*x);
                f(*gamma);
                f(*beta);
            }
            Op::Embedding { table, .. } => f(*table),
            Op::ConcatCols(parts) | Op::ConcatRows(parts) | Op::AddScalars(parts) => {
                parts.iter().copied().for_each(f)
            }
        }
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` when `v` needs no
/// gradient.
fn grad_slot<'g, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'g mut [Option<Vec<S>>],
    v: Var,
) -> Option<&'g mut Vec<S>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); node.value.len()]))
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Grads<S> {
    /// Trainable parameters reached by the loss, in first-use order.
    pub params: IndexMap<String, Tensor<S>>,
    inputs: HashMap<Var, Tensor<S>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient with respect to an input created with `requires_grad = true`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.inputs.get(&v)
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    param_vars: HashMap<String, Var>,
    param_names: Vec<(Var, String)>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut total = acc.iter().copied().sum::<S>();
    for (&x, &y) in ra.iter().zip(rb) {
        total += x * y;
    }
    total
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn matrix_dims<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(
            op,
            format!("expected a matrix, got {:?}", t.shape()),
        ));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            param_names: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        let mut needs_grad = false;
        op.for_each_parent(|p| needs_grad |= self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<S>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records a free input; when `requires_grad` its gradient is returned by
    /// [`Grads::wrt`].
    pub fn input(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.leaf(value, requires_grad)
    }

    /// Looks up a named parameter; repeated lookups return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let v = self.leaf(p.value.clone(), p.trainable)?;
        self.param_vars.insert(name.to_string(), v);
        if p.trainable {
            self.param_names.push((v, name.to_string()));
        }
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] . [{k2}x{n}]")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == S::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o += x * bb;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.value(x))?;
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push("transpose", value, Op::Transpose(x))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        check_same(name, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("add_row", value, Op::AddRow(x, bias))
    }

    /// `out[t * U + u] = a[t] + b[u]` for `a: [T x J]`, `b: [U x J]`.
    pub fn pair_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, j) = matrix_dims("pair_add", self.value(a))?;
        let (u, j2) = matrix_dims("pair_add", self.value(b))?;
        if j != j2 {
            return Err(Error::shape(
                "pair_add",
                format!("[{t}x{j}] (+) [{u}x{j2}]"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(t * u * j);
        for ti in 0..t {
            let ar = &av[ti * j..(ti + 1) * j];
            for ui in 0..u {
                let br = &bv[ui * j..(ui + 1) * j];
                out.extend(ar.iter().zip(br).map(|(&x, &y)| x + y));
            }
        }
        let value = Tensor::new(vec![t * u, j], out)?;
        self.push("pair_add", value, Op::PairAdd(a, b))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Result<Var> {
        let value = self.map(x, |v| v * s)?;
        self.push("scale", value, Op::Scale(x, s))
    }

    fn map(&self, x: Var, f: impl Fn(S) -> S) -> Result<Tensor<S>> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape(x).to_vec(), data)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, sigmoid)?;
        self.push("sigmoid", value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, S::tanh)?;
        self.push("tanh", value, Op::Tanh(x))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v * sigmoid(v))?;
        self.push("swish", value, Op::Swish(x))
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", format!("row width {d}")));
        }
        if eps <= S::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = self.value(x).rows();
        let dn = S::from_usize(d).unwrap();
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.value(x).data().chunks(d) {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).cols();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(d) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - m).exp()));
            let z: S = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x))
    }

    /// Row-wise log-softmax over the last axis with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).cols();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(d) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(x))
    }

    /// Inverted dropout. The identity when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = S::lit(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("dropout", value, Op::Mask(x, mask))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = matrix_dims("embedding", self.value(table))?;
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!(
                "embedding id {bad} out of range for {n} rows"
            )));
        }
        let tv = self.value(table).data();
        let data = ids
            .iter()
            .flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied())
            .collect();
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = matrix_dims("concat_rows", self.value(p))?;
            if c != cols {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims("slice_cols", self.value(x))?;
        if len == 0 || start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}+{len} > {cols}"),
            ));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        self.push("slice_cols", value, Op::SliceCols { x, start })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims("slice_rows", self.value(x))?;
        if len == 0 || start + len > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}+{len} > {rows}"),
            ));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        self.push("slice_rows", value, Op::SliceRows { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// One element of `x` (flat row-major index) as a scalar node.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .data()
            .get(index)
            .ok_or_else(|| Error::shape("pick", format!("index {index} out of range")))?;
        self.push("pick", Tensor::scalar(v), Op::Pick { x, index })
    }

    /// `log(exp(a) + exp(b))` of two scalars.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != 1 || self.value(b).len() != 1 {
            return Err(Error::shape("log_add_exp", "scalar operands required"));
        }
        let v = log_add_exp(self.value(a).item(), self.value(b).item());
        self.push("log_add_exp", Tensor::scalar(v), Op::LogAddExp(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(v), Op::Sum(x))
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("add_scalars", "empty operand list"));
        }
        let mut total = S::zero();
        for &x in xs {
            if self.value(x).len() != 1 {
                return Err(Error::shape("add_scalars", "scalar operands required"));
            }
            total += self.value(x).item();
        }
        self.push(
            "add_scalars",
            Tensor::scalar(total),
            Op::AddScalars(xs.to_vec()),
        )
    }

    /// `x . w + b` for `x: [n x in]`, `w: [in x out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if self.needs(loss) {
            grads[loss.0] = Some(vec![S::one()]);
        }
        let mut leaf_grads: HashMap<usize, Vec<S>> = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaf_grads.insert(i, g);
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
        }

        let mut params = IndexMap::new();
        for (v, name) in &self.param_names {
            if let Some(g) = leaf_grads.remove(&v.0) {
                let t = Tensor::new(self.shape(*v).to_vec(), g)?;
                params.insert(name.clone(), t);
            }
        }
        let mut inputs = HashMap::new();
        for (i, g) in leaf_grads {
            inputs.insert(
                Var(i),
                Tensor::new(self.nodes[i].value.shape().to_vec(), g)?,
            );
        }
        Ok(Grads { params, inputs })
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                with_grad!(*a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                with_grad!(*b, |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == S::zero() {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, &gg) in drow.iter_mut().zip(grow) {
                                *d += x * gg;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                with_grad!(*x, |dx| {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                });
                with_grad!(*b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                });
                with_grad!(*b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                });
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                with_grad!(*a, |da| {
                    for ((d, &gg), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gg * y;
                    }
                });
                with_grad!(*b, |db| {
                    for ((d, &gg), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gg * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let cols = nodes[bias.0].value.len();
                with_grad!(*x, |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                });
                with_grad!(*bias, |db| {
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::PairAdd(a, b) => {
                let j = nodes[a.0].value.cols();
                let u = nodes[b.0].value.rows();
                with_grad!(*a, |da| {
                    for (r, row) in g.chunks(j).enumerate() {
                        let t = r / u;
                        da[t * j..(t + 1) * j]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, &v)| *d += v);
                    }
                });
                with_grad!(*b, |db| {
                    for (r, row) in g.chunks(j).enumerate() {
                        let ui = r % u;
                        db[ui * j..(ui + 1) * j]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::Scale(x, s) => {
                with_grad!(*x, |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                with_grad!(*x, |dx| {
                    for ((d, &gg), &yy) in dx.iter_mut().zip(g).zip(y) {
                        *d += gg * yy * (S::one() - yy);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                with_grad!(*x, |dx| {
                    for ((d, &gg), &yy) in dx.iter_mut().zip(g).zip(y) {
                        *d += gg * (S::one() - yy * yy);
                    }
                });
            }
            Op::Swish(x) => {
                let xv = nodes[x.0].value.data();
                with_grad!(*x, |dx| {
                    for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(v);
                        *d += gg * s * (S::one() + v * (S::one() - s));
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[gamma.0].value.len();
                let gam = nodes[gamma.0].value.data();
                let dn = S::from_usize(d).unwrap();
                with_grad!(*gamma, |dg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                with_grad!(*beta, |db| {
                    for grow in g.chunks(d) {
                        db.iter_mut().zip(grow).for_each(|(b, &v)| *b += v);
                    }
                });
                with_grad!(*x, |dx| {
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = S::zero();
                        let mut mean_dh_h = S::zero();
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= dn;
                        mean_dh_h /= dn;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            out[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let d = node.value.cols();
                let y = node.value.data();
                with_grad!(*x, |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let d = node.value.cols();
                let y = node.value.data();
                with_grad!(*x, |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let total: S = grow.iter().copied().sum();
                        for j in 0..d {
                            drow[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                });
            }
            Op::Mask(x, mask) => {
                with_grad!(*x, |dx| {
                    for ((d, &gg), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gg * m;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.cols();
                with_grad!(*table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, &v)| *a += v);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    with_grad!(p, |dp| {
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + w])
                                .for_each(|(a, &v)| *a += v);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    with_grad!(p, |dp| {
                        dp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, &v)| *a += v);
                    });
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = nodes[x.0].value.cols();
                let w = node.value.cols();
                with_grad!(*x, |dx| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        dx[r * cols + start..r * cols + start + w]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(a, &v)| *a += v);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let cols = nodes[x.0].value.cols();
                with_grad!(*x, |dx| {
                    dx[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, &v)| *a += v);
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                });
            }
            Op::Pick { x, index } => {
                with_grad!(*x, |dx| {
                    dx[*index] += g[0];
                });
            }
            Op::LogAddExp(a, b) => {
                let y = node.value.item();
                let av = nodes[a.0].value.item();
                let bv = nodes[b.0].value.item();
                with_grad!(*a, |da| {
                    da[0] += g[0] * (av - y).exp();
                });
                with_grad!(*b, |db| {
                    db[0] += g[0] * (bv - y).exp();
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |dx| {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                });
            }
            Op::AddScalars(xs) => {
                for &x in xs {
                    with_grad!(x, |dx| {
                        dx[0] += g[0];
                    });
                }
            }
        }
        Ok(())
    }
}
