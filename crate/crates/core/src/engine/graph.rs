//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are only
//! ever appended, so the tape order is already a topological order and
//! [`Graph::backward`] walks it once in reverse. Parameters are borrowed from
//! a [`ParamStore`] rather than copied onto the tape.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{check2, gemm_nn, gemm_nt, gemm_tn, row_softmax, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var, usize),
    Scale(Var, f64),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    RowSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Conv1dSame { x: Var, kernel: Var },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<Option<usize>>),
    GatherElems(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    SumRows(Var),
    SumRowGroups(Var, usize),
    SoftmaxXent(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::ScaleBy(..) => "scale_by",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::RowSoftmax(..) => "row_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1dSame { .. } => "conv1d_same",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::GatherElems(..) => "gather_elems",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::SumRows(..) => "sum_rows",
            Op::SumRowGroups(..) => "sum_row_groups",
            Op::SoftmaxXent(..) => "softmax_cross_entropy",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { store: None, nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Graph { store: Some(store), nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            op => self.inputs(op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow(a, b) | Op::MulCol(a, b) | Op::ScaleBy(a, b, _) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::RowSoftmax(a)
            | Op::GatherRows(a, _)
            | Op::GatherElems(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::SumRows(a)
            | Op::SumRowGroups(a, _)
            | Op::SoftmaxXent(a, _) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv1dSame { x, kernel } => vec![*x, *kernel],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }

    /// A differentiable leaf owning its value.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(Cow::Owned(value), Op::Leaf)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Cow::Owned(value), Op::Leaf)
    }

    /// A non-differentiable input borrowed for the graph's lifetime.
    pub fn input(&mut self, value: &'a Tensor) -> Result<Var> {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let store = self.store.ok_or_else(|| Error::Contract("graph has no parameter store".into()))?;
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf)?;
        let node = &mut self.nodes[v.0];
        node.requires_grad = true;
        node.param = Some(id);
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check2("matmul", self.value(a))?;
        let (k2, n) = check2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Cow::Owned(Tensor::new(vec![m, n], out)?), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        check2("transpose", self.value(a))?;
        let t = self.value(a).transpose();
        self.push(Cow::Owned(t), Op::Transpose(a))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Cow::Owned(t), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Cow::Owned(t), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Cow::Owned(t), Op::Mul(a, b))
    }

    /// Sum of several same-shaped tensors, left to right.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or_else(|| Error::Contract("add_n of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// `a[m×n] + b` with `b` of n values broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = check2("add_row", self.value(a))?;
        if self.value(b).numel() != n {
            return Err(Error::dim("add_row", format!("row of {n} vs {:?}", self.shape(b))));
        }
        let mut t = self.value(a).clone();
        let bd = self.value(b).data();
        for i in 0..m {
            for (x, y) in t.data_mut()[i * n..(i + 1) * n].iter_mut().zip(bd) {
                *x += y;
            }
        }
        self.push(Cow::Owned(t), Op::AddRow(a, b))
    }

    /// `a[m×n]` with row i scaled by `w[i]`.
    pub fn mul_col(&mut self, a: Var, w: Var) -> Result<Var> {
        let (m, n) = check2("mul_col", self.value(a))?;
        if self.value(w).numel() != m {
            return Err(Error::dim("mul_col", format!("{m} rows vs {:?}", self.shape(w))));
        }
        let mut t = self.value(a).clone();
        let wd = self.value(w).data();
        for i in 0..m {
            for x in &mut t.data_mut()[i * n..(i + 1) * n] {
                *x *= wd[i];
            }
        }
        self.push(Cow::Owned(t), Op::MulCol(a, w))
    }

    /// `a` scaled by the single element `s[index]`.
    pub fn scale_by(&mut self, a: Var, s: Var, index: usize) -> Result<Var> {
        let k = *self.value(s).data().get(index).ok_or_else(|| Error::dim("scale_by", format!("index {index} out of range")))?;
        let t = self.value(a).map(|x| x * k);
        self.push(Cow::Owned(t), Op::ScaleBy(a, s, index))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        self.push(Cow::Owned(t), Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        self.push(Cow::Owned(t), Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Cow::Owned(t), Op::LeakyRelu(a, slope))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.row_softmax_masked(a, None)
    }

    /// Row softmax where `mask[i*n+j] == false` removes entry (i, j);
    /// fully masked rows come out as zeros.
    pub fn row_softmax_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = check2("row_softmax", self.value(a))?;
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::dim("row_softmax", "mask size"));
            }
        }
        let out = row_softmax(self.value(a).data(), m, n, mask);
        self.push(Cow::Owned(Tensor::new(vec![m, n], out)?), Op::RowSoftmax(a))
    }

    /// Normalizes each length-C row to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::dim("layer_norm", format!("feature size {c} vs gain/bias")));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            let (mean, inv) = moments(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * (*v - mean) * inv + b[j];
            }
        }
        self.push(Cow::Owned(out), Op::LayerNorm { x, gain, bias, eps })
    }

    /// Zero-padded "same" 1-D convolution.
    ///
    /// `x` is `[T×C_in]` or a batch `[B×T×C_in]`, `kernel` is `[k×C_out×C_in]`
    /// with odd `k`; tap `r` reads input position `t + r − (k−1)/2`.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (b, t, cin) = conv_dims(self.shape(x))?;
        let (k, cout, kin) = match self.shape(kernel) {
            [k, o, i] => (*k, *o, *i),
            s => return Err(Error::dim("conv1d_same", format!("kernel shape {s:?}"))),
        };
        if k % 2 == 0 {
            return Err(Error::config(format!("conv1d_same needs an odd kernel size, got {k}")));
        }
        if kin != cin {
            return Err(Error::dim("conv1d_same", format!("kernel C_in {kin} vs input {cin}")));
        }
        let (xd, kd) = (self.value(x).data(), self.value(kernel).data());
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; b * t * cout];
        for bi in 0..b {
            for ti in 0..t {
                let orow = &mut out[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                for r in 0..k {
                    let src = ti + r;
                    if src < pad || src - pad >= t {
                        continue;
                    }
                    let xrow = &xd[(bi * t + src - pad) * cin..(bi * t + src - pad + 1) * cin];
                    gemm_nt(xrow, &kd[r * cout * cin..(r + 1) * cout * cin], orow, 1, cin, cout);
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("rank >= 2") = cout;
        self.push(Cow::Owned(Tensor::new(shape, out)?), Op::Conv1dSame { x, kernel })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of nothing".into()));
        }
        for &p in parts {
            check2("concat_cols", self.value(p))?;
        }
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_cols(&refs)?;
        self.push(Cow::Owned(t), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of nothing".into()));
        }
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, c) = check2("concat_rows", self.value(p))?;
            if c != n {
                return Err(Error::dim("concat_rows", format!("{c} vs {n} columns")));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, n], data)?;
        self.push(Cow::Owned(t), Op::ConcatRows(parts.to_vec()))
    }

    /// Rows of `a` selected by index; `None` produces a zero row.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (m, n) = check2("gather_rows", self.value(a))?;
        let mut data = Vec::with_capacity(index.len() * n);
        for ix in &index {
            match ix {
                Some(i) if *i < m => data.extend_from_slice(self.value(a).row(*i)),
                Some(i) => return Err(Error::dim("gather_rows", format!("row {i} of {m}"))),
                None => data.extend(std::iter::repeat_n(0.0, n)),
            }
        }
        let t = Tensor::new(vec![index.len(), n], data)?;
        self.push(Cow::Owned(t), Op::GatherRows(a, index))
    }

    /// Elements of `a` at flat positions, laid out in `shape`.
    pub fn gather_elems(&mut self, a: Var, flat: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = flat.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim("gather_elems", format!("index {bad} of {}", src.len())));
        }
        let data = flat.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        self.push(Cow::Owned(t), Op::GatherElems(a, flat))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        self.push(Cow::Owned(t), Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(Cow::Owned(t), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column means of a matrix, as `[1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let mut t = column_sums(self.value(a))?;
        t.scale_assign(1.0 / self.value(a).rows() as f64);
        self.push(Cow::Owned(t), Op::MeanRows(a))
    }

    /// Column sums of a matrix, as `[1×n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = column_sums(self.value(a))?;
        self.push(Cow::Owned(t), Op::SumRows(a))
    }

    /// Sums of consecutive blocks of `group` rows: `[m·group × n]` to `[m × n]`.
    pub fn sum_row_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let v = self.value(a);
        let (rows, cols) = (v.rows(), v.cols());
        if v.shape().len() != 2 || group == 0 || rows % group != 0 {
            return Err(Error::dim("sum_row_groups", format!("{:?} in groups of {group}", v.shape())));
        }
        let mut out = vec![0.0; rows / group * cols];
        for (r, row) in v.data().chunks(cols).enumerate() {
            let o = &mut out[r / group * cols..(r / group + 1) * cols];
            o.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        let t = Tensor::new(vec![rows / group, cols], out)?;
        self.push(Cow::Owned(t), Op::SumRowGroups(a, group))
    }

    /// Inner product of two same-shaped tensors.
    pub fn inner(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Negative log-softmax probability of `label` under `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::dim("softmax_cross_entropy", format!("label {label} of {}", z.len())));
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let t = Tensor::scalar(lse - z[label]);
        self.push(Cow::Owned(t), Op::SoftmaxXent(logits, label))
    }

    /// Inverted dropout: with an RNG, zeroes entries with probability `rate`
    /// and rescales survivors by `1/(1−rate)`; without one, the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(a) };
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask =
            Tensor::new(self.shape(a).to_vec(), (0..self.value(a).numel()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect())?;
        let m = self.constant(mask)?;
        self.mul(a, m)
    }

    /// Reverse sweep from a scalar `loss`.
    /// Hash of every discrete choice on the tape: gather indices (top-k and
    /// nearest-node selections) and the sign pattern at each leaky ReLU. Two
    /// evaluations with equal fingerprints lie on the same smooth piece.
    pub fn selection_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::GatherRows(_, index) => index.hash(&mut h),
                Op::GatherElems(_, flat) => flat.hash(&mut h),
                Op::LeakyRelu(x, _) => {
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "grad shape for {}", self.nodes[v.0].op.name());
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    self.acc(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), &mut db, k, m, n);
                    self.acc(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*b) {
                    let s = column_sums(g)?;
                    self.acc(grads, *b, s.reshape(self.shape(*b))?);
                }
            }
            Op::MulCol(a, w) => {
                let n = g.cols();
                let wd = self.value(*w).data();
                if self.wants(*a) {
                    let mut da = g.clone();
                    for (r, row) in da.data_mut().chunks_mut(n).enumerate() {
                        row.iter_mut().for_each(|x| *x *= wd[r]);
                    }
                    self.acc(grads, *a, da);
                }
                if self.wants(*w) {
                    let av = self.value(*a);
                    let dw: Vec<f64> =
                        g.data().chunks(n).zip(av.data().chunks(n)).map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum()).collect();
                    self.acc(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?);
                }
            }
            Op::ScaleBy(a, s, idx) => {
                let k = self.value(*s).data()[*idx];
                self.acc(grads, *a, g.map(|x| x * k));
                if self.wants(*s) {
                    let mut ds = Tensor::zeros(self.shape(*s));
                    ds.data_mut()[*idx] = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    self.acc(grads, *s, ds);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * s)),
            Op::Sigmoid(a) => self.acc(grads, *a, g.zip_map(out, |gi, y| gi * y * (1.0 - y))),
            Op::LeakyRelu(a, slope) => {
                let dx = g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { gi * slope });
                self.acc(grads, *a, dx);
            }
            Op::RowSoftmax(a) => {
                let n = out.cols();
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(gi, yi)| gi * yi).sum();
                    for (d, y) in dr.iter_mut().zip(yr) {
                        *d = y * (*d - dot);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let gd = self.value(*gain).data();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for ((xr, gr), dr) in xv.data().chunks(c).zip(g.data().chunks(c)).zip(dx.data_mut().chunks_mut(c)) {
                    let (mean, inv) = moments(xr, *eps);
                    for j in 0..c {
                        xhat[j] = (xr[j] - mean) * inv;
                        dxhat[j] = gr[j] * gd[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let cf = c as f64;
                    for j in 0..c {
                        dr[j] = inv / cf * (cf * dxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                self.acc(grads, *x, dx);
                let gshape = self.shape(*gain).to_vec();
                self.acc(grads, *gain, Tensor::new(gshape, dgain)?);
                let bshape = self.shape(*bias).to_vec();
                self.acc(grads, *bias, Tensor::new(bshape, dbias)?);
            }
            Op::Conv1dSame { x, kernel } => {
                let (b, t, cin) = conv_dims(self.shape(*x))?;
                let kshape = self.shape(*kernel).to_vec();
                let (k, cout) = (kshape[0], kshape[1]);
                let pad = (k - 1) / 2;
                let (xd, kd, gd) = (self.value(*x).data(), self.value(*kernel).data(), g.data());
                let mut dx = vec![0.0; xd.len()];
                let mut dk = vec![0.0; kd.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        let grow = &gd[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                        for r in 0..k {
                            let src = ti + r;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let xo = (bi * t + src - pad) * cin;
                            let kr = &kd[r * cout * cin..(r + 1) * cout * cin];
                            gemm_nn(grow, kr, &mut dx[xo..xo + cin], 1, cout, cin);
                            let dkr = &mut dk[r * cout * cin..(r + 1) * cout * cin];
                            gemm_tn(grow, &xd[xo..xo + cin], dkr, cout, 1, cin);
                        }
                    }
                }
                let xshape = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::new(xshape, dx)?);
                self.acc(grads, *kernel, Tensor::new(kshape, dk)?);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                let n = g.cols();
                for &p in parts {
                    let (m, c) = (self.value(p).rows(), self.value(p).cols());
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(m * c);
                        for r in 0..m {
                            d.extend_from_slice(&g.data()[r * n + offset..r * n + offset + c]);
                        }
                        self.acc(grads, p, Tensor::new(vec![m, c], d)?);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        self.acc(grads, p, Tensor::new(self.shape(p).to_vec(), d)?);
                    }
                    offset += len;
                }
            }
            Op::GatherRows(a, index) => {
                let n = g.cols();
                let mut da = Tensor::zeros(self.shape(*a));
                for (r, ix) in index.iter().enumerate() {
                    if let Some(src) = ix {
                        let dst = &mut da.data_mut()[src * n..(src + 1) * n];
                        for (d, x) in dst.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *d += x;
                        }
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::GatherElems(a, flat) => {
                let mut da = Tensor::zeros(self.shape(*a));
                for (&src, &x) in flat.iter().zip(g.data()) {
                    da.data_mut()[src] += x;
                }
                self.acc(grads, *a, da);
            }
            Op::Reshape(a) => self.acc(grads, *a, g.reshape(self.shape(*a))?),
            Op::Sum(a) => {
                let s = g.data()[0];
                self.acc(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::MeanRows(a) | Op::SumRows(a) => {
                let m = self.value(*a).rows();
                let scale = match &self.nodes[i].op {
                    Op::MeanRows(_) => 1.0 / m as f64,
                    _ => 1.0,
                };
                let row: Vec<f64> = g.data().iter().map(|x| x * scale).collect();
                let data = (0..m).flat_map(|_| row.iter().copied()).collect();
                self.acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), data)?);
            }
            Op::SumRowGroups(a, group) => {
                let cols = g.cols();
                let data = g.data().chunks(cols).flat_map(|row| (0..*group).flat_map(move |_| row.iter().copied())).collect();
                self.acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), data)?);
            }
            Op::SoftmaxXent(logits, label) => {
                let z = self.value(*logits).data();
                let n = z.len();
                let mut p = row_softmax(z, 1, n, None);
                p[*label] -= 1.0;
                let s = g.data()[0];
                p.iter_mut().for_each(|v| *v *= s);
                self.acc(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), p)?);
            }
        }
        Ok(())
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradient of every parameter leaf on `graph` into `out`.
    pub fn accumulate_params(&self, graph: &Graph<'_>, out: &mut Grads) {
        for (&id, &v) in &graph.params {
            if let Some(g) = self.wrt(v) {
                out.accumulate(id, g);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

fn conv_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [t, c] => Ok((1, *t, *c)),
        [b, t, c] => Ok((*b, *t, *c)),
        s => Err(Error::dim("conv1d_same", format!("input shape {s:?}"))),
    }
}

fn column_sums(a: &Tensor) -> Result<Tensor> {
    let (m, n) = check2("column_sums", a)?;
    let mut out = vec![0.0; n];
    for r in 0..m {
        for (o, x) in out.iter_mut().zip(a.row(r)) {
            *o += x;
        }
    }
    Tensor::new(vec![1, n], out)
}
