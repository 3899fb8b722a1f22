//! Arena tape for reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward is a single reverse sweep.

use std::collections::BTreeMap;

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a learnable leaf; gradients are reported under this key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// The closed set of primitives.
#[derive(Clone, Debug, PartialEq)]
pub enum Op<T> {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Transpose(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SumAll(NodeId),
    SumRows(NodeId),
    Mean(NodeId),
    Log(NodeId),
    PowConst(NodeId, T),
    AddRowBroadcast(NodeId, NodeId),
    LeakyRelu(NodeId, T),
    Sigmoid(NodeId),
    RowSoftmax(NodeId),
    CosineRowPairs(NodeId),
    SelfImportance(NodeId),
    PairwiseSum(NodeId),
    ClampMin(NodeId, T),
    Grl(NodeId, T),
    Detach(NodeId),
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Transpose(..) => "transpose",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SumAll(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::Mean(..) => "mean",
            Op::Log(..) => "log",
            Op::PowConst(..) => "pow_const",
            Op::AddRowBroadcast(..) => "add_row_broadcast",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::RowSoftmax(..) => "row_softmax",
            Op::CosineRowPairs(..) => "cosine_row_pairs",
            Op::SelfImportance(..) => "self_importance",
            Op::PairwiseSum(..) => "pairwise_sum",
            Op::ClampMin(..) => "clamp_min",
            Op::Grl(..) => "grl",
            Op::Detach(..) => "detach",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::ConcatCols(a, b)
            | Op::AddRowBroadcast(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::SliceRows(a, ..)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::Mean(a)
            | Op::Log(a)
            | Op::PowConst(a, _)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::RowSoftmax(a)
            | Op::CosineRowPairs(a)
            | Op::SelfImportance(a)
            | Op::PairwiseSum(a)
            | Op::ClampMin(a, _)
            | Op::Grl(a, _)
            | Op::Detach(a) => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExprNode<T> {
    pub op: Op<T>,
    pub value: DenseMatrix<T>,
    pub param: Option<ParamId>,
}

/// Norm below which a row is treated as zero by [`Tape::cosine_row_pairs`].
pub const COSINE_EPS_NORM: f64 = 1e-12;

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<ExprNode<T>>,
    grads: Vec<Option<DenseMatrix<T>>>,
    params: BTreeMap<ParamId, NodeId>,
    backward_done: bool,
}

/// Parameter gradients from one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    map: BTreeMap<ParamId, DenseMatrix<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&DenseMatrix<T>> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &DenseMatrix<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<ParamId, DenseMatrix<T>> {
        self.map
    }
}

fn row_argmax<T: Scalar>(row: &[T]) -> (usize, T) {
    let mut best = (0, row[0]);
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Unit-normalized rows and their norms; zero rows stay zero.
fn unit_rows<T: Scalar>(f: &DenseMatrix<T>) -> (DenseMatrix<T>, Vec<T>) {
    let eps = T::lit(COSINE_EPS_NORM);
    let mut norms = Vec::with_capacity(f.rows());
    let mut u = DenseMatrix::zeros(f.rows(), f.cols());
    for i in 0..f.rows() {
        let norm = f.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
        norms.push(norm);
        if norm >= eps {
            for j in 0..f.cols() {
                u.set(i, j, f.get(i, j) / norm);
            }
        }
    }
    (u, norms)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &ExprNode<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar_value(&self, id: NodeId) -> T {
        self.value(id).get(0, 0)
    }

    /// Accumulated gradient of the last backward root w.r.t. `id`.
    pub fn grad(&self, id: NodeId) -> Option<&DenseMatrix<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.params.get(&id).copied()
    }

    fn push(&mut self, op: Op<T>, value: DenseMatrix<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        self.nodes.push(ExprNode {
            op,
            value,
            param: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Leaf that receives no gradient report (inputs, fixed adjacency).
    pub fn constant(&mut self, value: DenseMatrix<T>) -> Result<NodeId> {
        self.push(Op::Leaf, value)
    }

    /// Learnable leaf registered under `id`.
    pub fn param(&mut self, id: ParamId, value: DenseMatrix<T>) -> Result<NodeId> {
        if self.params.contains_key(&id) {
            return Err(Error::Contract(format!("parameter {id:?} registered twice")));
        }
        let node = self.push(Op::Leaf, value)?;
        self.nodes[node.0].param = Some(id);
        self.params.insert(id, node);
        Ok(node)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::Matmul(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        self.push(Op::Hadamard(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), v)
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, c: T, a: NodeId) -> Result<NodeId> {
        let neg = self.scale(a, -T::one())?;
        self.add_scalar(neg, c)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::shape("concat_cols", va.shape(), vb.shape()));
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let v = DenseMatrix::from_fn(va.rows(), ca + cb, |i, j| {
            if j < ca {
                va.get(i, j)
            } else {
                vb.get(i, j - ca)
            }
        });
        self.push(Op::ConcatCols(a, b), v)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start >= end || end > va.rows() {
            return Err(Error::Contract(format!(
                "row slice {start}..{end} out of range for {:?}",
                va.shape()
            )));
        }
        let idx: Vec<usize> = (start..end).collect();
        let v = va.select_rows(&idx);
        self.push(Op::SliceRows(a, start, end), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = DenseMatrix::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    /// Row sums as an r×1 column.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let v = DenseMatrix::from_fn(va.rows(), 1, |i, _| va.row(i).iter().copied().sum());
        self.push(Op::SumRows(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let v = DenseMatrix::scalar(va.sum() / T::lit(va.len() as f64));
        self.push(Op::Mean(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::Contract("log of a non-positive entry".into()));
        }
        let v = va.map(|x| x.ln());
        self.push(Op::Log(a), v)
    }

    /// `a^c` elementwise for nonnegative `a`.
    pub fn pow_const(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let va = self.value(a);
        if va.data().iter().any(|&x| x < T::zero()) {
            return Err(Error::Contract("pow_const of a negative entry".into()));
        }
        let v = va.map(|x| x.powf(c));
        self.push(Op::PowConst(a, c), v)
    }

    /// Adds a 1×c row vector to every row of an r×c matrix.
    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::shape("add_row_broadcast", va.shape(), vr.shape()));
        }
        let v = DenseMatrix::from_fn(va.rows(), va.cols(), |i, j| va.get(i, j) + vr.get(0, j));
        self.push(Op::AddRowBroadcast(a, row), v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> Result<NodeId> {
        if !(slope.is_finite() && slope > T::zero()) {
            return Err(Error::Config(format!(
                "leaky slope must be finite and positive, got {slope}"
            )));
        }
        let v = self
            .value(a)
            .map(|x| if x >= T::zero() { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(stable_sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let mut out = DenseMatrix::zeros(va.rows(), va.cols());
        for i in 0..va.rows() {
            let row = va.row(i);
            let max = row_argmax(row).1;
            let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            for (j, e) in exps.into_iter().enumerate() {
                out.set(i, j, e / total);
            }
        }
        self.push(Op::RowSoftmax(a), out)
    }

    /// Pairwise cosine similarity of rows; rows with norm below
    /// [`COSINE_EPS_NORM`] produce zero rows and columns.
    pub fn cosine_row_pairs(&mut self, a: NodeId) -> Result<NodeId> {
        let (u, _) = unit_rows(self.value(a));
        let v = u.matmul(&u.transpose())?;
        self.push(Op::CosineRowPairs(a), v)
    }

    /// Adds each row's maximum to its diagonal entry.
    pub fn self_importance(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rows() != va.cols() {
            return Err(Error::shape("self_importance", va.shape(), va.shape()));
        }
        let mut v = va.clone();
        for i in 0..va.rows() {
            let (_, max) = row_argmax(va.row(i));
            v.set(i, i, va.get(i, i) + max);
        }
        self.push(Op::SelfImportance(a), v)
    }

    /// From an N×2 matrix `s`, builds `out[i][j] = s[i][0] + s[j][1]`.
    pub fn pairwise_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.cols() != 2 {
            return Err(Error::shape("pairwise_sum", va.shape(), (va.rows(), 2)));
        }
        let n = va.rows();
        let v = DenseMatrix::from_fn(n, n, |i, j| va.get(i, 0) + va.get(j, 1));
        self.push(Op::PairwiseSum(a), v)
    }

    /// `max(a, lo)`; the gradient is zero where `a <= lo`.
    pub fn clamp_min(&mut self, a: NodeId, lo: T) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(lo));
        self.push(Op::ClampMin(a, lo), v)
    }

    /// Gradient reversal: identity forward, `-lambda` times the gradient backward.
    pub fn grl(&mut self, a: NodeId, lambda: T) -> Result<NodeId> {
        if !(lambda.is_finite() && lambda >= T::zero()) {
            return Err(Error::Config(format!(
                "gradient reversal factor must be finite and >= 0, got {lambda}"
            )));
        }
        let v = self.value(a).clone();
        self.push(Op::Grl(a, lambda), v)
    }

    /// Identity forward, no gradient backward.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).clone();
        self.push(Op::Detach(a), v)
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Propagates d(root)/d(node) to every node reachable from `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract("root does not belong to this tape".into()));
        }
        if self.shape(root) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward root must be 1x1, got {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(DenseMatrix::ones(1, 1));

        for idx in (0..=root.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g)?;
            self.grads[idx] = Some(g);
            for (input, delta) in contributions {
                match &mut self.grads[input.0] {
                    Some(acc) => acc.accumulate(&delta),
                    slot @ None => *slot = Some(delta),
                }
            }
        }

        let mut map = BTreeMap::new();
        for (&pid, &node) in &self.params {
            let g = self.grads[node.0]
                .clone()
                .unwrap_or_else(|| DenseMatrix::zeros(self.shape(node).0, self.shape(node).1));
            map.insert(pid, g);
        }
        Ok(Gradients { map })
    }

    fn local_grads(&self, idx: usize, g: &DenseMatrix<T>) -> Result<Vec<(NodeId, DenseMatrix<T>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let zero = T::zero();
        let one = T::one();
        Ok(match node.op {
            Op::Leaf | Op::Detach(_) => vec![],
            Op::Matmul(a, b) => vec![
                (a, g.matmul(&val(b).transpose())?),
                (b, val(a).transpose().matmul(g)?),
            ],
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.scale(-one))],
            Op::Hadamard(a, b) => vec![(a, g.hadamard(val(b))?), (b, g.hadamard(val(a))?)],
            Op::Scale(a, c) => vec![(a, g.scale(c))],
            Op::AddScalar(a, _) => vec![(a, g.clone())],
            Op::Transpose(a) => vec![(a, g.transpose())],
            Op::ConcatCols(a, b) => {
                let ca = val(a).cols();
                let cb = val(b).cols();
                let ga = DenseMatrix::from_fn(g.rows(), ca, |i, j| g.get(i, j));
                let gb = DenseMatrix::from_fn(g.rows(), cb, |i, j| g.get(i, ca + j));
                vec![(a, ga), (b, gb)]
            }
            Op::SliceRows(a, start, end) => {
                let va = val(a);
                let ga = DenseMatrix::from_fn(va.rows(), va.cols(), |i, j| {
                    if (start..end).contains(&i) {
                        g.get(i - start, j)
                    } else {
                        zero
                    }
                });
                vec![(a, ga)]
            }
            Op::SumAll(a) => {
                let (r, c) = val(a).shape();
                vec![(a, DenseMatrix::filled(r, c, g.get(0, 0)))]
            }
            Op::SumRows(a) => {
                let (r, c) = val(a).shape();
                vec![(a, DenseMatrix::from_fn(r, c, |i, _| g.get(i, 0)))]
            }
            Op::Mean(a) => {
                let (r, c) = val(a).shape();
                let share = g.get(0, 0) / T::lit((r * c) as f64);
                vec![(a, DenseMatrix::filled(r, c, share))]
            }
            Op::Log(a) => vec![(a, g.zip_map(val(a), "log", |gi, x| gi / x)?)],
            Op::PowConst(a, c) => {
                let d = val(a).map(|x| {
                    if x > zero {
                        c * x.powf(c - one)
                    } else if c == one {
                        one
                    } else {
                        zero
                    }
                });
                vec![(a, g.hadamard(&d)?)]
            }
            Op::AddRowBroadcast(a, row) => {
                let cols = g.cols();
                let grow = DenseMatrix::from_fn(1, cols, |_, j| {
                    (0..g.rows()).map(|i| g.get(i, j)).sum()
                });
                vec![(a, g.clone()), (row, grow)]
            }
            Op::LeakyRelu(a, slope) => {
                let ga = g.zip_map(val(a), "leaky_relu", |gi, x| {
                    if x >= zero {
                        gi
                    } else {
                        gi * slope
                    }
                })?;
                vec![(a, ga)]
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(out, "sigmoid", |gi, s| gi * s * (one - s))?;
                vec![(a, ga)]
            }
            Op::RowSoftmax(a) => {
                let mut ga = DenseMatrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let dot: T = g.row(i).iter().zip(out.row(i)).map(|(&x, &s)| x * s).sum();
                    for j in 0..g.cols() {
                        ga.set(i, j, out.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                vec![(a, ga)]
            }
            Op::CosineRowPairs(a) => {
                let f = val(a);
                let (u, norms) = unit_rows(f);
                // dL/dU = (G + G^T) U, then project out the radial part per row.
                let sym = g.add(&g.transpose())?;
                let gu = sym.matmul(&u)?;
                let eps = T::lit(COSINE_EPS_NORM);
                let mut ga = DenseMatrix::zeros(f.rows(), f.cols());
                for i in 0..f.rows() {
                    if norms[i] < eps {
                        continue;
                    }
                    let radial: T = gu.row(i).iter().zip(u.row(i)).map(|(&x, &y)| x * y).sum();
                    for j in 0..f.cols() {
                        ga.set(i, j, (gu.get(i, j) - radial * u.get(i, j)) / norms[i]);
                    }
                }
                vec![(a, ga)]
            }
            Op::SelfImportance(a) => {
                let va = val(a);
                let mut ga = g.clone();
                for i in 0..va.rows() {
                    let (k, _) = row_argmax(va.row(i));
                    let cur = ga.get(i, k);
                    ga.set(i, k, cur + g.get(i, i));
                }
                vec![(a, ga)]
            }
            Op::PairwiseSum(a) => {
                let n = g.rows();
                let ga = DenseMatrix::from_fn(n, 2, |i, c| {
                    if c == 0 {
                        g.row(i).iter().copied().sum()
                    } else {
                        (0..n).map(|k| g.get(k, i)).sum()
                    }
                });
                vec![(a, ga)]
            }
            Op::ClampMin(a, lo) => {
                let ga = g.zip_map(val(a), "clamp_min", |gi, x| if x > lo { gi } else { zero })?;
                vec![(a, ga)]
            }
            Op::Grl(a, lambda) => vec![(a, g.scale(-lambda))],
        })
    }
}
