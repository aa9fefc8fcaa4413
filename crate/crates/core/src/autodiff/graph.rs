use std::collections::BTreeMap;

use super::tensor::{log_sum_exp, softmax_slice, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, ordered by name.
pub type ParamMap<T> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Square(NodeId),
    RowSoftmax(NodeId),
    MeanRows(NodeId),
    SumRows(NodeId),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    Distance(NodeId, NodeId),
    CrossEntropy(NodeId, Vec<usize>),
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Append-only tape of tensor operations. Inputs always precede outputs,
/// so a reverse sweep over node ids is a valid backward order.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    by_name: ParamMap<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn into_map(self) -> ParamMap<T> {
        self.by_name
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient report.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// A named leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.params.push((name.to_string(), id));
        id
    }

    /// Registers every entry of `params` and returns the node ids by name.
    pub fn params_from(&mut self, params: &ParamMap<T>) -> BTreeMap<String, NodeId> {
        params
            .iter()
            .map(|(name, t)| (name.clone(), self.param(name, t.clone())))
            .collect()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same("subtract", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same("multiply", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).rank() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("{:?}", self.value(a).shape()),
            ));
        }
        let v = self.value(a).transpose();
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape).map_err(|_| {
            Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.value(a).shape()),
            )
        })?;
        Ok(self.push(Op::Reshape(a), v))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(T::tanh);
        self.push(Op::Tanh(a), v)
    }

    /// `max(0, x)`.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(Op::Relu(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    /// Softmax along each row; a vector is a single row.
    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.rank() == 0 || x.cols() == 0 {
            return Err(Error::shape("row_softmax", format!("{:?}", x.shape())));
        }
        let mut out = x.clone();
        for i in 0..x.rows() {
            let s = softmax_slice(x.row(i));
            out.row_mut(i).copy_from_slice(&s);
        }
        Ok(self.push(Op::RowSoftmax(a), out))
    }

    /// Mean over rows: `[n x d] -> [d]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let (n, d) = x.dims2();
        if x.rank() != 2 || n == 0 {
            return Err(Error::shape("mean_rows", format!("{:?}", x.shape())));
        }
        let inv = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); d];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(x.row(i)) {
                *o = *o + v;
            }
        }
        for o in &mut out {
            *o = *o * inv;
        }
        Ok(self.push(Op::MeanRows(a), Tensor::vector(out)))
    }

    /// Sum within each row: `[n x d] -> [n]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("sum_rows", format!("{:?}", x.shape())));
        }
        let out = (0..x.rows())
            .map(|i| x.row(i).iter().fold(T::zero(), |s, &v| s + v))
            .collect();
        Ok(self.push(Op::SumRows(a), Tensor::vector(out)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 1 || x.shape() != y.shape() {
            return Err(Error::shape(
                "dot",
                format!("{:?} . {:?}", x.shape(), y.shape()),
            ));
        }
        let v = x
            .data()
            .iter()
            .zip(y.data())
            .fold(T::zero(), |s, (&p, &q)| s + p * q);
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(v)))
    }

    /// Euclidean distance between corresponding rows. Vectors give a scalar,
    /// matrices `[n x d]` give `[n]`.
    pub fn distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() || x.rank() == 0 {
            return Err(Error::shape(
                "euclidean_distance",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let out: Vec<T> = (0..x.rows())
            .map(|i| {
                x.row(i)
                    .iter()
                    .zip(y.row(i))
                    .fold(T::zero(), |s, (&p, &q)| s + (p - q) * (p - q))
                    .sqrt()
            })
            .collect();
        let v = if x.rank() == 1 {
            Tensor::scalar(out[0])
        } else {
            Tensor::vector(out)
        };
        Ok(self.push(Op::Distance(a, b), v))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let x = self.value(logits);
        let (n, c) = x.dims2();
        if x.rank() == 0 || n != targets.len() || n == 0 || targets.iter().any(|&t| t >= c) {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} targets", x.shape(), targets.len()),
            ));
        }
        let total = targets.iter().enumerate().fold(T::zero(), |s, (i, &t)| {
            s + log_sum_exp(x.row(i)) - x.row(i)[t]
        });
        let v = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(Op::CrossEntropy(logits, targets.to_vec()), v))
    }

    /// Selects rows by index (repeats allowed): `[m x d] -> [len(idx) x d]`.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let x = self.value(a);
        let (m, d) = x.dims2();
        if x.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", x.shape())));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let v = Tensor::matrix(idx.len(), d, data)?;
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), v))
    }

    /// Stacks matrices (and vectors, read as one row) vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let d = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            if x.rank() == 0 || x.cols() != d {
                return Err(Error::shape(
                    "concat_rows",
                    format!("width {d} vs {:?}", x.shape()),
                ));
            }
            rows += x.rows();
            data.extend_from_slice(x.data());
        }
        let v = Tensor::matrix(rows, d, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    /// Reverse sweep from a scalar `loss`. Parameters off every path to the
    /// loss get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let by_name = self
            .params
            .iter()
            .map(|(name, id)| {
                let g = grads
                    .get(id.0)
                    .and_then(Option::as_ref)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { by_name })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |id: NodeId, contrib: Tensor<T>| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av));
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * *c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = g
                    .matmul(&bv.transpose())
                    .expect("shapes checked in forward");
                let gb = av.transpose().matmul(g).expect("shapes checked in forward");
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, g.reshape(&shape).expect("same element count"));
            }
            Op::Tanh(a) => acc(*a, g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv))),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(
                    self.value(*a),
                    |gv, xv| if xv > T::zero() { gv } else { T::zero() },
                ),
            ),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |gv, xv| gv * (xv + xv))),
            Op::RowSoftmax(a) => {
                let mut out = y.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    for (o, (&p, &q)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - inner);
                    }
                }
                acc(*a, out);
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let inv = T::one() / T::of(x.rows() as f64);
                let mut out = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    for (o, &gv) in out.row_mut(r).iter_mut().zip(g.data()) {
                        *o = gv * inv;
                    }
                }
                acc(*a, out);
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                let mut out = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let gv = g.data()[r];
                    out.row_mut(r).iter_mut().for_each(|o| *o = gv);
                }
                acc(*a, out);
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.value(*a).shape(), g.item())),
            Op::Dot(a, b) => {
                let gv = g.item();
                acc(*a, self.value(*b).map(|v| v * gv));
                acc(*b, self.value(*a).map(|v| v * gv));
            }
            Op::Distance(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let dist = y.data()[r];
                    // Subgradient zero where the rows coincide.
                    if dist == T::zero() {
                        continue;
                    }
                    let scale = g.data()[r] / dist;
                    for (o, (&p, &q)) in ga.row_mut(r).iter_mut().zip(x.row(r).iter().zip(z.row(r)))
                    {
                        *o = (p - q) * scale;
                    }
                }
                acc(*b, ga.map(|v| -v));
                acc(*a, ga);
            }
            Op::CrossEntropy(logits, targets) => {
                let x = self.value(*logits);
                let n = T::of(targets.len() as f64);
                let scale = g.item() / n;
                let mut out = x.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let p = softmax_slice(x.row(r));
                    let row = out.row_mut(r);
                    for (o, pv) in row.iter_mut().zip(p) {
                        *o = pv * scale;
                    }
                    row[t] = row[t] - scale;
                }
                acc(*logits, out);
            }
            Op::GatherRows(a, idx) => {
                let mut out = Tensor::zeros(self.value(*a).shape());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &gv) in out.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o = *o + gv;
                    }
                }
                acc(*a, out);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = self.value(p).len();
                    let slice = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    acc(p, Tensor::new(shape, slice).expect("matching length"));
                }
            }
        }
    }
}
