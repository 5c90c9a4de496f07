//! Reverse-mode differentiation on an explicit tape.
//!
//! Values are computed eagerly as nodes are pushed; `gradient` walks the
//! graph backwards and *emits the adjoint computation as new tape nodes*.
//! Because every backward rule is expressed in terms of the same primitive
//! operations, a gradient node is itself differentiable, which is what the
//! analytic update-noise and sampled-regularizer gradients need (they
//! differentiate expressions that already contain loss Jacobians).
//!
//! Shape errors are programmer errors and panic; numeric failures (NaN in a
//! backward pass, non-scalar gradient targets) are reported as [`Error`].

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to one node of a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    Mul(NodeId, NodeId),
    Recip(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// 0/1 indicator of positivity; treated as locally constant (its own
    /// derivative is zero almost everywhere).
    ReluMask(NodeId),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    /// `(matrix, vector) -> matrix · vector`
    MatVec(NodeId, NodeId),
    /// `(vector, matrix) -> matrixᵀ · vector`
    VecMat(NodeId, NodeId),
    /// `(u, v) -> u vᵀ`
    Outer(NodeId, NodeId),
    /// Pick coordinate `k` of a vector as a scalar.
    Index(NodeId, usize),
    /// Scalar `s` placed at coordinate `k` of an otherwise-zero `n`-vector.
    OneHot(NodeId, usize, usize),
    /// Scalar broadcast to the given shape.
    Broadcast(NodeId, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Acyclic computation graph over tensors.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf node (input, parameter, or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).scale(-1.0);
        self.push(v, Op::Neg(a))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).mul(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn relu_mask(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(v, Op::ReluMask(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).dot(self.value(b)));
        self.push(v, Op::Dot(a, b))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let v = self.value(w).matvec(self.value(x));
        self.push(v, Op::MatVec(w, x))
    }

    pub fn vecmat(&mut self, v: NodeId, w: NodeId) -> NodeId {
        let out = self.value(w).vecmat(self.value(v));
        self.push(out, Op::VecMat(v, w))
    }

    pub fn outer(&mut self, u: NodeId, v: NodeId) -> NodeId {
        let out = Tensor::outer(self.value(u), self.value(v));
        self.push(out, Op::Outer(u, v))
    }

    pub fn index(&mut self, a: NodeId, k: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 1, "index expects a vector");
        let v = Tensor::scalar(t.data()[k]);
        self.push(v, Op::Index(a, k))
    }

    pub fn one_hot(&mut self, s: NodeId, k: usize, n: usize) -> NodeId {
        assert!(self.value(s).is_scalar());
        let mut data = vec![0.0; n];
        data[k] = self.value(s).item();
        self.push(Tensor::vector(data), Op::OneHot(s, k, n))
    }

    pub fn broadcast(&mut self, s: NodeId, shape: &[usize]) -> NodeId {
        assert!(self.value(s).is_scalar());
        let v = Tensor::full(shape.to_vec(), self.value(s).item());
        self.push(v, Op::Broadcast(s, shape.to_vec()))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = self.leaf(Tensor::full(self.value(a).shape().to_vec(), c));
        self.mul(a, k)
    }

    /// Numerically stable log-sum-exp of a vector node. The max shift is a
    /// detached constant, which leaves all derivatives exact.
    pub fn log_sum_exp(&mut self, z: NodeId) -> NodeId {
        let m = self
            .value(z)
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let shift = self.leaf(Tensor::full(self.value(z).shape().to_vec(), m));
        let zs = self.sub(z, shift);
        let e = self.exp(zs);
        let s = self.sum(e);
        let l = self.ln(s);
        let mc = self.scalar(m);
        self.add(l, mc)
    }

    fn accumulate(&mut self, adj: &mut [Option<NodeId>], target: NodeId, contrib: NodeId) {
        adj[target.0] = Some(match adj[target.0] {
            Some(prev) => self.add(prev, contrib),
            None => contrib,
        });
    }

    /// Reverse-mode gradient of a scalar `output` with respect to `wrt`.
    ///
    /// Always returns differentiable nodes; pass the returned ids back in to
    /// differentiate a second time. Nodes that do not participate in the
    /// output's graph get zero gradients of their own shape.
    pub fn gradient(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if !self.value(output).is_scalar() {
            return Err(Error::NonScalarOutput(self.value(output).shape().to_vec()));
        }
        let mut adj: Vec<Option<NodeId>> = vec![None; output.0 + 1];
        let seed = self.scalar(1.0);
        adj[output.0] = Some(seed);

        for id in (0..=output.0).rev() {
            let Some(g) = adj[id] else { continue };
            if !self.value(g).all_finite() {
                return Err(Error::NonFinite(format!("backward adjoint of node {id}")));
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf | Op::ReluMask(_) => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    self.accumulate(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    let ng = self.neg(g);
                    self.accumulate(&mut adj, b, ng);
                }
                Op::Neg(a) => {
                    let ng = self.neg(g);
                    self.accumulate(&mut adj, a, ng);
                }
                Op::Mul(a, b) => {
                    let da = self.mul(g, b);
                    self.accumulate(&mut adj, a, da);
                    let db = self.mul(g, a);
                    self.accumulate(&mut adj, b, db);
                }
                Op::Recip(a) => {
                    // d(1/a) = -g / a²  = -g · out · out
                    let out = NodeId(id);
                    let o2 = self.mul(out, out);
                    let t = self.mul(g, o2);
                    let da = self.neg(t);
                    self.accumulate(&mut adj, a, da);
                }
                Op::Exp(a) => {
                    let out = NodeId(id);
                    let da = self.mul(g, out);
                    self.accumulate(&mut adj, a, da);
                }
                Op::Ln(a) => {
                    let r = self.recip(a);
                    let da = self.mul(g, r);
                    self.accumulate(&mut adj, a, da);
                }
                Op::Tanh(a) => {
                    let out = NodeId(id);
                    let o2 = self.mul(out, out);
                    let ones = self.leaf(Tensor::full(self.value(a).shape().to_vec(), 1.0));
                    let sech2 = self.sub(ones, o2);
                    let da = self.mul(g, sech2);
                    self.accumulate(&mut adj, a, da);
                }
                Op::Relu(a) => {
                    let m = self.relu_mask(a);
                    let da = self.mul(g, m);
                    self.accumulate(&mut adj, a, da);
                }
                Op::Sum(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let da = self.broadcast(g, &shape);
                    self.accumulate(&mut adj, a, da);
                }
                Op::Dot(a, b) => {
                    let shape = self.value(a).shape().to_vec();
                    let gb = self.broadcast(g, &shape);
                    let da = self.mul(gb, b);
                    self.accumulate(&mut adj, a, da);
                    let db = self.mul(gb, a);
                    self.accumulate(&mut adj, b, db);
                }
                Op::MatVec(w, x) => {
                    let dw = self.outer(g, x);
                    self.accumulate(&mut adj, w, dw);
                    let dx = self.vecmat(g, w);
                    self.accumulate(&mut adj, x, dx);
                }
                Op::VecMat(v, w) => {
                    // out = wᵀ v; d_v = w · g, d_w = v gᵀ
                    let dv = self.matvec(w, g);
                    self.accumulate(&mut adj, v, dv);
                    let dw = self.outer(v, g);
                    self.accumulate(&mut adj, w, dw);
                }
                Op::Outer(u, v) => {
                    let du = self.matvec(g, v);
                    self.accumulate(&mut adj, u, du);
                    let dv = self.vecmat(u, g);
                    self.accumulate(&mut adj, v, dv);
                }
                Op::Index(a, k) => {
                    let n = self.value(a).len();
                    let da = self.one_hot(g, k, n);
                    self.accumulate(&mut adj, a, da);
                }
                Op::OneHot(s, k, _) => {
                    let ds = self.index(g, k);
                    self.accumulate(&mut adj, s, ds);
                }
                Op::Broadcast(s, _) => {
                    let ds = self.sum(g);
                    self.accumulate(&mut adj, s, ds);
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let id = match adj.get(w.0).copied().flatten() {
                Some(id) => id,
                None => self.leaf(Tensor::zeros(self.value(w).shape().to_vec())),
            };
            if !self.value(id).all_finite() {
                return Err(Error::NonFinite("gradient result".to_string()));
            }
            out.push(id);
        }
        Ok(out)
    }
}
