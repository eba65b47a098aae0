use std::sync::Arc;

use rand::Rng;

use super::gemm::gemm;
use super::sparse::SparseRows;
use super::{sigmoid, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-class loss weights `(w₀, w₁)` for binary cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    pub negative: f64,
    pub positive: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights {
        negative: 1.0,
        positive: 1.0,
    };

    pub fn new(negative: f64, positive: f64) -> Self {
        Self { negative, positive }
    }

    pub fn for_label(&self, positive: bool) -> f64 {
        if positive {
            self.positive
        } else {
            self.negative
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.negative > 0.0 && self.positive > 0.0)
            || !self.negative.is_finite()
            || !self.positive.is_finite()
        {
            return Err(Error::Param(format!(
                "class weights must be positive and finite, got ({}, {})",
                self.negative, self.positive
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BceTerm {
    index: usize,
    label: f64,
    weight: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Concat(Var, Var),
    Dropout(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    Aggregate(Var, Arc<SparseRows>),
    Bce {
        logits: Var,
        terms: Vec<BceTerm>,
        denom: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Concat(..) => "concat",
            Op::Dropout(..) => "dropout",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Aggregate(..) => "aggregate",
            Op::Bce { .. } => "weighted_bce_with_logits",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of tensor operations.
///
/// Operations are appended in execution order, so every node's inputs
/// precede it and a single reverse sweep visits each node once. A tape is
/// built per forward pass and dropped afterwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
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

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite leaf value".into()));
        }
        Ok(self.push_unchecked(value, Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {}",
                op.name()
            )));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::Concat(a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Dropout(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Aggregate(a, _) => self.requires_grad(*a),
            Op::Bce { logits, .. } => self.requires_grad(*logits),
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}: inner dimensions differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).values(),
            false,
            self.value(b).values(),
            false,
            0.0,
            &mut out,
        );
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// Adds a `1×n` (or length-`n`) bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(Error::Shape(format!(
                "bias {:?} does not match {:?}",
                b.shape(),
                self.value(x).shape()
            )));
        }
        let bv = b.values().to_vec();
        let mut out = self.value(x).values().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, b) in row.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        self.push(Tensor::matrix(m, n, out)?, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let out = t.values().iter().map(|x| x * s).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale(a, s))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!(
                "{op}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.values().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.values().iter().map(|&v| sigmoid(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Sigmoid(x))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims(a)?;
        let (m2, q) = self.dims(b)?;
        if m != m2 {
            return Err(Error::Shape(format!(
                "concat: leading dimensions differ ({:?} vs {:?})",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        self.push(Tensor::matrix(m, p + q, out)?, Op::Concat(a, b))
    }

    /// Inverted dropout. Outside training (or at `p = 0`) the input handle
    /// itself is returned.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = t.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Dropout(x, mask))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let s = t.values().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Sparse row aggregation: row `r` of the output is `Σ w·h[src]` over
    /// the entries of `weights.row(r)`.
    pub fn aggregate(&mut self, h: Var, weights: &Arc<SparseRows>) -> Result<Var> {
        let (n, d) = self.dims(h)?;
        if weights.num_sources() != n {
            return Err(Error::Shape(format!(
                "aggregate: weights expect {} source rows, embeddings have {n}",
                weights.num_sources()
            )));
        }
        let rows = weights.num_rows();
        let mut out = vec![0.0; rows * d];
        weights.apply(self.value(h).values(), d, &mut out);
        self.push(
            Tensor::matrix(rows, d, out)?,
            Op::Aggregate(h, Arc::clone(weights)),
        )
    }

    /// Mean over all samples of `w_y · BCE(σ(z), y)`, in the
    /// log-sum-exp stable form.
    pub fn weighted_bce_with_logits(
        &mut self,
        logits: Var,
        labels: &[f64],
        weights: ClassWeights,
    ) -> Result<Var> {
        let mut mask = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            if y == 0.0 {
                mask.push(Some(false));
            } else if y == 1.0 {
                mask.push(Some(true));
            } else {
                return Err(Error::Data(format!("label {y} at index {i} is not binary")));
            }
        }
        self.masked_bce_with_logits(logits, &mask, weights)
    }

    /// Weighted BCE averaged over the entries whose label is `Some`.
    /// Unlabeled entries contribute no term at all.
    pub fn masked_bce_with_logits(
        &mut self,
        logits: Var,
        labels: &[Option<bool>],
        weights: ClassWeights,
    ) -> Result<Var> {
        weights.validate()?;
        let z = self.value(logits);
        let (n, c) = z.dims2()?;
        if c != 1 || n != labels.len() {
            return Err(Error::Shape(format!(
                "logits {:?} do not match {} labels",
                z.shape(),
                labels.len()
            )));
        }
        let terms: Vec<BceTerm> = labels
            .iter()
            .enumerate()
            .filter_map(|(index, y)| {
                y.map(|y| BceTerm {
                    index,
                    label: if y { 1.0 } else { 0.0 },
                    weight: weights.for_label(y),
                })
            })
            .collect();
        if terms.is_empty() {
            return Err(Error::Data("loss needs at least one labeled node".into()));
        }
        let zv = z.values();
        let total: f64 = terms
            .iter()
            .map(|t| {
                let x = zv[t.index];
                t.weight * (x.max(0.0) - x * t.label + (-x.abs()).exp().ln_1p())
            })
            .sum();
        let denom = terms.len() as f64;
        self.push(
            Tensor::scalar(total / denom),
            Op::Bce {
                logits,
                terms,
                denom,
            },
        )
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every
    /// reachable node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let shape = self.value(loss).shape().to_vec();
        self.grads[loss.0] = Some(Tensor::full(shape, 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, g.values())?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape.to_vec()));
        }
        slot.as_mut().map(|t| t.values_mut())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Temporarily move the op out so input values can be borrowed
        // alongside the gradient buffers.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.propagate_op(&op, g);
        self.nodes[i].op = op;
        result
    }

    fn propagate_op(&mut self, op: &Op, g: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (_, n) = self.dims(*b)?;
                if self.requires_grad(*a) {
                    let bv = self.value(*b).values().to_vec();
                    let ga = self.accum(*a).expect("requires grad");
                    // dA += dC · Bᵀ
                    gemm(m, n, k, g, false, &bv, true, 1.0, ga);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).values().to_vec();
                    let gb = self.accum(*b).expect("requires grad");
                    // dB += Aᵀ · dC
                    gemm(k, m, n, &av, true, g, false, 1.0, gb);
                }
            }
            Op::AddBias(x, b) => {
                let (_, n) = self.dims(*x)?;
                if let Some(gx) = self.accum(*x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.accum(*b) {
                    for row in g.chunks(n.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.accum(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.accum(*b) {
                    add_into(gb, g);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b).values().to_vec();
                    let ga = self.accum(*a).expect("requires grad");
                    for ((o, d), y) in ga.iter_mut().zip(g).zip(&bv) {
                        *o += d * y;
                    }
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).values().to_vec();
                    let gb = self.accum(*b).expect("requires grad");
                    for ((o, d), x) in gb.iter_mut().zip(g).zip(&av) {
                        *o += d * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.accum(*a) {
                    for (o, d) in ga.iter_mut().zip(g) {
                        *o += s * d;
                    }
                }
            }
            Op::Relu(x) => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x).values().to_vec();
                    let gx = self.accum(*x).expect("requires grad");
                    for ((o, d), v) in gx.iter_mut().zip(g).zip(&xv) {
                        if *v > 0.0 {
                            *o += d;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.requires_grad(*x) {
                    let yv: Vec<f64> = self
                        .value(*x)
                        .values()
                        .iter()
                        .map(|&v| sigmoid(v))
                        .collect();
                    let gx = self.accum(*x).expect("requires grad");
                    for ((o, d), y) in gx.iter_mut().zip(g).zip(&yv) {
                        *o += d * y * (1.0 - y);
                    }
                }
            }
            Op::Concat(a, b) => {
                let (m, p) = self.dims(*a)?;
                let (_, q) = self.dims(*b)?;
                let w = p + q;
                if let Some(ga) = self.accum(*a) {
                    for r in 0..m {
                        add_into(&mut ga[r * p..(r + 1) * p], &g[r * w..r * w + p]);
                    }
                }
                if let Some(gb) = self.accum(*b) {
                    for r in 0..m {
                        add_into(&mut gb[r * q..(r + 1) * q], &g[r * w + p..(r + 1) * w]);
                    }
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(gx) = self.accum(*x) {
                    for ((o, d), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += d * m;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.accum(*x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.accum(*x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Aggregate(h, weights) => {
                let (_, d) = self.dims(*h)?;
                if let Some(gh) = self.accum(*h) {
                    weights.apply_transpose(g, d, gh);
                }
            }
            Op::Bce {
                logits,
                terms,
                denom,
            } => {
                if self.requires_grad(*logits) {
                    let zv = self.value(*logits).values().to_vec();
                    let gz = self.accum(*logits).expect("requires grad");
                    for t in terms {
                        gz[t.index] += g[0] * t.weight * (sigmoid(zv[t.index]) - t.label) / denom;
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// Central differences of a scalar function, used as the gradient oracle.
    fn fd<F: Fn(&Tensor) -> f64>(f: F, x: &Tensor, eps: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.values_mut()[i] += eps;
                let mut q = x.clone();
                q.values_mut()[i] -= eps;
                (f(&p) - f(&q)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let i2 = t.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let x = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let y = t.matmul(i2, x).unwrap();
        assert_eq!(t.value(y).values(), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(m(&[&[1.0, 2.0]])).unwrap();
        let b = t.constant(m(&[&[3.0], &[4.0]])).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).values(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a0 = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b0 = m(&[&[2.0, 3.0], &[4.0, 5.0]]);
        let mut t = Tape::new();
        let a = t.param(a0.clone()).unwrap();
        let b = t.constant(b0.clone()).unwrap();
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c).unwrap();
        t.backward(s).unwrap();
        let oracle = fd(
            |x| {
                let mut tt = Tape::new();
                let a = tt.constant(x.clone()).unwrap();
                let b = tt.constant(b0.clone()).unwrap();
                let c = tt.matmul(a, b).unwrap();
                tt.value(c).values().iter().sum()
            },
            &a0,
            1e-5,
        );
        let frozen = [5.0, 9.0, 5.0, 9.0];
        for ((g, o), f) in t.grad(a).unwrap().values().iter().zip(&oracle).zip(frozen) {
            assert!((g - o).abs() < 1e-8);
            assert!((g - f).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_forward_and_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).values(), &[0.0, 0.0, 2.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, -2.0, -0.5])).unwrap();
        let y = t.relu(x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.value(y).values(), &[0.0; 3]);
        assert_eq!(t.grad(x).unwrap().values(), &[0.0; 3]);

        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0)).unwrap();
        let y = t.relu(x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        let oracle = fd(|x| x.values()[0].max(0.0), &Tensor::scalar(3.0), 1e-5)[0];
        assert!((t.grad(x).unwrap().values()[0] - oracle).abs() < 1e-9);
        assert_eq!(t.grad(x).unwrap().values()[0], 1.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0)).unwrap();
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).values()[0], 0.5);
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().values()[0], 0.25);
    }

    #[test]
    fn concat_forward_backward() {
        let mut t = Tape::new();
        let a = t.param(m(&[&[1.0]])).unwrap();
        let b = t.param(m(&[&[2.0, 3.0]])).unwrap();
        let c = t.concat(a, b).unwrap();
        assert_eq!(t.value(c).values(), &[1.0, 2.0, 3.0]);
        assert_eq!(t.value(c).shape(), &[1, 3]);
        let s = t.sum(c).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().values(), &[1.0]);
        assert_eq!(t.grad(b).unwrap().values(), &[1.0, 1.0]);

        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let e = t.constant(Tensor::zeros(vec![2, 0])).unwrap();
        let c = t.concat(a, e).unwrap();
        assert_eq!(t.value(c), t.value(a));

        let bad = t.constant(Tensor::zeros(vec![3, 1])).unwrap();
        assert!(matches!(t.concat(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, -2.0, 3.5])).unwrap();
        let y = t.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let y = t.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(t.value(y), t.value(x));
        assert!(matches!(
            t.dropout(x, 1.0, true, &mut rng),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn dropout_preserves_mean_in_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(vec![1_000_000], 1.0)).unwrap();
        let y = t.dropout(x, 0.2, true, &mut rng).unwrap();
        let v = t.value(y).values();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
        assert!(v.iter().all(|&e| e == 0.0 || e == 1.25));
    }

    #[test]
    fn bce_reference_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::vector(vec![40.0])).unwrap();
        let l = t
            .weighted_bce_with_logits(z, &[1.0], ClassWeights::UNIT)
            .unwrap();
        assert!(t.value(l).item().unwrap() < 1e-15);

        let z = t.constant(Tensor::vector(vec![0.0])).unwrap();
        let l = t
            .weighted_bce_with_logits(z, &[1.0], ClassWeights::UNIT)
            .unwrap();
        assert!((t.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let l = t
            .weighted_bce_with_logits(z, &[1.0], ClassWeights::new(1.0, 3.0))
            .unwrap();
        // direct evaluation: 3 · (−ln σ(0))
        let direct = 3.0 * -(0.5f64).ln();
        assert!((t.value(l).item().unwrap() - direct).abs() < 1e-15);
        assert!((direct - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn bce_rejects_non_binary_labels_and_bad_weights() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::vector(vec![0.0, 1.0])).unwrap();
        assert!(matches!(
            t.weighted_bce_with_logits(z, &[0.0, 0.5], ClassWeights::UNIT),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            t.weighted_bce_with_logits(z, &[0.0, 1.0], ClassWeights::new(0.0, 1.0)),
            Err(Error::Param(_))
        ));
        assert!(matches!(
            t.masked_bce_with_logits(z, &[None, None], ClassWeights::UNIT),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn bce_finite_over_wide_logit_range() {
        for z in [-500.0, -100.0, -1.0, 0.0, 1.0, 100.0, 500.0] {
            for y in [0.0, 1.0] {
                let mut t = Tape::new();
                let v = t.param(Tensor::vector(vec![z])).unwrap();
                let l = t
                    .weighted_bce_with_logits(v, &[y], ClassWeights::new(2.0, 7.0))
                    .unwrap();
                t.backward(l).unwrap();
                assert!(t.value(l).item().unwrap().is_finite());
                assert!(t.grad(v).unwrap().is_finite());
            }
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_square_gives_2x() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(vec![2, 3])).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().values(), &[1.0; 6]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        let oracle = fd(
            |x| x.values().iter().map(|v| v * v).sum(),
            &Tensor::vector(vec![1.0, 2.0]),
            1e-5,
        );
        let g = t.grad(x).unwrap().values();
        assert_eq!(g, &[2.0, 4.0]);
        for (a, b) in g.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn shared_uses_accumulate() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -3.0])).unwrap();
        let a = t.sum(x).unwrap();
        let b = t.sum(x).unwrap();
        let l = t.add(a, b).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().values(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_twice_without_reset_is_error() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.0)).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::Backward(_))));
        t.zero_grad();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().values(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn unreached_params_have_no_grad() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.0)).unwrap();
        let y = t.param(Tensor::scalar(2.0)).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(y).is_none());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1e300])).unwrap();
        assert!(matches!(t.mul(x, x), Err(Error::Numeric(_))));
        assert!(matches!(
            t.constant(Tensor::vector(vec![f64::NAN])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn aggregate_and_transpose() {
        let w =
            Arc::new(SparseRows::new(2, vec![vec![(1, 0.5)], vec![(0, 1.0), (1, 2.0)]]).unwrap());
        let mut t = Tape::new();
        let h = t.param(m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let a = t.aggregate(h, &w).unwrap();
        assert_eq!(t.value(a).values(), &[1.5, 2.0, 7.0, 10.0]);
        let s = t.sum(a).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(h).unwrap().values(), &[1.0, 1.0, 2.5, 2.5]);
    }
}
