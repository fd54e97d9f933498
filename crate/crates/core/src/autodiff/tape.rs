//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation pushes a node holding its value and a backward rule that
//! refers to its parents by index. Parents always precede their children, so
//! walking the tape backwards from the loss is a valid reverse topological
//! order and each node is visited exactly once. Gradients accumulate
//! additively, which handles fan-out.

use crate::error::{contract, Error, Result};

use super::eig::{self, SymEigen};
use super::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    LeakyRelu(NodeId, f64),
    Truncate(NodeId, f64),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ColumnMean(NodeId),
    SampleCovariance(NodeId),
    DiagExtract(NodeId),
    FrobeniusSq(NodeId),
    Mse(NodeId, NodeId),
    Sum(NodeId),
    Square(NodeId),
    Transpose(NodeId),
    AbsSum(NodeId),
    EigTopK {
        input: NodeId,
        scale: f64,
        eigen: Box<SymEigen>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record. Single-threaded by construction; build
/// one tape per forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects non-finite operands with [`Error::Numeric`].
    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable input whose gradient is kept after [`Tape::backward`].
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Gradient of the last [`Tape::backward`] loss w.r.t. this node, if the
    /// node lies on a differentiable path.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, ids: &[NodeId], what: &str) -> Result<()> {
        if self.checked {
            for &id in ids {
                self.value(id).ensure_finite(what)?;
            }
        }
        Ok(())
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    fn unary(&mut self, a: NodeId, value: Matrix, op: Op) -> NodeId {
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, value: Matrix, op: Op) -> NodeId {
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b], "matmul")?;
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    /// Adds a `1 x cols` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(&[a, bias], "add_bias")?;
        let v = self.value(a).add_row(self.value(bias))?;
        Ok(self.binary(a, bias, v, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b], "add")?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b], "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.check(&[a], "scale")?;
        let v = self.value(a).scale(s);
        Ok(self.unary(a, v, Op::Scale(a, s)))
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        self.check(&[a], "leaky_relu")?;
        let v = self.value(a).map(|x| if x > 0.0 { x } else { alpha * x });
        Ok(self.unary(a, v, Op::LeakyRelu(a, alpha)))
    }

    /// Elementwise `sgn(z)·min(|z|, M)`.
    pub fn truncate(&mut self, a: NodeId, level: f64) -> Result<NodeId> {
        contract!(level > 0.0, "truncation level must be positive, got {level}");
        self.check(&[a], "truncate")?;
        let v = self.value(a).map(|x| x.signum() * x.abs().min(level));
        Ok(self.unary(a, v, Op::Truncate(a, level)))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.check(&[a], "slice_cols")?;
        let v = self.value(a).slice_cols(start, end)?;
        Ok(self.unary(a, v, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.check(parts, "concat_cols")?;
        let refs: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::hcat(&refs)?;
        let rg = self.any_grad(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// `1 x cols` row of column means.
    pub fn column_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a], "column_mean")?;
        contract!(self.value(a).rows() >= 1, "column_mean of an empty matrix");
        let v = self.value(a).column_means();
        Ok(self.unary(a, v, Op::ColumnMean(a)))
    }

    /// `(A-Ā)ᵀ(A-Ā)/(n-1)`.
    pub fn sample_covariance(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a], "sample_covariance")?;
        let v = self.value(a).sample_covariance()?;
        Ok(self.unary(a, v, Op::SampleCovariance(a)))
    }

    /// Keeps the diagonal of a square matrix, zeroing everything else.
    pub fn diag_extract(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a], "diag_extract")?;
        let m = self.value(a);
        contract!(m.rows() == m.cols(), "diag_extract needs a square matrix");
        let v = Matrix::from_fn(m.rows(), m.cols(), |i, j| if i == j { m.get(i, i) } else { 0.0 });
        Ok(self.unary(a, v, Op::DiagExtract(a)))
    }

    /// `‖A‖_F²` as a `1 x 1` node.
    pub fn frobenius_sq(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a], "frobenius_sq")?;
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        Ok(self.unary(a, Matrix::scalar(s), Op::FrobeniusSq(a)))
    }

    /// Mean of squared differences, `1 x 1`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b], "mse")?;
        let (va, vb) = (self.value(a), self.value(b));
        contract!(
            va.shape() == vb.shape(),
            "mse: shape mismatch {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        contract!(!va.is_empty(), "mse of empty matrices");
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = Matrix::scalar(s / va.len() as f64);
        Ok(self.binary(a, b, v, Op::Mse(a, b)))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a], "sum")?;
        let v = Matrix::scalar(self.value(a).sum());
        Ok(self.unary(a, v, Op::Sum(a)))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a], "square")?;
        let v = self.value(a).map(|x| x * x);
        Ok(self.unary(a, v, Op::Square(a)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a], "transpose")?;
        let v = self.value(a).transpose();
        Ok(self.unary(a, v, Op::Transpose(a)))
    }

    /// `Σ|a_ij|` as a `1 x 1` node; the subgradient at 0 is 0.
    pub fn abs_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a], "abs_sum")?;
        let s = self.value(a).data().iter().map(|v| v.abs()).sum();
        Ok(self.unary(a, Matrix::scalar(s), Op::AbsSum(a)))
    }

    /// Leading `k` eigenvectors of a symmetric matrix node, times `scale`.
    /// Gradients flow through the eigendecomposition adjoint.
    pub fn eig_top_k(&mut self, a: NodeId, k: usize, scale: f64) -> Result<NodeId> {
        self.check(&[a], "eig_top_k")?;
        let eigen = eig::eig_sym(self.value(a))?;
        contract!(k <= eigen.values.len(), "eig_top_k: k={k} exceeds dimension");
        let v = eigen.vectors.slice_cols(0, k)?.scale(scale);
        let op = Op::EigTopK {
            input: a,
            scale,
            eigen: Box::new(eigen),
        };
        Ok(self.unary(a, v, op))
    }

    /// The decomposition cached by an [`Tape::eig_top_k`] node.
    pub fn eigen_of(&self, id: NodeId) -> Option<&SymEigen> {
        match &self.nodes[id.0].op {
            Op::EigTopK { eigen, .. } => Some(eigen),
            _ => None,
        }
    }

    fn accumulate(&mut self, id: NodeId, g: Matrix) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    /// Backpropagates from a `1 x 1` loss. Clears gradients from any earlier
    /// call first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        contract!(
            self.value(loss).shape() == (1, 1),
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backprop_node(&op, &g)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, op: &Op, g: &Matrix) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(a) {
                    let ga = g.matmul_t(self.value(b))?;
                    self.accumulate(a, ga);
                }
                if self.requires_grad(b) {
                    let gb = self.value(a).t_matmul(g)?;
                    self.accumulate(b, gb);
                }
            }
            Op::AddBias(a, b) => {
                self.accumulate(a, g.clone());
                if self.requires_grad(b) {
                    self.accumulate(b, g.column_sums());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.scale(-1.0));
            }
            Op::Scale(a, s) => self.accumulate(a, g.scale(s)),
            Op::LeakyRelu(a, alpha) => {
                let ga = self.value(a).map(|x| if x > 0.0 { 1.0 } else { alpha }).hadamard(g)?;
                self.accumulate(a, ga);
            }
            Op::Truncate(a, level) => {
                // Pass-through on the boundary |z| = M.
                let ga = self
                    .value(a)
                    .map(|x| if x.abs() <= level { 1.0 } else { 0.0 })
                    .hadamard(g)?;
                self.accumulate(a, ga);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(a).shape();
                let mut ga = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    ga.row_slice_mut(r)[start..start + g.cols()].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(a, ga);
            }
            Op::ConcatCols(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let gp = g.slice_cols(start, start + w)?;
                    start += w;
                    self.accumulate(p, gp);
                }
            }
            Op::ColumnMean(a) => {
                let (rows, cols) = self.value(a).shape();
                let inv = 1.0 / rows as f64;
                let ga = Matrix::from_fn(rows, cols, |_, j| g.get(0, j) * inv);
                self.accumulate(a, ga);
            }
            Op::SampleCovariance(a) => {
                // dA = (A-Ā)(G+Gᵀ)/(n-1); the centering projector is absorbed
                // because the rows of A-Ā sum to zero.
                let centered = self.value(a).centered();
                let n = centered.rows() as f64;
                let gs = g.add(&g.transpose())?;
                let ga = centered.matmul(&gs)?.scale(1.0 / (n - 1.0));
                self.accumulate(a, ga);
            }
            Op::DiagExtract(a) => {
                let n = g.rows();
                let ga = Matrix::from_fn(n, n, |i, j| if i == j { g.get(i, i) } else { 0.0 });
                self.accumulate(a, ga);
            }
            Op::FrobeniusSq(a) => {
                let s = 2.0 * g.get(0, 0);
                let ga = self.value(a).scale(s);
                self.accumulate(a, ga);
            }
            Op::Mse(a, b) => {
                let va = self.value(a);
                let s = 2.0 * g.get(0, 0) / va.len() as f64;
                let diff = va.sub(self.value(b))?.scale(s);
                if self.requires_grad(b) {
                    self.accumulate(b, diff.scale(-1.0));
                }
                self.accumulate(a, diff);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.value(a).shape();
                self.accumulate(a, Matrix::filled(rows, cols, g.get(0, 0)));
            }
            Op::Square(a) => {
                let ga = self.value(a).scale(2.0).hadamard(g)?;
                self.accumulate(a, ga);
            }
            Op::Transpose(a) => self.accumulate(a, g.transpose()),
            Op::AbsSum(a) => {
                let s = g.get(0, 0);
                let ga = self.value(a).map(|x| {
                    if x > 0.0 {
                        s
                    } else if x < 0.0 {
                        -s
                    } else {
                        0.0
                    }
                });
                self.accumulate(a, ga);
            }
            Op::EigTopK {
                input,
                scale,
                ref eigen,
            } => {
                let n = eigen.values.len();
                let mut grad_vectors = Matrix::zeros(n, n);
                for r in 0..n {
                    for c in 0..g.cols() {
                        grad_vectors.set(r, c, g.get(r, c) * scale);
                    }
                }
                let ga = eig::eig_sym_backward(&eigen.values, &eigen.vectors, &vec![0.0; n], &grad_vectors)?;
                self.accumulate(input, ga);
            }
        }
        Ok(())
    }

    /// Checks that `id` holds a scalar and returns it.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "expected a scalar node, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.get(0, 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_and_truncate_values() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::row(&[-1.0, 2.0]));
        let y = t.leaky_relu(x, 0.01).unwrap();
        assert_eq!(t.value(y).data(), &[-0.01, 2.0]);
        let z = t.constant(Matrix::row(&[3.0, -3.0, 1.0]));
        let tz = t.truncate(z, 2.0).unwrap();
        assert_eq!(t.value(tz).data(), &[2.0, -2.0, 1.0]);
    }

    #[test]
    fn covariance_value() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]).unwrap());
        let c = t.sample_covariance(a).unwrap();
        assert_eq!(t.value(c), &Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap());
    }

    #[test]
    fn mse_chain_rule() {
        let mut t = Tape::new();
        let w = t.param(Matrix::scalar(1.0));
        let x = t.constant(Matrix::scalar(2.0));
        let y = t.constant(Matrix::scalar(0.0));
        let wx = t.matmul(w, x).unwrap();
        let loss = t.mse(wx, y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[8.0]);
    }

    #[test]
    fn sum_and_fan_out() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 4]);

        let y = t.add(x, x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn truncate_gradient_mask() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row(&[0.5, 2.0, -3.0, -2.0]));
        let y = t.truncate(x, 2.0).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn errors() {
        let mut t = Tape::checked();
        let a = t.param(Matrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, a), Err(Error::Contract(_))));
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
        let bad = t.constant(Matrix::row(&[f64::NAN]));
        assert!(matches!(t.scale(bad, 2.0), Err(Error::Numeric(_))));
        let bias = t.param(Matrix::zeros(2, 3));
        assert!(t.add_bias(a, bias).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::row(&[1.0, 2.0]));
        let p = t.param(Matrix::row(&[3.0, 4.0]));
        let y = t.add(c, p).unwrap();
        let s = t.frobenius_sq(y).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(p).unwrap().data(), &[8.0, 12.0]);
    }
}
