use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::matrix::{Matrix, NORM_EPS};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Relu(Var),
    NormalizeRows { input: Var, norms: Vec<T> },
    Transpose(Var),
    ConcatCols(Var, Var),
    RowDot(Var, Var),
    /// Scalar head whose Jacobian w.r.t. each input was computed in the forward pass.
    Fused { inputs: Vec<Var>, local: Vec<Matrix<T>> },
    WeightedSum(Vec<(Var, T)>),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Matrix<T>,
    requires_grad: bool,
}

/// Wengert list for one forward/backward pass. Not shared across threads.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives gradient (a detached value).
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    /// Adds the `1×m` row `bias` to every row of the `n×m` input.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::dims(
                "add_row_bias",
                format!("{:?} plus bias {:?}", x.shape(), b.shape()),
            ));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (o, &bv) in value.row_mut(r).iter_mut().zip(b.as_slice()) {
                *o += bv;
            }
        }
        let rg = self.needs(&[a, bias]);
        Ok(self.push(Op::AddRowBias(a, bias), value, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.needs(&[a]);
        self.push(Op::Relu(a), value, rg)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut value = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = super::matrix::l2_norm(x.row(r));
            if !(n.widen() > NORM_EPS) {
                return Err(Error::DegenerateNorm { norm: n.widen() });
            }
            for o in value.row_mut(r) {
                *o /= n;
            }
            norms.push(n);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Op::NormalizeRows { input: a, norms }, value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.needs(&[a]);
        self.push(Op::Transpose(a), value, rg)
    }

    /// Normalizes every column (used for proxy matrices stored `d×K`).
    pub fn normalize_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.transpose(a);
        let n = self.normalize_rows(t)?;
        Ok(self.transpose(n))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::ConcatCols(a, b), value, rg))
    }

    /// Row-wise dot product of two `n×m` inputs, giving `n×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dims(
                "row_dot",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let value = Matrix::from_fn(x.rows(), 1, |r, _| super::dot(x.row(r), y.row(r)));
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::RowDot(a, b), value, rg))
    }

    /// Records a scalar `value` together with its partial derivatives w.r.t.
    /// each of `inputs`. Each local Jacobian must match its input's shape.
    pub fn fused_scalar(&mut self, inputs: Vec<Var>, value: T, local: Vec<Matrix<T>>) -> Result<Var> {
        if inputs.len() != local.len() {
            return Err(Error::dims(
                "fused_scalar",
                format!("{} inputs, {} jacobians", inputs.len(), local.len()),
            ));
        }
        for (v, j) in inputs.iter().zip(&local) {
            if self.value(*v).shape() != j.shape() {
                return Err(Error::dims(
                    "fused_scalar",
                    format!("input {:?} vs jacobian {:?}", self.value(*v).shape(), j.shape()),
                ));
            }
        }
        let rg = self.needs(&inputs);
        Ok(self.push(Op::Fused { inputs, local }, Matrix::scalar(value), rg))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let x = self.value(v);
            if x.shape() != (1, 1) {
                return Err(Error::dims(
                    "weighted_sum",
                    format!("term has shape {:?}", x.shape()),
                ));
            }
            total += w * x.get(0, 0);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.needs(&vars);
        Ok(self.push(Op::WeightedSum(terms.to_vec()), Matrix::scalar(total), rg))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn grad(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::NonScalarOutput {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, g.matmul_t(bv)?);
                    }
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, av.t_matmul(&g)?);
                    }
                }
                Op::AddRowBias(a, bias) => {
                    if self.nodes[bias.0].requires_grad {
                        let sums =
                            Matrix::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum());
                        accumulate(&mut grads, *bias, sums);
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (o, &xi) in d.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        if xi <= T::zero() {
                            *o = T::zero();
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::NormalizeRows { input, norms } => {
                    // d x = (dy - y (y·dy)) / ‖x‖
                    let y = &node.value;
                    let mut d = g;
                    for (r, &n) in norms.iter().enumerate() {
                        let proj = super::dot(y.row(r), d.row(r));
                        for (o, &yi) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o = (*o - yi * proj) / n;
                        }
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::ConcatCols(a, b) => {
                    let left = self.value(*a).cols();
                    let right = self.value(*b).cols();
                    let ga = Matrix::from_fn(g.rows(), left, |r, c| g.get(r, c));
                    let gb = Matrix::from_fn(g.rows(), right, |r, c| g.get(r, left + c));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        let d = Matrix::from_fn(av.rows(), av.cols(), |r, c| g.get(r, 0) * bv.get(r, c));
                        accumulate(&mut grads, *a, d);
                    }
                    if self.nodes[b.0].requires_grad {
                        let d = Matrix::from_fn(bv.rows(), bv.cols(), |r, c| g.get(r, 0) * av.get(r, c));
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Fused { inputs, local } => {
                    let up = g.get(0, 0);
                    for (v, j) in inputs.iter().zip(local) {
                        if self.nodes[v.0].requires_grad {
                            accumulate(&mut grads, *v, j.scale(up));
                        }
                    }
                }
                Op::WeightedSum(terms) => {
                    let up = g.get(0, 0);
                    for &(v, w) in terms {
                        if self.nodes[v.0].requires_grad {
                            accumulate(&mut grads, v, Matrix::scalar(up * w));
                        }
                    }
                }
            }
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| match node.op {
                Op::Leaf | Op::Constant => Some(
                    grads[i]
                        .take()
                        .filter(|_| node.requires_grad)
                        .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols())),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a scalar output w.r.t. every leaf and constant on the tape.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf or constant; panics if `v` is an intermediate node.
    pub fn wrt(&self, v: Var) -> &Matrix<T> {
        self.leaves[v.0]
            .as_ref()
            .expect("gradients are only kept for leaves and constants")
    }

    pub fn take(&mut self, v: Var) -> Matrix<T> {
        self.leaves[v.0]
            .take()
            .expect("gradients are only kept for leaves and constants")
    }
}
