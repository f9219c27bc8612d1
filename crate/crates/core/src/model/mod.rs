//! Parameter containers and forward passes.
//!
//! The backbone is a small multilayer perceptron (rectifier on hidden layers,
//! linear output). Class proxies are stored `d×K` and only normalized when a
//! loss or metric reads them. The personalized branch is an affine map
//! followed by one binary classifier per locally registered identity.

mod checkpoint;

pub use checkpoint::{
    read_tensors, write_tensors, ClientCheckpoint, GlobalCheckpoint, TensorFile,
    TensorKind, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{unit_vector, uniform_sym};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tape, Var};

/// One affine layer; `weight` is `in×out` so a batch `X·W + b` runs row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn new(weight: Matrix<T>, bias: Matrix<T>) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::dims(
                "Layer::new",
                format!("weight {:?} with bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(Layer { weight, bias })
    }

    fn uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Layer {
            weight: Matrix::from_fn(fan_in, fan_out, |_, _| uniform_sym(rng, bound)),
            bias: Matrix::from_fn(1, fan_out, |_, _| uniform_sym(rng, bound)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Embedding network Θ.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> BackboneParams<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("backbone needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dims(
                    "BackboneParams::new",
                    format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        pair[0].out_dim(),
                        i + 1,
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        if layers.iter().any(|l| !l.weight.is_finite() || !l.bias.is_finite()) {
            return Err(Error::NonFinite("backbone parameters".into()));
        }
        Ok(BackboneParams { layers })
    }

    /// Seeded uniform initialization scaled by `1/√fan_in`.
    pub fn init(input_dim: usize, hidden_dims: &[usize], embed_dim: usize, rng: &mut impl Rng) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden_dims);
        dims.push(embed_dim);
        let layers = dims.windows(2).map(|w| Layer::uniform(w[0], w[1], rng)).collect();
        BackboneParams { layers }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer widths from input to embedding.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Layer::out_dim));
        d
    }

    /// Feature `f = Θ(x)`, unnormalized.
    pub fn embed(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.embed_batch(&Matrix::row_vector(x))?.into_vec())
    }

    pub fn embed_batch(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::dims(
                "embed",
                format!("input has {} features, backbone expects {}", x.cols(), self.input_dim()),
            ));
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?;
            for r in 0..h.rows() {
                for (o, &b) in h.row_mut(r).iter_mut().zip(layer.bias.as_slice()) {
                    *o += b;
                    if i < last && *o < T::zero() {
                        *o = T::zero();
                    }
                }
            }
        }
        Ok(h)
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn record(&self, tape: &mut Tape<T>) -> BackboneVars {
        BackboneVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }
}

/// Tape handles for a recorded backbone, `(weight, bias)` per layer.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub layers: Vec<(Var, Var)>,
}

impl BackboneVars {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row_bias(z, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxyRole {
    /// Φ: proxies of the globally shared identities.
    Global,
    /// W: a client's private identities.
    Local,
}

/// Class proxy matrix, `d×K`, one column per identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings<T> {
    matrix: Matrix<T>,
    role: ProxyRole,
}

impl<T: Scalar> ClassEmbeddings<T> {
    pub fn new(matrix: Matrix<T>, role: ProxyRole) -> Result<Self> {
        if !matrix.is_finite() {
            return Err(Error::NonFinite("class embeddings".into()));
        }
        Ok(ClassEmbeddings { matrix, role })
    }

    /// Columns drawn independently from the unit sphere.
    pub fn random(dim: usize, classes: usize, role: ProxyRole, rng: &mut impl Rng) -> Self {
        let cols: Vec<Vec<T>> = (0..classes).map(|_| unit_vector(rng, dim)).collect();
        let matrix = Matrix::from_fn(dim, classes, |r, c| cols[c][r]);
        ClassEmbeddings { matrix, role }
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix<T> {
        &mut self.matrix
    }

    pub fn role(&self) -> ProxyRole {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.cols()
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        self.matrix.column(j)
    }
}

/// Client-private customization branch: affine `Π`, binary weights `Ω`, bias `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct DfcBranch<T> {
    pub transform: Matrix<T>,
    pub transform_bias: Matrix<T>,
    pub binary_weights: Matrix<T>,
    pub bias: T,
}

impl<T: Scalar> DfcBranch<T> {
    pub fn new(
        transform: Matrix<T>,
        transform_bias: Matrix<T>,
        binary_weights: Matrix<T>,
        bias: T,
    ) -> Result<Self> {
        if transform_bias.shape() != (1, transform.cols()) || binary_weights.rows() != transform.cols() {
            return Err(Error::dims(
                "DfcBranch::new",
                format!(
                    "Π {:?}, Π-bias {:?}, Ω {:?}",
                    transform.shape(),
                    transform_bias.shape(),
                    binary_weights.shape()
                ),
            ));
        }
        Ok(DfcBranch {
            transform,
            transform_bias,
            binary_weights,
            bias,
        })
    }

    /// Uniform `Π` scaled by `1/√d`, unit-sphere `Ω` columns, `b = 0`.
    pub fn init(embed_dim: usize, out_dim: usize, local_classes: usize, rng: &mut impl Rng) -> Self {
        let layer = Layer::uniform(embed_dim, out_dim, rng);
        let omega = ClassEmbeddings::random(out_dim, local_classes, ProxyRole::Local, rng);
        DfcBranch {
            transform: layer.weight,
            transform_bias: layer.bias,
            binary_weights: omega.matrix,
            bias: T::zero(),
        }
    }

    pub fn identity(dim: usize, local_classes: usize, rng: &mut impl Rng) -> Self {
        let omega = ClassEmbeddings::random(dim, local_classes, ProxyRole::Local, rng);
        DfcBranch {
            transform: Matrix::identity(dim),
            transform_bias: Matrix::zeros(1, dim),
            binary_weights: omega.matrix,
            bias: T::zero(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.transform.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.transform.cols()
    }

    pub fn num_branches(&self) -> usize {
        self.binary_weights.cols()
    }

    /// `f′ = f·Π + bias`.
    pub fn transform(&self, f: &[T]) -> Result<Vec<T>> {
        Ok(self.transform_batch(&Matrix::row_vector(f))?.into_vec())
    }

    pub fn transform_batch(&self, f: &Matrix<T>) -> Result<Matrix<T>> {
        if f.cols() != self.in_dim() {
            return Err(Error::dims(
                "dfc_transform",
                format!("feature has {} dims, Π expects {}", f.cols(), self.in_dim()),
            ));
        }
        let mut out = f.matmul(&self.transform)?;
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(self.transform_bias.as_slice()) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn record(&self, tape: &mut Tape<T>) -> DfcVars {
        DfcVars {
            transform: tape.leaf(self.transform.clone()),
            transform_bias: tape.leaf(self.transform_bias.clone()),
            binary_weights: tape.leaf(self.binary_weights.clone()),
            bias: tape.leaf(Matrix::scalar(self.bias)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DfcVars {
    pub transform: Var,
    pub transform_bias: Var,
    pub binary_weights: Var,
    pub bias: Var,
}

impl DfcVars {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let z = tape.matmul(f, self.transform)?;
        tape.add_row_bias(z, self.transform_bias)
    }
}

/// Feature in the client's personalized space, `Π(Θ(x))`.
pub fn personalized_embed<T: Scalar>(
    backbone: &BackboneParams<T>,
    branch: &DfcBranch<T>,
    x: &[T],
) -> Result<Vec<T>> {
    branch.transform(&backbone.embed(x)?)
}
