//! Synthetic identities and the global/client partition.
//!
//! Each identity is a prototype on the unit sphere; its samples are the
//! normalized prototype plus isotropic Gaussian noise. The first `K_g`
//! identities form the shared global set, the next `C·K_l` are dealt to
//! clients in contiguous blocks, and any remainder stays unused.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{TensorFile, TensorKind};
use crate::rng::{gaussian, stream, tags, unit_vector};
use crate::scalar::Scalar;
use crate::tensor::{l2_normalize, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample<T> {
    pub x: Vec<T>,
    pub identity: usize,
    pub split: Split,
}

/// Draws `n_per_id` unit-norm samples for each of `k` identities.
///
/// Samples come out grouped by identity in ascending order, all marked
/// [`Split::Train`]; [`partition`] assigns the evaluation split.
pub fn generate_identities<T: Scalar>(
    k: usize,
    n_per_id: usize,
    input_dim: usize,
    sigma_intra: f64,
    seed: u64,
) -> Result<Vec<FaceSample<T>>> {
    if k == 0 || n_per_id < 2 || input_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "need k >= 1, n_per_id >= 2, input_dim >= 1; got k={k}, n_per_id={n_per_id}, input_dim={input_dim}"
        )));
    }
    if !(sigma_intra > 0.0 && sigma_intra < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma_intra must lie in (0, 1), got {sigma_intra}"
        )));
    }
    let mut rng = stream(seed, &[tags::DATA]);
    let sigma = T::of(sigma_intra);
    let mut out = Vec::with_capacity(k * n_per_id);
    for identity in 0..k {
        let proto: Vec<T> = unit_vector(&mut rng, input_dim);
        for _ in 0..n_per_id {
            let noisy: Vec<T> = proto
                .iter()
                .map(|&p| p + sigma * gaussian::<T>(&mut rng))
                .collect();
            out.push(FaceSample {
                x: l2_normalize(&noisy)?,
                identity,
                split: Split::Train,
            });
        }
    }
    Ok(out)
}

/// Which identities live where.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub global_ids: Vec<usize>,
    pub client_ids: Vec<Vec<usize>>,
    pub unused_ids: Vec<usize>,
    pub train_per_id: usize,
    pub eval_per_id: usize,
}

impl Partition {
    /// Index of a shared identity among the global proxies.
    pub fn global_label(&self, identity: usize) -> Option<usize> {
        self.global_ids.iter().position(|&g| g == identity)
    }
}

#[derive(Clone, Debug)]
pub struct ClientData<T> {
    pub id: usize,
    pub identities: Vec<usize>,
    pub train: Vec<FaceSample<T>>,
    pub eval: Vec<FaceSample<T>>,
}

impl<T> ClientData<T> {
    /// Index of a registered identity among this client's private proxies.
    pub fn local_label(&self, identity: usize) -> Option<usize> {
        self.identities.iter().position(|&i| i == identity)
    }
}

#[derive(Clone, Debug)]
pub struct FederatedData<T> {
    pub partition: Partition,
    pub global_train: Vec<FaceSample<T>>,
    pub global_eval: Vec<FaceSample<T>>,
    pub clients: Vec<ClientData<T>>,
}

impl<T: Scalar> FederatedData<T> {
    /// Training samples of every identity, global and client, for the central upper bound.
    pub fn all_train(&self) -> Vec<FaceSample<T>> {
        let mut v = self.global_train.clone();
        for c in &self.clients {
            v.extend(c.train.iter().cloned());
        }
        v
    }
}

/// Splits generated samples into the shared set and per-client sets.
pub fn partition<T: Scalar>(
    samples: Vec<FaceSample<T>>,
    k_global: usize,
    clients: usize,
    k_local: usize,
    train_fraction: f64,
) -> Result<FederatedData<T>> {
    if clients == 0 || k_local == 0 {
        return Err(Error::InvalidArgument("need at least one client with one identity".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_id: BTreeMap<usize, Vec<FaceSample<T>>> = BTreeMap::new();
    for s in samples {
        by_id.entry(s.identity).or_default().push(s);
    }
    let total = by_id.len();
    let needed = k_global + clients * k_local;
    if needed > total {
        return Err(Error::InvalidArgument(format!(
            "insufficient identities: {k_global} global + {clients}x{k_local} local needs {needed}, have {total}"
        )));
    }
    let per_id = by_id.values().next().map_or(0, Vec::len);
    if by_id.values().any(|v| v.len() != per_id) {
        return Err(Error::InvalidArgument("identities have unequal sample counts".into()));
    }
    let train_per_id = ((per_id as f64 * train_fraction).round() as usize).clamp(1, per_id - 1);
    let ids: Vec<usize> = by_id.keys().copied().collect();

    let mut split = |id: usize| -> (Vec<FaceSample<T>>, Vec<FaceSample<T>>) {
        let mut v = by_id.remove(&id).expect("id listed");
        for (i, s) in v.iter_mut().enumerate() {
            s.split = if i < train_per_id { Split::Train } else { Split::Eval };
        }
        let eval = v.split_off(train_per_id);
        (v, eval)
    };

    let global_ids = ids[..k_global].to_vec();
    let (mut global_train, mut global_eval) = (Vec::new(), Vec::new());
    for &id in &global_ids {
        let (t, e) = split(id);
        global_train.extend(t);
        global_eval.extend(e);
    }
    let mut client_ids = Vec::with_capacity(clients);
    let mut client_data = Vec::with_capacity(clients);
    for c in 0..clients {
        let start = k_global + c * k_local;
        let identities = ids[start..start + k_local].to_vec();
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for &id in &identities {
            let (t, e) = split(id);
            train.extend(t);
            eval.extend(e);
        }
        client_ids.push(identities.clone());
        client_data.push(ClientData {
            id: c,
            identities,
            train,
            eval,
        });
    }
    Ok(FederatedData {
        partition: Partition {
            global_ids,
            client_ids,
            unused_ids: ids[needed..].to_vec(),
            train_per_id,
            eval_per_id: per_id - train_per_id,
        },
        global_train,
        global_eval,
        clients: client_data,
    })
}

/// Stacks sample inputs into an `n×input_dim` matrix.
pub fn stack<T: Scalar>(samples: &[&FaceSample<T>]) -> Result<Matrix<T>> {
    let rows: Vec<&[T]> = samples.iter().map(|s| s.x.as_slice()).collect();
    Matrix::from_rows(&rows)
}

/// Writes samples in the tensor container: inputs, identities, split flags.
pub fn save_dataset<T: Scalar>(path: &Path, samples: &[FaceSample<T>]) -> Result<()> {
    let refs: Vec<&FaceSample<T>> = samples.iter().collect();
    let x = stack(&refs)?;
    let ids = Matrix::from_fn(samples.len(), 1, |r, _| T::of(samples[r].identity as f64));
    let split = Matrix::from_fn(samples.len(), 1, |r, _| match samples[r].split {
        Split::Train => T::zero(),
        Split::Eval => T::one(),
    });
    TensorFile {
        kind: TensorKind::Dataset,
        tensors: vec![x, ids, split],
    }
    .save(path)
}

pub fn load_dataset<T: Scalar>(path: &Path) -> Result<Vec<FaceSample<T>>> {
    let file = TensorFile::<T>::load(path)?;
    if file.kind != TensorKind::Dataset || file.tensors.len() != 3 {
        return Err(Error::MalformedHeader("not a dataset file".into()));
    }
    let (x, ids, split) = (&file.tensors[0], &file.tensors[1], &file.tensors[2]);
    if ids.rows() != x.rows() || split.rows() != x.rows() || ids.cols() != 1 || split.cols() != 1 {
        return Err(Error::MalformedHeader("dataset columns disagree".into()));
    }
    Ok((0..x.rows())
        .map(|r| FaceSample {
            x: x.row(r).to_vec(),
            identity: ids.get(r, 0).widen() as usize,
            split: if split.get(r, 0) == T::zero() { Split::Train } else { Split::Eval },
        })
        .collect())
}
