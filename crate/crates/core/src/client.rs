//! One federated client: hard-negative selection, local rounds, uploads.

use rand::seq::SliceRandom;

use crate::data::{ClientData, FaceSample};
use crate::error::{Error, Result};
use crate::losses::{record_bce, record_contrastive, record_cosface, LossConfig};
use crate::model::{BackboneParams, ClassEmbeddings, DfcBranch, ProxyRole};
use crate::rng::{stream, tags};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tape};

/// Optimizer and objective settings for a local round.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalSettings {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub loss: LossConfig,
    /// Train the shared proxies jointly with the private ones.
    pub use_shared_data: bool,
    pub use_contrastive: bool,
    pub use_dfc: bool,
}

impl Default for LocalSettings {
    fn default() -> Self {
        LocalSettings {
            epochs: 4,
            lr: 0.05,
            weight_decay: 5e-4,
            batch_size: 32,
            loss: LossConfig::default(),
            use_shared_data: true,
            use_contrastive: true,
            use_dfc: true,
        }
    }
}

/// A shared sample lent to a client for its round, with its global label.
#[derive(Clone, Copy, Debug)]
pub struct SharedSample<'a, T> {
    pub x: &'a [T],
    pub label: usize,
}

/// What a client may send to the server.
#[derive(Clone, Debug, PartialEq)]
pub struct UploadPayload<T> {
    pub backbone: BackboneParams<T>,
    pub shared_proxies: ClassEmbeddings<T>,
    pub sample_count: usize,
}

/// Kind of each payload field, listed by exhaustive destructuring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PayloadField {
    BackboneWeight { layer: usize },
    BackboneBias { layer: usize },
    SharedProxies { columns: usize },
    SampleCount,
}

impl<T: Scalar> UploadPayload<T> {
    pub fn field_inventory(&self) -> Vec<PayloadField> {
        let UploadPayload {
            backbone,
            shared_proxies,
            sample_count: _,
        } = self;
        let mut fields = Vec::new();
        for layer in 0..backbone.layers().len() {
            fields.push(PayloadField::BackboneWeight { layer });
            fields.push(PayloadField::BackboneBias { layer });
        }
        fields.push(PayloadField::SharedProxies {
            columns: shared_proxies.num_classes(),
        });
        fields.push(PayloadField::SampleCount);
        fields
    }

    /// Little-endian wire form: count, then every backbone tensor, then `Φ`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = (self.sample_count as u64).to_le_bytes().to_vec();
        let mut tensors = self.backbone.tensors();
        tensors.push(self.shared_proxies.matrix());
        for t in tensors {
            out.extend((t.rows() as u64).to_le_bytes());
            out.extend((t.cols() as u64).to_le_bytes());
            for v in t.as_slice() {
                out.extend(v.widen().to_le_bytes());
            }
        }
        out
    }
}

/// Unit-norm embeddings of `samples` under `backbone`.
fn unit_features<T: Scalar>(backbone: &BackboneParams<T>, samples: &[&[T]]) -> Result<Matrix<T>> {
    backbone.embed_batch(&Matrix::from_rows(samples)?)?.normalize_rows()
}

/// Indices of global samples whose best cosine to any local sample exceeds `t_hn`.
pub fn select_hard_negatives<T: Scalar>(
    global: &[FaceSample<T>],
    local: &[FaceSample<T>],
    theta_g: &BackboneParams<T>,
    t_hn: f64,
) -> Result<Vec<usize>> {
    if local.is_empty() {
        return Err(Error::InvalidArgument("hard-negative selection needs local samples".into()));
    }
    if !(t_hn > -1.0 && t_hn < 1.0) {
        return Err(Error::InvalidArgument(format!("t_HN must lie in (-1, 1), got {t_hn}")));
    }
    if global.is_empty() {
        return Ok(Vec::new());
    }
    let g = unit_features(theta_g, &global.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>())?;
    let l = unit_features(theta_g, &local.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>())?;
    let sims = g.matmul_t(&l)?;
    Ok((0..sims.rows())
        .filter(|&r| sims.row(r).iter().any(|&s| s.widen() > t_hn))
        .collect())
}

/// Summary of one local round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundStats {
    pub steps: usize,
    pub mean_loss: f64,
    pub hard_negatives: usize,
}

#[derive(Clone, Debug)]
pub struct ClientState<T> {
    pub id: usize,
    pub data: ClientData<T>,
    pub private_proxies: ClassEmbeddings<T>,
    pub dfc: DfcBranch<T>,
    /// Backbone held at the end of the previous round.
    pub prev_backbone: Option<BackboneParams<T>>,
    pub backbone: BackboneParams<T>,
    pub shared_proxies: ClassEmbeddings<T>,
    pub settings: LocalSettings,
    pub rounds_completed: usize,
}

#[derive(Clone, Copy)]
enum Item {
    Local(usize),
    Shared(usize),
}

impl<T: Scalar> ClientState<T> {
    /// Fresh client holding the broadcast model and newly drawn private parameters.
    pub fn new(
        data: ClientData<T>,
        theta_g: &BackboneParams<T>,
        phi_g: &ClassEmbeddings<T>,
        dfc_dim: usize,
        settings: LocalSettings,
        seed: u64,
    ) -> Result<Self> {
        if data.train.is_empty() || data.identities.is_empty() {
            return Err(Error::InvalidArgument(format!("client {} has no local data", data.id)));
        }
        let mut rng = stream(seed, &[tags::CLIENT_INIT, data.id as u64]);
        let d = theta_g.embed_dim();
        let k_l = data.identities.len();
        let private_proxies = ClassEmbeddings::random(d, k_l, ProxyRole::Local, &mut rng);
        let dfc = DfcBranch::init(d, dfc_dim, k_l, &mut rng);
        Ok(ClientState {
            id: data.id,
            data,
            private_proxies,
            dfc,
            prev_backbone: None,
            backbone: theta_g.clone(),
            shared_proxies: phi_g.clone(),
            settings,
            rounds_completed: 0,
        })
    }

    pub fn local_classes(&self) -> usize {
        self.private_proxies.num_classes()
    }

    /// Runs `settings.epochs` epochs of minibatch SGD from the broadcast model
    /// over the local training set and the lent `shared` samples.
    pub fn local_train_round(
        &mut self,
        theta_g: &BackboneParams<T>,
        phi_g: &ClassEmbeddings<T>,
        shared: &[SharedSample<'_, T>],
        round: usize,
        seed: u64,
    ) -> Result<RoundStats> {
        let cfg = self.settings.clone();
        if self.data.train.is_empty() {
            return Err(Error::InvalidArgument(format!("client {} has no local data", self.id)));
        }
        if cfg.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        self.backbone = theta_g.clone();
        self.shared_proxies = phi_g.clone();
        let k_g = phi_g.num_classes();

        let mut items: Vec<Item> = (0..self.data.train.len()).map(Item::Local).collect();
        items.extend((0..shared.len()).map(Item::Shared));
        let local_labels: Vec<usize> = self
            .data
            .train
            .iter()
            .map(|s| {
                self.data.local_label(s.identity).ok_or_else(|| {
                    Error::InvalidArgument(format!("identity {} not registered at client {}", s.identity, self.id))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(s) = shared.iter().find(|s| s.label >= k_g) {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes: k_g,
            });
        }
        if !cfg.use_shared_data && !shared.is_empty() {
            return Err(Error::InvalidArgument("shared samples given with shared data disabled".into()));
        }
        let input = |it: Item| -> &[T] {
            match it {
                Item::Local(i) => &self.data.train[i].x,
                Item::Shared(i) => shared[i].x,
            }
        };
        let all_x: Vec<&[T]> = items.iter().map(|&it| input(it)).collect();
        let all_x = Matrix::from_rows(&all_x)?;

        let (glob, prev) = if cfg.use_contrastive {
            let glob = theta_g.embed_batch(&all_x)?;
            let prev = match &self.prev_backbone {
                Some(p) => p.embed_batch(&all_x)?,
                None => glob.clone(),
            };
            (Some(glob), Some(prev))
        } else {
            (None, None)
        };

        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = stream(seed, &[tags::CLIENT_ROUND, round as u64, self.id as u64]);
        let mut steps = 0;
        let mut loss_sum = 0.0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let x = all_x.select_rows(batch);
                let cos_labels: Vec<usize> = batch
                    .iter()
                    .map(|&b| match items[b] {
                        Item::Local(i) => local_labels[i] + if cfg.use_shared_data { k_g } else { 0 },
                        Item::Shared(i) => shared[i].label,
                    })
                    .collect();
                let bin_labels: Vec<Option<usize>> = batch
                    .iter()
                    .map(|&b| match items[b] {
                        Item::Local(i) => Some(local_labels[i]),
                        Item::Shared(_) => None,
                    })
                    .collect();
                let glob_b = glob.as_ref().map(|g| g.select_rows(batch));
                let prev_b = prev.as_ref().map(|p| p.select_rows(batch));
                let loss = self
                    .sgd_step(&x, &cos_labels, &bin_labels, glob_b.as_ref().zip(prev_b.as_ref()), &cfg)
                    .map_err(|e| match e {
                        Error::NonFinite(what) => Error::NonFinite(format!(
                            "{what} at client {} round {round} step {steps}",
                            self.id
                        )),
                        other => other,
                    })?;
                loss_sum += loss;
                steps += 1;
            }
        }
        self.prev_backbone = Some(self.backbone.clone());
        self.rounds_completed += 1;
        Ok(RoundStats {
            steps,
            mean_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            hard_negatives: shared.len(),
        })
    }

    /// One SGD step on a minibatch; returns the loss before the update.
    fn sgd_step(
        &mut self,
        x: &Matrix<T>,
        cos_labels: &[usize],
        bin_labels: &[Option<usize>],
        frozen: Option<(&Matrix<T>, &Matrix<T>)>,
        cfg: &LocalSettings,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bb = self.backbone.record(&mut tape);
        let xv = tape.constant(x.clone());
        let f = bb.forward(&mut tape, xv)?;
        let w = tape.leaf(self.private_proxies.matrix().clone());
        let phi = cfg
            .use_shared_data
            .then(|| tape.leaf(self.shared_proxies.matrix().clone()));
        let proxies = match phi {
            Some(p) => tape.concat_cols(p, w)?,
            None => w,
        };
        let alpha = cfg.loss.alpha;
        let mut terms = vec![(record_cosface(&mut tape, f, proxies, cos_labels, &cfg.loss)?, T::of(alpha[0]))];
        if let Some((glob, prev)) = frozen {
            let con = record_contrastive(&mut tape, f, glob, prev, cfg.loss.tau)?;
            terms.push((con, T::of(alpha[1])));
        }
        let dfc = cfg.use_dfc.then(|| self.dfc.record(&mut tape));
        if let Some(d) = dfc {
            let ft = d.forward(&mut tape, f)?;
            let bce = record_bce(&mut tape, ft, d.binary_weights, d.bias, bin_labels, &cfg.loss)?;
            terms.push((bce, T::of(alpha[2])));
        }
        let total = tape.weighted_sum(&terms)?;
        let loss = tape.value(total).get(0, 0);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss}")));
        }
        let mut grads = tape.grad(total)?;
        let lr = T::of(cfg.lr);
        let wd = T::of(cfg.weight_decay);

        let step = |p: &mut Matrix<T>, g: Matrix<T>, decay: T| {
            for (pv, gv) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *pv -= lr * (*gv + decay * *pv);
            }
        };
        let vars = bb.vars();
        for (i, (t, v)) in self.backbone.tensors_mut().into_iter().zip(vars).enumerate() {
            let decay = if i % 2 == 0 { wd } else { T::zero() };
            step(t, grads.take(v), decay);
        }
        step(self.private_proxies.matrix_mut(), grads.take(w), wd);
        if let Some(p) = phi {
            step(self.shared_proxies.matrix_mut(), grads.take(p), wd);
        }
        if let Some(d) = dfc {
            step(&mut self.dfc.transform, grads.take(d.transform), wd);
            step(&mut self.dfc.transform_bias, grads.take(d.transform_bias), T::zero());
            step(&mut self.dfc.binary_weights, grads.take(d.binary_weights), wd);
            let gb = grads.take(d.bias).get(0, 0);
            self.dfc.bias -= lr * gb;
        }
        let finite = self.backbone.tensors().iter().all(|t| t.is_finite())
            && self.private_proxies.matrix().is_finite()
            && self.shared_proxies.matrix().is_finite()
            && self.dfc.bias.is_finite();
        if !finite {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(loss.widen())
    }

    pub fn upload_payload(&self) -> UploadPayload<T> {
        UploadPayload {
            backbone: self.backbone.clone(),
            shared_proxies: self.shared_proxies.clone(),
            sample_count: self.data.train.len(),
        }
    }
}
