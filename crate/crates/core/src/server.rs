//! Federation orchestration: pre-training, broadcast, local rounds, aggregation.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::client::{select_hard_negatives, ClientState, RoundStats, SharedSample, UploadPayload};
use crate::config::ExperimentConfig;
use crate::data::FederatedData;
use crate::error::{Error, Result};
use crate::eval::{generic_eval, personalized_eval, FeatureModel, MetricSet};
use crate::losses::{record_cosface, LossConfig};
use crate::model::{BackboneParams, ClassEmbeddings, ProxyRole};
use crate::rng::{stream, tags};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tape};

/// `(1/N)·Σ N_l·x_l` over same-shaped tensors, accumulated as a running mean
/// in slice order so that identical inputs come back bit-exact.
fn weighted_mean<T: Scalar>(items: &[(Vec<&Matrix<T>>, usize)]) -> Result<Vec<Matrix<T>>> {
    let (first, _) = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to aggregate".into()))?;
    let total: usize = items.iter().map(|i| i.1).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("aggregation weights sum to zero".into()));
    }
    for (tensors, _) in items {
        let compatible = tensors.len() == first.len()
            && tensors.iter().zip(first).all(|(a, b)| a.shape() == b.shape());
        if !compatible {
            return Err(Error::dims(
                "fedavg",
                format!(
                    "payload shapes {:?} vs {:?}",
                    tensors.iter().map(|t| t.shape()).collect::<Vec<_>>(),
                    first.iter().map(|t| t.shape()).collect::<Vec<_>>()
                ),
            ));
        }
    }
    let live: Vec<_> = items.iter().filter(|i| i.1 > 0).collect();
    let mut acc: Vec<Matrix<T>> = live[0].0.iter().map(|t| (*t).clone()).collect();
    let mut seen = live[0].1;
    for (tensors, n) in &live[1..] {
        seen += n;
        let w = T::of(*n as f64 / seen as f64);
        for (a, t) in acc.iter_mut().zip(tensors) {
            for (av, &tv) in a.as_mut_slice().iter_mut().zip(t.as_slice()) {
                *av += w * (tv - *av);
            }
        }
    }
    Ok(acc)
}

/// Sample-weighted mean of client backbones.
pub fn fedavg_backbones<T: Scalar>(payloads: &[(&BackboneParams<T>, usize)]) -> Result<BackboneParams<T>> {
    let items: Vec<_> = payloads.iter().map(|(b, n)| (b.tensors(), *n)).collect();
    let mean = weighted_mean(&items)?;
    let mut out = payloads[0].0.clone();
    for (t, m) in out.tensors_mut().into_iter().zip(mean) {
        *t = m;
    }
    Ok(out)
}

/// Sample-weighted mean of the shared proxies; every payload must have the same column count.
pub fn fedavg_proxies<T: Scalar>(payloads: &[(&ClassEmbeddings<T>, usize)]) -> Result<ClassEmbeddings<T>> {
    let items: Vec<_> = payloads.iter().map(|(p, n)| (vec![p.matrix()], *n)).collect();
    let mut mean = weighted_mean(&items)?;
    ClassEmbeddings::new(mean.remove(0), ProxyRole::Global)
}

/// Plain minibatch SGD settings for centralized training.
#[derive(Clone, Debug, PartialEq)]
pub struct CentralSettings {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub loss: LossConfig,
}

/// Centralized Cosface training of a backbone and its proxies. Returns the mean minibatch loss.
pub fn train_cosface<T: Scalar>(
    backbone: &mut BackboneParams<T>,
    proxies: &mut ClassEmbeddings<T>,
    x: &Matrix<T>,
    labels: &[usize],
    settings: &CentralSettings,
    rng: &mut impl Rng,
) -> Result<f64> {
    if x.rows() != labels.len() {
        return Err(Error::dims("train_cosface", format!("{} rows, {} labels", x.rows(), labels.len())));
    }
    if settings.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= proxies.num_classes()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: proxies.num_classes(),
        });
    }
    let lr = T::of(settings.lr);
    let wd = T::of(settings.weight_decay);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let (mut steps, mut loss_sum) = (0usize, 0.0);
    for _ in 0..settings.epochs {
        order.shuffle(rng);
        for batch in order.chunks(settings.batch_size) {
            let mut tape = Tape::new();
            let bb = backbone.record(&mut tape);
            let xv = tape.constant(x.select_rows(batch));
            let f = bb.forward(&mut tape, xv)?;
            let p = tape.leaf(proxies.matrix().clone());
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = record_cosface(&mut tape, f, p, &batch_labels, &settings.loss)?;
            let value = tape.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("central loss at step {steps}")));
            }
            let mut grads = tape.grad(loss)?;
            let vars = bb.vars();
            for (i, (t, v)) in backbone.tensors_mut().into_iter().zip(vars).enumerate() {
                let decay = if i % 2 == 0 { wd } else { T::zero() };
                let g = grads.take(v);
                for (pv, &gv) in t.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *pv -= lr * (gv + decay * *pv);
                }
            }
            let g = grads.take(p);
            for (pv, &gv) in proxies.matrix_mut().as_mut_slice().iter_mut().zip(g.as_slice()) {
                *pv -= lr * (gv + wd * *pv);
            }
            loss_sum += value.widen();
            steps += 1;
        }
    }
    Ok(if steps > 0 { loss_sum / steps as f64 } else { 0.0 })
}

/// Initial global model: drawn from the seed, then trained with Cosface on the shared set.
pub fn pretrain<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &FederatedData<T>,
) -> Result<(BackboneParams<T>, ClassEmbeddings<T>)> {
    let mut rng = stream(cfg.seed, &[tags::INIT]);
    let mut backbone = BackboneParams::init(
        cfg.data.input_dim,
        &cfg.model.hidden_dims,
        cfg.model.embed_dim,
        &mut rng,
    );
    let k_g = data.partition.global_ids.len();
    let mut proxies = ClassEmbeddings::random(cfg.model.embed_dim, k_g, ProxyRole::Global, &mut rng);
    if data.global_train.is_empty() {
        return Ok((backbone, proxies));
    }
    let rows: Vec<&[T]> = data.global_train.iter().map(|s| s.x.as_slice()).collect();
    let labels = data
        .global_train
        .iter()
        .map(|s| {
            data.partition
                .global_label(s.identity)
                .ok_or_else(|| Error::InvalidArgument(format!("identity {} is not shared", s.identity)))
        })
        .collect::<Result<Vec<_>>>()?;
    let settings = CentralSettings {
        epochs: cfg.federation.pretrain_epochs,
        lr: cfg.federation.pretrain_lr,
        weight_decay: cfg.federation.weight_decay,
        batch_size: cfg.federation.batch_size,
        loss: cfg.loss.clone(),
    };
    let mut rng = stream(cfg.seed, &[tags::PRETRAIN]);
    train_cosface(&mut backbone, &mut proxies, &Matrix::from_rows(&rows)?, &labels, &settings, &mut rng)?;
    Ok((backbone, proxies))
}

/// Server-side view between rounds.
#[derive(Clone, Debug)]
pub struct FederationState<T> {
    /// Rounds completed.
    pub round: usize,
    pub global_backbone: BackboneParams<T>,
    pub global_proxies: ClassEmbeddings<T>,
    pub clients: Vec<ClientState<T>>,
    pub total_samples: usize,
}

impl<T: Scalar> FederationState<T> {
    pub fn new(
        cfg: &ExperimentConfig,
        data: &FederatedData<T>,
        backbone: BackboneParams<T>,
        proxies: ClassEmbeddings<T>,
    ) -> Result<Self> {
        let clients = data
            .clients
            .iter()
            .map(|c| {
                ClientState::new(
                    c.clone(),
                    &backbone,
                    &proxies,
                    cfg.model.dfc_dim,
                    cfg.local_settings(),
                    cfg.seed,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let total_samples = clients.iter().map(|c| c.data.train.len()).sum();
        Ok(FederationState {
            round: 0,
            global_backbone: backbone,
            global_proxies: proxies,
            clients,
            total_samples,
        })
    }

    /// The feature space each client uses for personalized evaluation.
    pub fn personal_models(&self, use_dfc: bool) -> Vec<FeatureModel<'_, T>> {
        self.clients
            .iter()
            .map(|c| {
                if use_dfc {
                    FeatureModel::WithBranch(&c.backbone, &c.dfc)
                } else {
                    FeatureModel::Backbone(&c.backbone)
                }
            })
            .collect()
    }
}

/// Metrics and bookkeeping for one completed round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    /// 1-based index of the round.
    pub round: usize,
    pub generic: MetricSet,
    pub personalized: MetricSet,
    pub hard_negatives: Vec<usize>,
    pub client_stats: Vec<RoundStats>,
}

/// Handed to the observer after each aggregation.
pub struct RoundEvent<'a, T> {
    pub round: usize,
    /// Uploads in ascending client order.
    pub payloads: &'a [UploadPayload<T>],
    pub state: &'a FederationState<T>,
    pub record: &'a RoundRecord,
}

/// Shared samples lent to each client for the coming round.
pub fn shared_sets<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &FederatedData<T>,
    theta_g: &BackboneParams<T>,
    t_hn: f64,
) -> Result<Vec<Vec<usize>>> {
    data.clients
        .iter()
        .map(|c| {
            if !cfg.ablation.use_shared_data {
                Ok(Vec::new())
            } else if cfg.ablation.use_hard_negatives {
                select_hard_negatives(&data.global_train, &c.train, theta_g, t_hn)
            } else {
                Ok((0..data.global_train.len()).collect())
            }
        })
        .collect()
}

/// Runs `cfg.federation.rounds` rounds from the given initial model.
/// `threads = 0` lets the pool pick its width.
pub fn run_federation<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &FederatedData<T>,
    backbone: BackboneParams<T>,
    proxies: ClassEmbeddings<T>,
    threads: usize,
    observer: &mut dyn FnMut(&RoundEvent<'_, T>) -> Result<()>,
) -> Result<(FederationState<T>, Vec<RoundRecord>)> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let mut state = FederationState::new(cfg, data, backbone, proxies)?;
    let global_labels: Vec<usize> = data
        .global_train
        .iter()
        .map(|s| data.partition.global_label(s.identity).unwrap_or(usize::MAX))
        .collect();
    let mut history = Vec::with_capacity(cfg.federation.rounds);

    for t in 0..cfg.federation.rounds {
        let sets = shared_sets(cfg, data, &state.global_backbone, cfg.federation.t_hn)?;
        let theta_g = &state.global_backbone;
        let phi_g = &state.global_proxies;
        let stats: Vec<RoundStats> = pool.install(|| {
            state
                .clients
                .par_iter_mut()
                .zip(sets.par_iter())
                .map(|(client, set)| {
                    let shared: Vec<SharedSample<'_, T>> = set
                        .iter()
                        .map(|&i| SharedSample {
                            x: &data.global_train[i].x,
                            label: global_labels[i],
                        })
                        .collect();
                    client
                        .local_train_round(theta_g, phi_g, &shared, t, cfg.seed)
                        .map_err(|e| Error::ClientFailure {
                            round: t,
                            client: client.id,
                            source: Box::new(e),
                        })
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut payloads: Vec<UploadPayload<T>> = state.clients.iter().map(|c| c.upload_payload()).collect();
        let mut order: Vec<usize> = (0..payloads.len()).collect();
        order.sort_by_key(|&i| state.clients[i].id);
        payloads = order.iter().map(|&i| payloads[i].clone()).collect();
        let backbones: Vec<_> = payloads.iter().map(|p| (&p.backbone, p.sample_count)).collect();
        let proxies: Vec<_> = payloads.iter().map(|p| (&p.shared_proxies, p.sample_count)).collect();
        state.global_backbone = fedavg_backbones(&backbones)?;
        state.global_proxies = fedavg_proxies(&proxies)?;
        state.round = t + 1;

        let record = RoundRecord {
            round: t + 1,
            generic: evaluate_generic(cfg, data, &state.global_backbone)?,
            personalized: personalized_eval(
                &state.personal_models(cfg.ablation.use_dfc),
                data,
                &cfg.eval.far_levels,
                &cfg.eval.fpir_levels,
                cfg.eval.imposter_cap,
                cfg.seed,
            )?
            .mean,
            hard_negatives: sets.iter().map(Vec::len).collect(),
            client_stats: stats,
        };
        observer(&RoundEvent {
            round: t + 1,
            payloads: &payloads,
            state: &state,
            record: &record,
        })?;
        history.push(record);
    }
    Ok((state, history))
}

/// Generic metrics of a backbone on the held-out shared identities.
/// Without shared identities every level is unsupported.
pub fn evaluate_generic<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &FederatedData<T>,
    backbone: &BackboneParams<T>,
) -> Result<MetricSet> {
    if data.global_eval.is_empty() {
        return Ok(MetricSet::unsupported(&cfg.eval.far_levels, &cfg.eval.fpir_levels));
    }
    generic_eval(backbone, &data.global_eval, &cfg.eval.far_levels, &cfg.eval.fpir_levels)
}
