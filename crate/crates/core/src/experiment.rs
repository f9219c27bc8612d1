//! End-to-end experiments: single runs, the ablation ladder, threshold sweeps,
//! and their metrics tables.

use std::fmt::Write as _;
use std::path::Path;

use crate::client::UploadPayload;
use crate::config::{AblationFlags, ExperimentConfig};
use crate::data::{generate_identities, partition, FederatedData};
use crate::error::{Error, Result};
use crate::eval::{personalized_eval, FeatureModel, MetricCurve, MetricSet};
use crate::model::{BackboneParams, ClassEmbeddings, ClientCheckpoint, GlobalCheckpoint, ProxyRole};
use crate::rng::{stream, tags};
use crate::server::{
    evaluate_generic, pretrain, run_federation, shared_sets, train_cosface, CentralSettings, FederationState,
    RoundEvent, RoundRecord,
};
use crate::tensor::Matrix;
use crate::{Backbone, Proxies, Real};

pub fn build_data(cfg: &ExperimentConfig) -> Result<FederatedData<Real>> {
    let d = &cfg.data;
    let samples = generate_identities(d.k_total, d.n_per_id, d.input_dim, d.sigma_intra, cfg.seed)?;
    partition(samples, d.k_global, d.clients, d.k_local, d.train_fraction)
}

/// Everything a single federated run produces.
pub struct RunOutput {
    pub data: FederatedData<Real>,
    pub pretrained: (Backbone, Proxies),
    pub pretrained_generic: MetricSet,
    pub pretrained_personalized: MetricSet,
    pub state: FederationState<Real>,
    pub history: Vec<RoundRecord>,
}

/// Personalized metrics with every client on the same model.
fn shared_model_personalized(cfg: &ExperimentConfig, data: &FederatedData<Real>, backbone: &Backbone) -> Result<MetricSet> {
    let models = vec![FeatureModel::Backbone(backbone); data.clients.len()];
    Ok(personalized_eval(
        &models,
        data,
        &cfg.eval.far_levels,
        &cfg.eval.fpir_levels,
        cfg.eval.imposter_cap,
        cfg.seed,
    )?
    .mean)
}

/// Pre-trains (or reuses `pretrained`) and federates.
pub fn run_with(
    cfg: &ExperimentConfig,
    data: FederatedData<Real>,
    pretrained: Option<(Backbone, Proxies)>,
    threads: usize,
    observer: &mut dyn FnMut(&RoundEvent<'_, Real>) -> Result<()>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let pretrained = match pretrained {
        Some(p) => p,
        None => pretrain(cfg, &data)?,
    };
    let pretrained_generic = evaluate_generic(cfg, &data, &pretrained.0)?;
    let pretrained_personalized = shared_model_personalized(cfg, &data, &pretrained.0)?;
    let (state, history) = run_federation(
        cfg,
        &data,
        pretrained.0.clone(),
        pretrained.1.clone(),
        threads,
        observer,
    )?;
    Ok(RunOutput {
        data,
        pretrained,
        pretrained_generic,
        pretrained_personalized,
        state,
        history,
    })
}

pub fn run(cfg: &ExperimentConfig, threads: usize) -> Result<RunOutput> {
    run_with(cfg, build_data(cfg)?, None, threads, &mut |_| Ok(()))
}

/// Mean personalized metrics of the final run under the three model choices:
/// the global backbone, each client's backbone, and backbone plus branch.
pub struct ModelChoices {
    pub global: MetricSet,
    pub local: MetricSet,
    pub local_with_branch: MetricSet,
}

pub fn model_choices(cfg: &ExperimentConfig, out: &RunOutput) -> Result<ModelChoices> {
    let eval = |models: &[FeatureModel<'_, Real>]| {
        personalized_eval(
            models,
            &out.data,
            &cfg.eval.far_levels,
            &cfg.eval.fpir_levels,
            cfg.eval.imposter_cap,
            cfg.seed,
        )
        .map(|r| r.mean)
    };
    Ok(ModelChoices {
        global: shared_model_personalized(cfg, &out.data, &out.state.global_backbone)?,
        local: eval(&out.state.personal_models(false))?,
        local_with_branch: eval(&out.state.personal_models(true))?,
    })
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub flags: Option<AblationFlags>,
    pub generic: MetricSet,
    pub personalized: MetricSet,
    pub history: Vec<RoundRecord>,
}

/// The flag ladder: baseline, then hard-negative shared data, contrastive, and branch.
pub fn ablation_ladder() -> Vec<(&'static str, AblationFlags)> {
    let base = AblationFlags::baseline();
    let hn = AblationFlags {
        use_shared_data: true,
        use_hard_negatives: true,
        ..base.clone()
    };
    let con = AblationFlags {
        use_contrastive: true,
        ..hn.clone()
    };
    let full = AblationFlags::full();
    vec![("fedavg", base), ("hn", hn), ("contrastive", con), ("full", full)]
}

/// Pre-trained model, the four-step ladder, and a centrally trained upper bound.
pub fn ablate(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let data = build_data(cfg)?;
    let pretrained = pretrain(cfg, &data)?;
    let mut rows = vec![AblationRow {
        name: "pretrained".into(),
        flags: None,
        generic: evaluate_generic(cfg, &data, &pretrained.0)?,
        personalized: shared_model_personalized(cfg, &data, &pretrained.0)?,
        history: Vec::new(),
    }];
    for (name, flags) in ablation_ladder() {
        let mut c = cfg.clone();
        c.ablation = flags.clone();
        let out = run_with(&c, data.clone(), Some(pretrained.clone()), threads, &mut |_| Ok(()))?;
        let last = out
            .history
            .last()
            .map(|r| (r.generic.clone(), r.personalized.clone()))
            .unwrap_or((out.pretrained_generic.clone(), out.pretrained_personalized.clone()));
        rows.push(AblationRow {
            name: name.into(),
            flags: Some(flags),
            generic: last.0,
            personalized: last.1,
            history: out.history,
        });
    }
    let central = central_upper_bound(cfg, &data)?;
    rows.push(AblationRow {
        name: "central".into(),
        flags: None,
        generic: evaluate_generic(cfg, &data, &central)?,
        personalized: shared_model_personalized(cfg, &data, &central)?,
        history: Vec::new(),
    });
    Ok(rows)
}

/// Backbone trained on the pooled training data of every identity from the same initialization.
pub fn central_upper_bound(cfg: &ExperimentConfig, data: &FederatedData<Real>) -> Result<Backbone> {
    let mut rng = stream(cfg.seed, &[tags::INIT]);
    let mut backbone = BackboneParams::init(cfg.data.input_dim, &cfg.model.hidden_dims, cfg.model.embed_dim, &mut rng);
    let mut ids: Vec<usize> = data.partition.global_ids.clone();
    ids.extend(data.partition.client_ids.iter().flatten());
    let samples = data.all_train();
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| ids.iter().position(|&i| i == s.identity).expect("identity registered"))
        .collect();
    let mut proxies = ClassEmbeddings::random(cfg.model.embed_dim, ids.len(), ProxyRole::Global, &mut rng);
    let rows: Vec<&[Real]> = samples.iter().map(|s| s.x.as_slice()).collect();
    let settings = CentralSettings {
        epochs: cfg.federation.pretrain_epochs,
        lr: cfg.federation.pretrain_lr,
        weight_decay: cfg.federation.weight_decay,
        batch_size: cfg.federation.batch_size,
        loss: cfg.loss.clone(),
    };
    let mut rng = stream(cfg.seed, &[tags::PRETRAIN, 1]);
    train_cosface(&mut backbone, &mut proxies, &Matrix::from_rows(&rows)?, &labels, &settings, &mut rng)?;
    Ok(backbone)
}

/// One row of the hard-negative threshold sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub t_hn: f64,
    /// Hard negatives selected across all clients against the pre-trained model.
    pub hard_negatives: usize,
    /// Generic TAR at the first configured FAR level after the run.
    pub generic: MetricSet,
}

pub fn hn_sweep(cfg: &ExperimentConfig, thresholds: &[f64], threads: usize) -> Result<Vec<SweepRow>> {
    let mut c = cfg.clone();
    c.ablation.use_shared_data = true;
    c.ablation.use_hard_negatives = true;
    c.validate()?;
    let data = build_data(&c)?;
    let pretrained = pretrain(&c, &data)?;
    thresholds
        .iter()
        .map(|&t| {
            let mut ct = c.clone();
            ct.federation.t_hn = t;
            ct.validate()?;
            let sets = shared_sets(&ct, &data, &pretrained.0, t)?;
            let out = run_with(&ct, data.clone(), Some(pretrained.clone()), threads, &mut |_| Ok(()))?;
            let generic = out.history.last().map(|r| r.generic.clone()).unwrap_or(out.pretrained_generic);
            Ok(SweepRow {
                t_hn: t,
                hard_negatives: sets.iter().map(Vec::len).sum(),
                generic,
            })
        })
        .collect()
}

/// Header of every metrics table.
pub const CSV_HEADER: &str = "run_id,config_hash,seed,round,scope,metric,level,value,threshold";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Accumulates metrics rows in emission order.
pub struct MetricsTable {
    hash: String,
    seed: u64,
    out: String,
}

impl MetricsTable {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        MetricsTable {
            hash: cfg.hash(),
            seed: cfg.seed,
            out: format!("{CSV_HEADER}\n"),
        }
    }

    fn row(&mut self, run_id: &str, round: usize, scope: &str, metric: &str, level: &str, value: &str, threshold: &str) {
        let _ = writeln!(
            self.out,
            "{run_id},{},{},{round},{scope},{metric},{level},{value},{threshold}",
            self.hash, self.seed
        );
    }

    fn curve(&mut self, run_id: &str, round: usize, scope: &str, metric: &str, c: &MetricCurve) {
        for p in &c.points {
            let level = p.level.to_string();
            self.row(run_id, round, scope, metric, &level, &opt(p.rate), &opt(p.threshold));
        }
    }

    /// Rows for one metric set: both curves, rank-1 accuracy and the scored imposter-pair count.
    pub fn metric_set(&mut self, run_id: &str, round: usize, scope: &str, m: &MetricSet) {
        self.curve(run_id, round, scope, "tar", &m.tar);
        self.curve(run_id, round, scope, "tpir", &m.tpir);
        self.row(run_id, round, scope, "rank1", "", &m.rank1.to_string(), "");
        self.row(run_id, round, scope, "imposter_pairs", "", &m.imposter_pairs.to_string(), "");
    }

    pub fn hard_negatives(&mut self, run_id: &str, round: usize, count: usize) {
        self.row(run_id, round, "generic", "hard_negatives", "", &count.to_string(), "");
    }

    /// Round 0 is the pre-trained model; rounds 1..=T follow aggregation.
    pub fn run(&mut self, run_id: &str, pre_generic: &MetricSet, pre_personal: &MetricSet, history: &[RoundRecord]) {
        self.metric_set(run_id, 0, "generic", pre_generic);
        self.metric_set(run_id, 0, "personalized", pre_personal);
        for r in history {
            self.metric_set(run_id, r.round, "generic", &r.generic);
            self.metric_set(run_id, r.round, "personalized", &r.personalized);
            self.hard_negatives(run_id, r.round, r.hard_negatives.iter().sum());
        }
    }

    pub fn as_str(&self) -> &str {
        &self.out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.out).map_err(|e| Error::io(path, e))
    }
}

/// Writes the global checkpoint and one checkpoint per client.
pub fn save_checkpoints(dir: &Path, state: &FederationState<Real>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    GlobalCheckpoint {
        backbone: state.global_backbone.clone(),
        proxies: state.global_proxies.clone(),
    }
    .save(&dir.join("global.ckpt"))?;
    for c in &state.clients {
        ClientCheckpoint {
            backbone: c.backbone.clone(),
            shared_proxies: c.shared_proxies.clone(),
            private_proxies: c.private_proxies.clone(),
            dfc: c.dfc.clone(),
        }
        .save(&dir.join(format!("client_{}.ckpt", c.id)))?;
    }
    Ok(())
}

/// Fixed-width text table for terminal output.
pub fn format_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  "));
    };
    line(headers.to_vec(), &mut out);
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

/// Percent with two decimals, or `n/a` for an unsupported level.
pub fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into())
}

/// Keeps the observer signature in one place for callers that only watch uploads.
pub fn payload_observer<'a>(
    mut f: impl FnMut(usize, &[UploadPayload<Real>]) + 'a,
) -> impl FnMut(&RoundEvent<'_, Real>) -> Result<()> + 'a {
    move |e| {
        f(e.round, e.payloads);
        Ok(())
    }
}
