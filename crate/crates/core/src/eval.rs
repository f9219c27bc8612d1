//! Verification (1:1) and open-set identification (1:N) metrics.
//!
//! Thresholding convention: a score `≥ threshold` is accepted. For an
//! operating level `ℓ` over `N` negatives, at most `⌊ℓ·N⌋` negatives may be
//! accepted and the threshold is the smallest observed score meeting that
//! bound (`+∞` if none does). Levels with `⌊ℓ·N⌋ = 0` are reported as
//! unsupported rather than extrapolated.

use rand::seq::index::sample;

use crate::data::{FaceSample, FederatedData};
use crate::error::{Error, Result};
use crate::model::{BackboneParams, DfcBranch};
use crate::rng::{stream, tags};
use crate::scalar::Scalar;
use crate::tensor::{dot, l2_normalize, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct OperatingPoint {
    pub level: f64,
    /// Achieved TAR/TPIR; `None` when the level is unsupported.
    pub rate: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricCurve {
    pub points: Vec<OperatingPoint>,
}

impl MetricCurve {
    pub fn at(&self, level: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| (p.level - level).abs() <= 1e-12 * level.abs().max(1.0))
            .and_then(|p| p.rate)
    }
}

/// Largest number of negatives a level admits.
pub fn admitted_negatives(level: f64, negatives: usize) -> usize {
    (level * negatives as f64 * (1.0 + 1e-12)).floor() as usize
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
        return Err(Error::InvalidArgument(format!("levels must lie in (0, 1]: {levels:?}")));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("levels must be strictly increasing: {levels:?}")));
    }
    Ok(())
}

/// Sweeps thresholds over `candidates`. `accepted` are the scores counted as
/// true positives; the rate is normalized by `positives`.
fn curve(accepted: &[f64], positives: usize, negatives: &[f64], candidates: &[f64], levels: &[f64]) -> Result<MetricCurve> {
    check_levels(levels)?;
    let mut neg = negatives.to_vec();
    neg.sort_by(|a, b| b.total_cmp(a));
    let mut cand = candidates.to_vec();
    cand.sort_by(f64::total_cmp);
    let mut acc = accepted.to_vec();
    acc.sort_by(f64::total_cmp);

    let points = levels
        .iter()
        .map(|&level| {
            let k = admitted_negatives(level, neg.len());
            if k == 0 || positives == 0 {
                return OperatingPoint {
                    level,
                    rate: None,
                    threshold: None,
                };
            }
            let threshold = if k >= neg.len() {
                cand.first().copied().unwrap_or(f64::INFINITY)
            } else {
                let bar = neg[k];
                let i = cand.partition_point(|&c| c <= bar);
                cand.get(i).copied().unwrap_or(f64::INFINITY)
            };
            let below = acc.partition_point(|&s| s < threshold);
            OperatingPoint {
                level,
                rate: Some((acc.len() - below) as f64 / positives as f64),
                threshold: Some(threshold),
            }
        })
        .collect();
    Ok(MetricCurve { points })
}

/// True acceptance rate of genuine pairs at each false acceptance rate.
pub fn tar_at_far(pos: &[f64], neg: &[f64], far_levels: &[f64]) -> Result<MetricCurve> {
    if pos.is_empty() {
        return Err(Error::InvalidArgument("no genuine scores".into()));
    }
    let mut cand = pos.to_vec();
    cand.extend_from_slice(neg);
    curve(pos, pos.len(), neg, &cand, far_levels)
}

/// Pairs of feature-table indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerificationProtocol {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

impl VerificationProtocol {
    /// All unordered same-identity pairs as positives and cross-identity pairs as negatives.
    pub fn all_pairs(identities: &[usize]) -> Self {
        let mut p = VerificationProtocol::default();
        for i in 0..identities.len() {
            for j in i + 1..identities.len() {
                if identities[i] == identities[j] {
                    p.positives.push((i, j));
                } else {
                    p.negatives.push((i, j));
                }
            }
        }
        p
    }

    /// Cosine scores over unit-norm `features`.
    pub fn scores<T: Scalar>(&self, features: &Matrix<T>) -> (Vec<f64>, Vec<f64>) {
        let score = |&(a, b): &(usize, usize)| clamp_cos(dot(features.row(a), features.row(b)));
        (
            self.positives.iter().map(score).collect(),
            self.negatives.iter().map(score).collect(),
        )
    }
}

fn clamp_cos<T: Scalar>(c: T) -> f64 {
    c.widen().clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeLabel {
    Genuine(usize),
    Imposter,
}

/// Gallery of enrolled identities and labeled probes (indices into a feature table).
#[derive(Clone, Debug)]
pub struct IdentificationProtocol<T> {
    pub gallery_ids: Vec<usize>,
    /// `|gallery|×d`, unit rows.
    pub gallery: Matrix<T>,
    pub probes: Vec<(usize, ProbeLabel)>,
}

impl<T: Scalar> IdentificationProtocol<T> {
    /// Gallery entry per identity from the normalized mean of its enrollment features.
    pub fn enroll(enrollment: &[(usize, &[T])], probes: Vec<(usize, ProbeLabel)>) -> Result<Self> {
        let mut ids: Vec<usize> = enrollment.iter().map(|e| e.0).collect();
        ids.sort_unstable();
        ids.dedup();
        let dim = enrollment
            .first()
            .map(|e| e.1.len())
            .ok_or_else(|| Error::InvalidArgument("empty enrollment".into()))?;
        let mut rows = Vec::with_capacity(ids.len());
        for &id in &ids {
            let mut sum = vec![T::zero(); dim];
            for (_, f) in enrollment.iter().filter(|e| e.0 == id) {
                for (s, &v) in sum.iter_mut().zip(f.iter()) {
                    *s += v;
                }
            }
            rows.push(l2_normalize(&sum)?);
        }
        Ok(IdentificationProtocol {
            gallery_ids: ids,
            gallery: Matrix::from_rows(&rows)?,
            probes,
        })
    }

    /// Best gallery match `(score, identity)` for each probe; ties go to the earlier entry.
    pub fn best_matches(&self, features: &Matrix<T>) -> Vec<(f64, usize)> {
        self.probes
            .iter()
            .map(|&(idx, _)| {
                let f = features.row(idx);
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for (g, &id) in self.gallery_ids.iter().enumerate() {
                    let s = clamp_cos(dot(f, self.gallery.row(g)));
                    if s > best.0 {
                        best = (s, id);
                    }
                }
                best
            })
            .collect()
    }
}

/// Open-set identification result.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentificationResult {
    pub curve: MetricCurve,
    /// Closed-set rank-1 accuracy over genuine probes.
    pub rank1: f64,
}

/// TPIR at each FPIR: a genuine probe counts only if accepted and its top-1
/// match is correct; FPIR is the fraction of imposter probes accepted.
pub fn tpir_at_fpir<T: Scalar>(
    protocol: &IdentificationProtocol<T>,
    features: &Matrix<T>,
    fpir_levels: &[f64],
) -> Result<IdentificationResult> {
    let matches = protocol.best_matches(features);
    let mut accepted = Vec::new();
    let mut imposters = Vec::new();
    let mut genuine = 0usize;
    let mut candidates = Vec::with_capacity(matches.len());
    for (&(_, label), &(score, top)) in protocol.probes.iter().zip(&matches) {
        candidates.push(score);
        match label {
            ProbeLabel::Genuine(id) => {
                genuine += 1;
                if top == id {
                    accepted.push(score);
                }
            }
            ProbeLabel::Imposter => imposters.push(score),
        }
    }
    if genuine == 0 {
        return Err(Error::InvalidArgument("no genuine probes".into()));
    }
    let rank1 = accepted.len() as f64 / genuine as f64;
    Ok(IdentificationResult {
        curve: curve(&accepted, genuine, &imposters, &candidates, fpir_levels)?,
        rank1,
    })
}

/// Both curves for one feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSet {
    pub tar: MetricCurve,
    pub tpir: MetricCurve,
    pub rank1: f64,
    /// Imposter pairs actually scored (after any cap).
    pub imposter_pairs: usize,
}

impl MetricSet {
    /// Every level unsupported; used when there is nothing to evaluate on.
    pub fn unsupported(far_levels: &[f64], fpir_levels: &[f64]) -> Self {
        let none = |levels: &[f64]| MetricCurve {
            points: levels
                .iter()
                .map(|&level| OperatingPoint {
                    level,
                    rate: None,
                    threshold: None,
                })
                .collect(),
        };
        MetricSet {
            tar: none(far_levels),
            tpir: none(fpir_levels),
            rank1: 0.0,
            imposter_pairs: 0,
        }
    }
}

/// How a client maps inputs to the feature space being evaluated.
#[derive(Clone, Copy, Debug)]
pub enum FeatureModel<'a, T> {
    Backbone(&'a BackboneParams<T>),
    WithBranch(&'a BackboneParams<T>, &'a DfcBranch<T>),
}

impl<T: Scalar> FeatureModel<'_, T> {
    /// Unit-norm features, one row per sample.
    pub fn features(&self, samples: &[FaceSample<T>]) -> Result<Matrix<T>> {
        let rows: Vec<&[T]> = samples.iter().map(|s| s.x.as_slice()).collect();
        let x = Matrix::from_rows(&rows)?;
        let f = match self {
            FeatureModel::Backbone(b) => b.embed_batch(&x)?,
            FeatureModel::WithBranch(b, dfc) => dfc.transform_batch(&b.embed_batch(&x)?)?,
        };
        f.normalize_rows()
    }
}

/// Gallery entries enrolled from the first few eval samples per identity.
const GENERIC_GALLERY_SHOTS: usize = 3;

/// Generic protocols over a held-out set: all-pairs verification, and
/// identification with the first half of identities enrolled (first few
/// samples each) and the second half acting as imposters.
pub fn generic_eval<T: Scalar>(
    backbone: &BackboneParams<T>,
    eval: &[FaceSample<T>],
    far_levels: &[f64],
    fpir_levels: &[f64],
) -> Result<MetricSet> {
    let features = FeatureModel::Backbone(backbone).features(eval)?;
    let ids: Vec<usize> = eval.iter().map(|s| s.identity).collect();
    let verification = VerificationProtocol::all_pairs(&ids);
    let (pos, neg) = verification.scores(&features);
    let tar = tar_at_far(&pos, &neg, far_levels)?;

    let mut distinct = ids.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let enrolled = &distinct[..distinct.len().div_ceil(2)];
    let mut enrollment = Vec::new();
    let mut probes = Vec::new();
    for &id in &distinct {
        let idx: Vec<usize> = (0..eval.len()).filter(|&i| ids[i] == id).collect();
        if enrolled.contains(&id) {
            let shots = GENERIC_GALLERY_SHOTS.min(idx.len().saturating_sub(1)).max(1);
            for &i in &idx[..shots] {
                enrollment.push((id, features.row(i)));
            }
            probes.extend(idx[shots..].iter().map(|&i| (i, ProbeLabel::Genuine(id))));
        } else {
            probes.extend(idx.iter().map(|&i| (i, ProbeLabel::Imposter)));
        }
    }
    let ident = IdentificationProtocol::enroll(&enrollment, probes)?;
    let id_result = tpir_at_fpir(&ident, &features, fpir_levels)?;
    Ok(MetricSet {
        tar,
        tpir: id_result.curve,
        rank1: id_result.rank1,
        imposter_pairs: neg.len(),
    })
}

/// Per-client metric sets and their unweighted mean.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonalizedReport {
    pub mean: MetricSet,
    pub per_client: Vec<MetricSet>,
}

/// Personalized protocols, one feature space per client.
///
/// For client `c`: genuine pairs are same-identity pairs among its eval
/// samples; imposter pairs match one of its eval samples with an eval sample
/// of another client (seeded subsample of at most `imposter_cap`). The
/// gallery holds its identities (mean of train features); probes are the eval
/// samples of every client, other clients' samples acting as imposters.
pub fn personalized_eval<T: Scalar>(
    models: &[FeatureModel<'_, T>],
    data: &FederatedData<T>,
    far_levels: &[f64],
    fpir_levels: &[f64],
    imposter_cap: usize,
    seed: u64,
) -> Result<PersonalizedReport> {
    if models.len() != data.clients.len() {
        return Err(Error::dims(
            "personalized_eval",
            format!("{} models for {} clients", models.len(), data.clients.len()),
        ));
    }
    let mut all_eval = Vec::new();
    let mut owner = Vec::new();
    for c in &data.clients {
        if c.eval.is_empty() {
            return Err(Error::InvalidArgument(format!("client {} has no eval samples", c.id)));
        }
        all_eval.extend(c.eval.iter().cloned());
        owner.extend(std::iter::repeat_n(c.id, c.eval.len()));
    }
    let ids: Vec<usize> = all_eval.iter().map(|s| s.identity).collect();

    let mut per_client = Vec::with_capacity(models.len());
    for (client, model) in data.clients.iter().zip(models) {
        let features = model.features(&all_eval)?;
        let own: Vec<usize> = (0..all_eval.len()).filter(|&i| owner[i] == client.id).collect();
        let others: Vec<usize> = (0..all_eval.len()).filter(|&i| owner[i] != client.id).collect();

        let mut protocol = VerificationProtocol::default();
        for (a, &i) in own.iter().enumerate() {
            for &j in &own[a + 1..] {
                if ids[i] == ids[j] {
                    protocol.positives.push((i, j));
                }
            }
        }
        let total = own.len() * others.len();
        let picks: Vec<usize> = if total > imposter_cap {
            let mut rng = stream(seed, &[tags::EVAL, client.id as u64]);
            let mut v = sample(&mut rng, total, imposter_cap).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..total).collect()
        };
        protocol.negatives = picks
            .into_iter()
            .map(|p| (own[p / others.len()], others[p % others.len()]))
            .collect();
        let (pos, neg) = protocol.scores(&features);
        let tar = tar_at_far(&pos, &neg, far_levels)?;

        let train_features = model.features(&client.train)?;
        let enrollment: Vec<(usize, &[T])> = client
            .train
            .iter()
            .enumerate()
            .map(|(r, s)| (s.identity, train_features.row(r)))
            .collect();
        let probes = (0..all_eval.len())
            .map(|i| {
                let label = if owner[i] == client.id {
                    ProbeLabel::Genuine(ids[i])
                } else {
                    ProbeLabel::Imposter
                };
                (i, label)
            })
            .collect();
        let ident = IdentificationProtocol::enroll(&enrollment, probes)?;
        let id_result = tpir_at_fpir(&ident, &features, fpir_levels)?;
        per_client.push(MetricSet {
            tar,
            tpir: id_result.curve,
            rank1: id_result.rank1,
            imposter_pairs: neg.len(),
        });
    }
    Ok(PersonalizedReport {
        mean: mean_metrics(&per_client),
        per_client,
    })
}

fn mean_curve(curves: &[&MetricCurve]) -> MetricCurve {
    let Some(first) = curves.first() else {
        return MetricCurve::default();
    };
    let points = first
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let rates: Option<Vec<f64>> = curves.iter().map(|c| c.points[i].rate).collect();
            OperatingPoint {
                level: p.level,
                rate: rates.map(|r| r.iter().sum::<f64>() / r.len() as f64),
                threshold: None,
            }
        })
        .collect();
    MetricCurve { points }
}

/// Unweighted mean across clients. A level is unsupported in the mean if any
/// client could not support it.
pub fn mean_metrics(sets: &[MetricSet]) -> MetricSet {
    let n = sets.len().max(1) as f64;
    MetricSet {
        tar: mean_curve(&sets.iter().map(|s| &s.tar).collect::<Vec<_>>()),
        tpir: mean_curve(&sets.iter().map(|s| &s.tpir).collect::<Vec<_>>()),
        rank1: sets.iter().map(|s| s.rank1).sum::<f64>() / n,
        imposter_pairs: sets.iter().map(|s| s.imposter_pairs).sum(),
    }
}
