//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use fedfr::data::FaceSample;
use fedfr::model::BackboneParams;
use fedfr::tensor::cosine_similarity;
use rand::Rng;

/// Negatives a level may admit, computed from integer counts.
pub fn allowed(level: f64, n: usize) -> usize {
    (0..=n).rev().find(|&j| j as f64 <= level * n as f64 + 1e-9).unwrap_or(0)
}

/// Tries every observed score (and `+∞`) as a threshold and keeps the lowest
/// one whose accepted negatives stay within budget.
fn sweep(hits: &[f64], total: usize, neg: &[f64], candidates: &[f64], level: f64) -> Option<f64> {
    let k = allowed(level, neg.len());
    if k == 0 || total == 0 {
        return None;
    }
    let mut best = f64::INFINITY;
    for &t in candidates {
        let fa = neg.iter().filter(|&&s| s >= t).count();
        if fa <= k && t < best {
            best = t;
        }
    }
    Some(hits.iter().filter(|&&s| s >= best).count() as f64 / total as f64)
}

pub fn brute_tar(pos: &[f64], neg: &[f64], level: f64) -> Option<f64> {
    let cand: Vec<f64> = pos.iter().chain(neg).copied().collect();
    sweep(pos, pos.len(), neg, &cand, level)
}

pub struct Probe {
    pub feature: Vec<f64>,
    /// `Some(id)` for an enrolled identity, `None` for an imposter.
    pub identity: Option<usize>,
}

/// Open-set identification by double loop over probes and gallery rows.
pub fn brute_tpir(gallery: &[(usize, Vec<f64>)], probes: &[Probe], level: f64) -> Option<f64> {
    let mut best = Vec::new();
    for p in probes {
        let mut top = (f64::NEG_INFINITY, usize::MAX);
        for (id, g) in gallery {
            let mut s = 0.0;
            for k in 0..g.len() {
                s += p.feature[k] * g[k];
            }
            let s = s.clamp(-1.0, 1.0);
            if s > top.0 {
                top = (s, *id);
            }
        }
        best.push(top);
    }
    let cand: Vec<f64> = best.iter().map(|b| b.0).collect();
    let mut hits = Vec::new();
    let mut imposters = Vec::new();
    let mut genuine = 0;
    for (p, &(s, top)) in probes.iter().zip(&best) {
        match p.identity {
            Some(id) => {
                genuine += 1;
                if top == id {
                    hits.push(s);
                }
            }
            None => imposters.push(s),
        }
    }
    sweep(&hits, genuine, &imposters, &cand, level)
}

/// Global indices with any pairwise cosine above `t`, by explicit double loop.
pub fn hard_negatives(global: &[FaceSample<f64>], local: &[FaceSample<f64>], theta: &BackboneParams<f64>, t: f64) -> Vec<usize> {
    let g: Vec<Vec<f64>> = global.iter().map(|s| theta.embed(&s.x).unwrap()).collect();
    let l: Vec<Vec<f64>> = local.iter().map(|s| theta.embed(&s.x).unwrap()).collect();
    let mut out = Vec::new();
    for (i, gi) in g.iter().enumerate() {
        let mut hit = false;
        for lj in &l {
            if cosine_similarity(gi, lj).unwrap() > t {
                hit = true;
            }
        }
        if hit {
            out.push(i);
        }
    }
    out
}

/// `Σ nᵢ·xᵢ / Σ nᵢ` per element.
pub fn weighted_mean(items: &[(Vec<f64>, usize)]) -> Vec<f64> {
    let total: usize = items.iter().map(|i| i.1).sum();
    (0..items[0].0.len())
        .map(|k| items.iter().map(|(x, n)| *n as f64 * x[k]).sum::<f64>() / total as f64)
        .collect()
}

pub fn random_samples(rng: &mut impl Rng, n: usize, dim: usize, identity: usize) -> Vec<FaceSample<f64>> {
    (0..n)
        .map(|_| FaceSample {
            x: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            identity,
            split: fedfr::data::Split::Train,
        })
        .collect()
}

/// Scores drawn from a coarse grid so ties are common.
pub fn grid_scores(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-20..=20) as f64 / 20.0).collect()
}
