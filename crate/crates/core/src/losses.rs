//! Training objectives.
//!
//! Each objective has a per-sample kernel that returns its value together
//! with the partial derivatives w.r.t. the cosine inputs. The plain functions
//! evaluate a single sample; the `record_*` functions evaluate the minibatch
//! mean on a [`Tape`] so gradients reach every parameter group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassEmbeddings;
use crate::scalar::{log_sum_exp, sigmoid, softplus, Scalar};
use crate::tensor::{cosine_similarity, dot, l2_normalize, Matrix, Tape, Var};

/// Hyperparameters of all four objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Cosface scale `s`.
    pub s: f64,
    /// Cosface additive margin `m`.
    pub m: f64,
    /// Contrastive temperature `τ`.
    pub tau: f64,
    /// Positive/negative balance `λ` of the binary loss.
    pub lambda: f64,
    /// Binary-loss scale `s′`.
    pub s_prime: f64,
    /// Binary-loss cosine margin `m′`.
    pub m_prime: f64,
    /// Dynamic-range exponent `t′` of [`g_transform`].
    pub t_prime: f64,
    /// Objective weights `(α₁, α₂, α₃)` for cosface, contrastive and binary terms.
    pub alpha: [f64; 3],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            s: 30.0,
            m: 0.4,
            tau: 0.5,
            lambda: 0.7,
            s_prime: 30.0,
            m_prime: 0.4,
            t_prime: 3.0,
            alpha: [1.0, 5.0, 10.0],
        }
    }
}

impl LossConfig {
    /// Returns `(key, reason)` for the first violated constraint.
    pub fn violation(&self) -> Option<(&'static str, String)> {
        let fin = |x: f64| x.is_finite();
        if !(fin(self.s) && self.s > 0.0) {
            return Some(("s", format!("must be > 0, got {}", self.s)));
        }
        if !(0.0..1.0).contains(&self.m) {
            return Some(("m", format!("must lie in [0, 1), got {}", self.m)));
        }
        if !(fin(self.tau) && self.tau > 0.0) {
            return Some(("tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Some(("lambda", format!("must lie in (0, 1), got {}", self.lambda)));
        }
        if !(fin(self.s_prime) && self.s_prime > 0.0) {
            return Some(("s_prime", format!("must be > 0, got {}", self.s_prime)));
        }
        if !(0.0..1.0).contains(&self.m_prime) {
            return Some(("m_prime", format!("must lie in [0, 1), got {}", self.m_prime)));
        }
        if !(fin(self.t_prime) && self.t_prime >= 1.0) {
            return Some(("t_prime", format!("must be >= 1, got {}", self.t_prime)));
        }
        if self.alpha.iter().any(|a| !(fin(*a) && *a >= 0.0)) {
            return Some(("alpha", format!("weights must be finite and >= 0, got {:?}", self.alpha)));
        }
        None
    }
}

/// Per-sample value of `-log softmax` with the target logit shifted by `-s·m`,
/// and its gradient w.r.t. the cosines.
pub fn cosface_kernel<T: Scalar>(cos: &[T], label: usize, s: T, m: T) -> Result<(T, Vec<T>)> {
    if label >= cos.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: cos.len(),
        });
    }
    let logits: Vec<T> = cos
        .iter()
        .enumerate()
        .map(|(j, &c)| if j == label { s * (c - m) } else { s * c })
        .collect();
    let lse = log_sum_exp(&logits);
    let target = logits[label];
    let rival = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label)
        .fold(T::neg_infinity(), |acc, (_, &z)| acc.max(z));
    // ln(1 + Σ_{j≠y} e^{z_j − z_y}) keeps precision when the target dominates
    let loss = if rival <= target {
        logits
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != label)
            .map(|(_, &z)| (z - target).exp())
            .sum::<T>()
            .ln_1p()
    } else {
        lse - target
    };
    let grad = logits
        .iter()
        .enumerate()
        .map(|(j, &z)| {
            let p = (z - lse).exp();
            s * if j == label { p - T::one() } else { p }
        })
        .collect();
    Ok((loss, grad))
}

/// Per-sample contrastive value and its gradient w.r.t. `(sim_glob, sim_prev)`.
pub fn contrastive_kernel<T: Scalar>(sim_glob: T, sim_prev: T, tau: T) -> (T, T, T) {
    let x = (sim_prev - sim_glob) / tau;
    let d = sigmoid(x) / tau;
    (softplus(x), -d, d)
}

/// Range-shaping map `g(z) = 2((z+1)/2)^{t′} − 1`, with `z` clamped to `[-1, 1]`.
pub fn g_transform<T: Scalar>(z: T, t_prime: T) -> T {
    let z = z.max(-T::one()).min(T::one());
    let two = T::of(2.0);
    two * ((z + T::one()) / two).powf(t_prime) - T::one()
}

fn g_derivative<T: Scalar>(z: T, t_prime: T) -> T {
    let z = z.max(-T::one()).min(T::one());
    t_prime * ((z + T::one()) / T::of(2.0)).powf(t_prime - T::one())
}

/// Per-sample margin-based binary cross-entropy over all branches.
///
/// `label = None` marks a shared-data sample: every branch contributes a
/// negative term and no branch is positive. Returns the value and the
/// gradients w.r.t. the branch cosines and the bias.
pub fn bce_kernel<T: Scalar>(cos: &[T], label: Option<usize>, bias: T, cfg: &LossConfig) -> Result<(T, Vec<T>, T)> {
    if let Some(k) = label {
        if k >= cos.len() {
            return Err(Error::LabelOutOfRange {
                label: k,
                classes: cos.len(),
            });
        }
    }
    let (s, m, t) = (T::of(cfg.s_prime), T::of(cfg.m_prime), T::of(cfg.t_prime));
    let lam = T::of(cfg.lambda);
    let neg_w = T::one() - lam;
    let mut loss = T::zero();
    let mut dbias = T::zero();
    let mut dcos = vec![T::zero(); cos.len()];
    for (j, &c) in cos.iter().enumerate() {
        let g = g_transform(c, t);
        let dg = g_derivative(c, t);
        if Some(j) == label {
            let u = -s * (g - m) - bias;
            let sg = sigmoid(u);
            loss += lam / s * softplus(u);
            dcos[j] = -lam * sg * dg;
            dbias -= lam / s * sg;
        } else {
            let v = s * (g + m) + bias;
            let sg = sigmoid(v);
            loss += neg_w / s * softplus(v);
            dcos[j] = neg_w * sg * dg;
            dbias += neg_w / s * sg;
        }
    }
    Ok((loss, dcos, dbias))
}

fn unit_columns<T: Scalar>(m: &Matrix<T>) -> Result<Vec<Vec<T>>> {
    (0..m.cols()).map(|j| l2_normalize(&m.column(j))).collect()
}

/// Cosface loss of one feature against a proxy matrix.
pub fn cosface_loss<T: Scalar>(f: &[T], label: usize, proxies: &ClassEmbeddings<T>, cfg: &LossConfig) -> Result<T> {
    cosface_on_matrix(f, label, proxies.matrix(), cfg)
}

fn cosface_on_matrix<T: Scalar>(f: &[T], label: usize, proxies: &Matrix<T>, cfg: &LossConfig) -> Result<T> {
    if f.len() != proxies.rows() {
        return Err(Error::dims(
            "cosface_loss",
            format!("feature {} vs proxies {:?}", f.len(), proxies.shape()),
        ));
    }
    if label >= proxies.cols() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: proxies.cols(),
        });
    }
    let f = l2_normalize(f)?;
    let cos: Vec<T> = unit_columns(proxies)?.iter().map(|p| dot(&f, p)).collect();
    Ok(cosface_kernel(&cos, label, T::of(cfg.s), T::of(cfg.m))?.0)
}

/// Cosface over the shared proxies followed by the private ones.
///
/// Labels in `[0, K_g)` address `global`, labels in `[K_g, K_g + K_l)` address `local`.
pub fn balanced_cosface_loss<T: Scalar>(
    f: &[T],
    label: usize,
    local: &ClassEmbeddings<T>,
    global: &ClassEmbeddings<T>,
    cfg: &LossConfig,
) -> Result<T> {
    let joined = global.matrix().concat_cols(local.matrix())?;
    cosface_on_matrix(f, label, &joined, cfg)
}

/// Contrastive regularizer pulling `f` toward `f_glob` and away from `f_prev`.
pub fn contrastive_loss<T: Scalar>(f: &[T], f_glob: &[T], f_prev: &[T], tau: T) -> Result<T> {
    let sg = cosine_similarity(f, f_glob)?;
    let sp = cosine_similarity(f, f_prev)?;
    Ok(contrastive_kernel(sg, sp, tau).0)
}

/// Binary loss for one transformed feature `f′` against branch weights `Ω` (`d′×K_l`).
pub fn dfc_bce_loss<T: Scalar>(
    transformed: &[T],
    label: Option<usize>,
    omega: &Matrix<T>,
    bias: T,
    cfg: &LossConfig,
) -> Result<T> {
    if transformed.len() != omega.rows() {
        return Err(Error::dims(
            "dfc_bce_loss",
            format!("feature {} vs Ω {:?}", transformed.len(), omega.shape()),
        ));
    }
    let f = l2_normalize(transformed)?;
    let cos: Vec<T> = unit_columns(omega)?
        .iter()
        .map(|w| dot(&f, w).max(-T::one()).min(T::one()))
        .collect();
    Ok(bce_kernel(&cos, label, bias, cfg)?.0)
}

/// Component values of the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts<T> {
    pub cosface: T,
    pub contrastive: T,
    pub bce: T,
}

/// `α₁·cosface + α₂·contrastive + α₃·bce`.
pub fn total_loss<T: Scalar>(parts: LossParts<T>, alpha: [f64; 3]) -> T {
    T::of(alpha[0]) * parts.cosface + T::of(alpha[1]) * parts.contrastive + T::of(alpha[2]) * parts.bce
}

/// Mean cosface over a batch of unnormalized features (`n×d`) and proxies (`d×K`).
pub fn record_cosface<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    proxies: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let fn_ = tape.normalize_rows(features)?;
    let pn = tape.normalize_cols(proxies)?;
    let cos = tape.matmul(fn_, pn)?;
    let c = tape.value(cos);
    check_batch("cosface", c.rows(), labels.len())?;
    let n = T::of(labels.len() as f64);
    let (s, m) = (T::of(cfg.s), T::of(cfg.m));
    let mut total = T::zero();
    let mut jac = Matrix::zeros(c.rows(), c.cols());
    for (r, &y) in labels.iter().enumerate() {
        let (l, g) = cosface_kernel(c.row(r), y, s, m)?;
        total += l;
        for (o, gv) in jac.row_mut(r).iter_mut().zip(g) {
            *o = gv / n;
        }
    }
    tape.fused_scalar(vec![cos], total / n, vec![jac])
}

/// Mean contrastive term; `glob` and `prev` are detached features (`n×d`).
pub fn record_contrastive<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    glob: &Matrix<T>,
    prev: &Matrix<T>,
    tau: f64,
) -> Result<Var> {
    let fn_ = tape.normalize_rows(features)?;
    let g = tape.constant(glob.normalize_rows()?);
    let p = tape.constant(prev.normalize_rows()?);
    let sg = tape.row_dot(fn_, g)?;
    let sp = tape.row_dot(fn_, p)?;
    let rows = tape.value(sg).rows();
    let n = T::of(rows as f64);
    let tau = T::of(tau);
    let mut total = T::zero();
    let mut jg = Matrix::zeros(rows, 1);
    let mut jp = Matrix::zeros(rows, 1);
    for r in 0..rows {
        let (l, dg, dp) = contrastive_kernel(tape.value(sg).get(r, 0), tape.value(sp).get(r, 0), tau);
        total += l;
        jg.set(r, 0, dg / n);
        jp.set(r, 0, dp / n);
    }
    tape.fused_scalar(vec![sg, sp], total / n, vec![jg, jp])
}

/// Mean binary loss for transformed features (`n×d′`), branch weights (`d′×K_l`) and bias (`1×1`).
pub fn record_bce<T: Scalar>(
    tape: &mut Tape<T>,
    transformed: Var,
    omega: Var,
    bias: Var,
    labels: &[Option<usize>],
    cfg: &LossConfig,
) -> Result<Var> {
    let fn_ = tape.normalize_rows(transformed)?;
    let wn = tape.normalize_cols(omega)?;
    let cos = tape.matmul(fn_, wn)?;
    let c = tape.value(cos);
    check_batch("bce", c.rows(), labels.len())?;
    let b = tape.value(bias).get(0, 0);
    let n = T::of(labels.len() as f64);
    let mut total = T::zero();
    let mut dbias = T::zero();
    let mut jac = Matrix::zeros(c.rows(), c.cols());
    for (r, &y) in labels.iter().enumerate() {
        let (l, g, db) = bce_kernel(c.row(r), y, b, cfg)?;
        total += l;
        dbias += db;
        for (o, gv) in jac.row_mut(r).iter_mut().zip(g) {
            *o = gv / n;
        }
    }
    tape.fused_scalar(vec![cos, bias], total / n, vec![jac, Matrix::scalar(dbias / n)])
}

fn check_batch(op: &'static str, rows: usize, labels: usize) -> Result<()> {
    if rows != labels || rows == 0 {
        return Err(Error::dims(op, format!("{rows} rows, {labels} labels")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProxyRole;
    use crate::rng::{stream, unit_vector};
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    fn proxies(cols: &[&[f64]]) -> ClassEmbeddings<f64> {
        let d = cols[0].len();
        let m = Matrix::from_fn(d, cols.len(), |r, c| cols[c][r]);
        ClassEmbeddings::new(m, ProxyRole::Global).unwrap()
    }

    /// Direct transcription with raw exponentials, no stabilization.
    fn naive_cosface(f: &[f64], y: usize, p: &ClassEmbeddings<f64>, s: f64, m: f64) -> f64 {
        let cos: Vec<f64> = (0..p.num_classes())
            .map(|j| cosine_similarity(f, &p.column(j)).unwrap())
            .collect();
        let num = (s * (cos[y] - m)).exp();
        let others: f64 = cos.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, c)| (s * c).exp()).sum();
        -(num / (num + others)).ln()
    }

    #[test]
    fn single_class_is_zero() {
        let p = proxies(&[&[0.3, -0.2, 0.9]]);
        assert_eq!(cosface_loss(&[1.0, 2.0, -0.5], 0, &p, &cfg()).unwrap(), 0.0);
    }

    #[test]
    fn cosface_scalar_substitution() {
        let p = proxies(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = cosface_loss(&[1.0, 0.0], 0, &p, &cfg()).unwrap();
        let expected = (-18.0f64).exp().ln_1p();
        assert!((l - expected).abs() / expected < 1e-9);
        assert!((l - 1.523e-8).abs() < 1e-11);
    }

    #[test]
    fn cosface_matches_naive_oracle() {
        let mut rng = stream(21, &[]);
        for _ in 0..200 {
            let k = rng.random_range(1..=5);
            let d = rng.random_range(2..6);
            let p = ClassEmbeddings::random(d, k, ProxyRole::Global, &mut rng);
            let f: Vec<f64> = unit_vector(&mut rng, d);
            let y = rng.random_range(0..k);
            let got = cosface_loss(&f, y, &p, &cfg()).unwrap();
            let want = naive_cosface(&f, y, &p, 30.0, 0.4);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn cosface_errors() {
        let p = proxies(&[&[1.0, 0.0]]);
        assert!(matches!(cosface_loss(&[1.0, 0.0], 1, &p, &cfg()), Err(Error::LabelOutOfRange { .. })));
        assert!(matches!(cosface_loss(&[0.0, 0.0], 0, &p, &cfg()), Err(Error::DegenerateNorm { .. })));
    }

    #[test]
    fn balanced_reduces_and_concatenates() {
        let mut rng = stream(3, &[]);
        let w = ClassEmbeddings::random(4, 3, ProxyRole::Local, &mut rng);
        let empty = ClassEmbeddings::new(Matrix::zeros(4, 0), ProxyRole::Global).unwrap();
        let f: Vec<f64> = unit_vector(&mut rng, 4);
        for y in 0..3 {
            assert_eq!(
                balanced_cosface_loss(&f, y, &w, &empty, &cfg()).unwrap(),
                cosface_loss(&f, y, &w, &cfg()).unwrap()
            );
        }
        let phi = ClassEmbeddings::random(4, 2, ProxyRole::Global, &mut rng);
        let joined = ClassEmbeddings::new(phi.matrix().concat_cols(w.matrix()).unwrap(), ProxyRole::Global).unwrap();
        for y in 0..5 {
            assert_eq!(
                balanced_cosface_loss(&f, y, &w, &phi, &cfg()).unwrap(),
                cosface_loss(&f, y, &joined, &cfg()).unwrap()
            );
        }
    }

    #[test]
    fn orthogonal_local_proxies_add_unit_terms() {
        // f lives in the first two coordinates; local proxies in the last two.
        let phi = proxies(&[&[1.0, 0.2, 0.0, 0.0], &[-0.3, 1.0, 0.0, 0.0]]);
        let w = proxies(&[&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.4, 0.9]]);
        let f = [0.8, 0.3, 0.0, 0.0];
        let got = balanced_cosface_loss(&f, 0, &w, &phi, &cfg()).unwrap();
        // direct evaluation: each orthogonal column contributes e^0 = 1
        let c0 = cosine_similarity(&f, &phi.column(0)).unwrap();
        let c1 = cosine_similarity(&f, &phi.column(1)).unwrap();
        let num = (30.0 * (c0 - 0.4)).exp();
        let want = -(num / (num + (30.0 * c1).exp() + 2.0)).ln();
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn contrastive_examples() {
        let l = contrastive_loss(&[1.0, 0.0], &[0.6, 0.8], &[0.6, -0.8], 0.5).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = contrastive_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
        assert!((l - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn g_examples() {
        assert_eq!(g_transform(1.0, 3.0), 1.0);
        assert_eq!(g_transform(-1.0, 3.0), -1.0);
        assert_eq!(g_transform(0.0, 3.0), -0.75);
        for z in [-0.9f64, -0.3, 0.0, 0.45, 0.99] {
            assert!((g_transform(z, 1.0) - z).abs() < 1e-15);
        }
        assert_eq!(g_transform(1.0 + 1e-9, 3.0), 1.0);
    }

    #[test]
    fn bce_examples() {
        let omega = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let l = dfc_bce_loss(&[1.0, 0.0], Some(0), &omega, 0.0, &cfg()).unwrap();
        let want = 0.7 / 30.0 * (-18.0f64).exp().ln_1p();
        assert!((l - want).abs() / want < 1e-12);
        assert!((l - 3.55e-10).abs() < 1e-12);

        let omega = Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 1.0]]).unwrap();
        let l = dfc_bce_loss(&[1.0, 0.0, 0.0], None, &omega, 0.0, &cfg()).unwrap();
        let per_branch = 0.01 * (-10.5f64).exp().ln_1p();
        assert!((per_branch - 2.75e-7).abs() < 1e-9);
        // columns 2 and 3 coincide; all three are orthogonal to f′
        assert!((l - 3.0 * per_branch).abs() / l < 1e-12);
    }

    /// Loops over branches evaluating each logistic term directly.
    fn bce_oracle(f: &[f64], label: Option<usize>, omega: &Matrix<f64>, b: f64) -> f64 {
        let (s, m, lam, t) = (30.0, 0.4, 0.7, 3.0);
        let mut total = 0.0;
        for j in 0..omega.cols() {
            let c = cosine_similarity(f, &omega.column(j)).unwrap();
            let g = 2.0 * ((c + 1.0) / 2.0f64).powf(t) - 1.0;
            if Some(j) == label {
                total += lam / s * (1.0 + (-s * (g - m) - b).exp()).ln();
            } else {
                total += (1.0 - lam) / s * (1.0 + (s * (g + m) + b).exp()).ln();
            }
        }
        total
    }

    #[test]
    fn bce_matches_branch_oracle() {
        let mut rng = stream(77, &[]);
        for _ in 0..200 {
            let k = rng.random_range(1..5);
            let d = rng.random_range(2..6);
            let omega = ClassEmbeddings::<f64>::random(d, k, ProxyRole::Local, &mut rng);
            let f: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = rng.random_range(-1.0..1.0);
            let label = if rng.random_bool(0.3) { None } else { Some(rng.random_range(0..k)) };
            let got = dfc_bce_loss(&f, label, omega.matrix(), b, &cfg()).unwrap();
            let want = bce_oracle(&f, label, omega.matrix(), b);
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn bce_label_out_of_range() {
        let omega = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        assert!(dfc_bce_loss(&[1.0, 0.0], Some(1), &omega, 0.0, &cfg()).is_err());
    }

    #[test]
    fn total_examples() {
        let parts = LossParts {
            cosface: 1.0,
            contrastive: 2.0,
            bce: 3.0,
        };
        assert_eq!(total_loss(parts, [1.0, 1.0, 1.0]), 6.0);
        assert_eq!(total_loss(parts, [0.7, 0.0, 0.0]), 0.7);
        let parts = LossParts {
            cosface: 0.1,
            contrastive: 0.2,
            bce: 0.3,
        };
        assert!((total_loss(parts, [1.0, 5.0, 10.0]) - 4.1f64).abs() < 1e-12);
    }

    #[test]
    fn config_violations() {
        assert!(cfg().violation().is_none());
        let bad = LossConfig { m: 1.5, ..cfg() };
        assert_eq!(bad.violation().unwrap().0, "m");
        let bad = LossConfig { t_prime: 0.5, ..cfg() };
        assert_eq!(bad.violation().unwrap().0, "t_prime");
    }

    #[test]
    fn batch_records_match_sample_means() {
        let mut rng = stream(8, &[]);
        let (n, d, k) = (5, 4, 3);
        let feats = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let prox = ClassEmbeddings::<f64>::random(d, k, ProxyRole::Local, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut tape = Tape::new();
        let fv = tape.leaf(feats.clone());
        let pv = tape.leaf(prox.matrix().clone());
        let out = record_cosface(&mut tape, fv, pv, &labels, &cfg()).unwrap();
        let mean: f64 = (0..n)
            .map(|r| cosface_loss(feats.row(r), labels[r], &prox, &cfg()).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((tape.value(out).get(0, 0) - mean).abs() < 1e-12);

        let blabels: Vec<Option<usize>> = (0..n).map(|i| if i == 0 { None } else { Some(i % k) }).collect();
        let b = tape.leaf(Matrix::scalar(0.3));
        let out = record_bce(&mut tape, fv, pv, b, &blabels, &cfg()).unwrap();
        let mean: f64 = (0..n)
            .map(|r| dfc_bce_loss(feats.row(r), blabels[r], prox.matrix(), 0.3, &cfg()).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((tape.value(out).get(0, 0) - mean).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn losses_nonnegative(seed in 0u64..500) {
            let mut rng = stream(seed, &[]);
            let d = 4;
            let p = ClassEmbeddings::<f64>::random(d, 4, ProxyRole::Global, &mut rng);
            let f: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g: Vec<f64> = unit_vector(&mut rng, d);
            let h: Vec<f64> = unit_vector(&mut rng, d);
            prop_assume!(crate::tensor::l2_norm(&f) > 1e-6);
            prop_assert!(cosface_loss(&f, 1, &p, &cfg()).unwrap() >= 0.0);
            prop_assert!(contrastive_loss(&f, &g, &h, 0.5).unwrap() >= 0.0);
            prop_assert!(dfc_bce_loss(&f, Some(2), p.matrix(), 0.1, &cfg()).unwrap() >= 0.0);
            prop_assert!(dfc_bce_loss(&f, None, p.matrix(), -0.1, &cfg()).unwrap() >= 0.0);
        }

        #[test]
        fn cosface_scale_invariant(seed in 0u64..500, a in 0.01f64..50.0, b in 0.01f64..50.0) {
            let mut rng = stream(seed, &[]);
            let p = ClassEmbeddings::<f64>::random(5, 4, ProxyRole::Global, &mut rng);
            let f: Vec<f64> = unit_vector(&mut rng, 5);
            let base = cosface_loss(&f, 2, &p, &cfg()).unwrap();
            let fs: Vec<f64> = f.iter().map(|x| x * a).collect();
            let mut pm = p.matrix().clone();
            for r in 0..5 {
                pm.set(r, 1, pm.get(r, 1) * b);
            }
            let ps = ClassEmbeddings::new(pm, ProxyRole::Global).unwrap();
            prop_assert!((cosface_loss(&fs, 2, &ps, &cfg()).unwrap() - base).abs() < 1e-10);
        }

        #[test]
        fn g_strictly_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0, t in 1.0f64..6.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(g_transform(lo, t) < g_transform(hi, t));
        }
    }

    #[test]
    fn cosface_decreases_with_target_cosine() {
        let others = [0.1, -0.2, 0.3];
        let mut prev = f64::INFINITY;
        for i in 0..=40 {
            let c = -1.0 + i as f64 * 0.05;
            let cos = [c, others[0], others[1], others[2]];
            let (l, _) = cosface_kernel(&cos, 0, 30.0, 0.4).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }
}
