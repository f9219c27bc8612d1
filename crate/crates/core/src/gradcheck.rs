//! Central finite-difference verification of the tape's analytic gradients.

use rand::Rng;

use crate::error::Result;
use crate::losses::{record_bce, record_contrastive, record_cosface, LossConfig};
use crate::model::{BackboneParams, BackboneVars, Layer};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Matrix, Tape, Var};

/// Perturbation for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Per-coordinate relative error bound.
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor: coordinates whose gradients are both below this in
/// magnitude are compared on an absolute scale of `REL_TOL * GRAD_FLOOR`.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    fn merge(&mut self, other: &GradCheck) {
        self.coordinates += other.coordinates;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
    }
}

/// Compares tape gradients of `build` against central differences for every
/// coordinate of every input in `inputs`.
pub fn check_gradients<F>(build: F, inputs: &[Matrix<f64>]) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).get(0, 0))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.grad(out)?;

    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for k in 0..inputs[i].len() {
            let orig = inputs[i].as_slice()[k];
            work[i].as_mut_slice()[k] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].as_mut_slice()[k] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].as_mut_slice()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic.as_slice()[k], numeric);
            report.coordinates += 1;
            report.max_rel_error = report.max_rel_error.max(err);
        }
    }
    Ok(report)
}

/// Outcome of one named suite over many seeded instances.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    pub check: GradCheck,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.check.max_rel_error < REL_TOL
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn backbone_inputs(rng: &mut impl Rng, dims: &[usize]) -> Vec<Matrix<f64>> {
    dims.windows(2)
        .flat_map(|w| [uniform(rng, w[0], w[1]), uniform(rng, 1, w[1])])
        .collect()
}

fn backbone_vars(vars: &[Var]) -> BackboneVars {
    BackboneVars {
        layers: vars.chunks(2).map(|c| (c[0], c[1])).collect(),
    }
}

/// Keeps hidden pre-activations away from the rectifier's kink, where central
/// differences are meaningless.
fn away_from_kinks(inputs: &[Matrix<f64>], x: &Matrix<f64>) -> bool {
    let layers: Vec<Layer<f64>> = inputs
        .chunks(2)
        .map(|c| Layer::new(c[0].clone(), c[1].clone()).expect("shapes built together"))
        .collect();
    let mut h = x.clone();
    let last = layers.len() - 1;
    for (i, l) in layers.iter().enumerate() {
        h = h.matmul(&l.weight).expect("chained");
        for r in 0..h.rows() {
            for (o, &b) in h.row_mut(r).iter_mut().zip(l.bias.as_slice()) {
                *o += b;
            }
        }
        if i < last {
            if h.as_slice().iter().any(|z| z.abs() < 1e-3) {
                return false;
            }
            h = h.map(|z| z.max(0.0));
        }
    }
    let _ = BackboneParams::new(layers).expect("valid");
    true
}

fn sum_rows(tape: &mut Tape<f64>, col: Var) -> Result<Var> {
    let n = tape.value(col).rows();
    let ones = tape.constant(Matrix::from_fn(1, n, |_, _| 1.0));
    tape.matmul(ones, col)
}

/// Runs every gradient suite over `instances` seeded random problems.
pub fn run_suites(instances: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    let cfg = LossConfig::default();
    let mut reports = Vec::new();
    let mut run = |name: &'static str,
                   case: &dyn Fn(&mut crate::rng::SimRng) -> Result<GradCheck>|
     -> Result<()> {
        let mut total = GradCheck::default();
        for i in 0..instances {
            let tag = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
            let mut rng = stream(derive_seed(seed, &[tag]), &[i as u64]);
            total.merge(&case(&mut rng)?);
        }
        reports.push(SuiteReport {
            name,
            instances,
            check: total,
        });
        Ok(())
    };

    run("normalize-dot", &|rng| {
        let d = rng.random_range(2..6);
        let inputs = vec![uniform(rng, 1, d), uniform(rng, 1, d)];
        check_gradients(
            |t, v| {
                let n = t.normalize_rows(v[0])?;
                t.row_dot(n, v[1])
            },
            &inputs,
        )
    })?;

    run("backbone", &|rng| {
        let dims = [4, 5, 3];
        let (inputs, x) = loop {
            let inputs = backbone_inputs(rng, &dims);
            let x = uniform(rng, 3, dims[0]);
            if away_from_kinks(&inputs, &x) {
                break (inputs, x);
            }
        };
        let probe = uniform(rng, 3, dims[2]);
        check_gradients(
            |t, v| {
                let xv = t.constant(x.clone());
                let f = backbone_vars(v).forward(t, xv)?;
                let p = t.constant(probe.clone());
                let s = t.row_dot(f, p)?;
                sum_rows(t, s)
            },
            &inputs,
        )
    })?;

    run("cosface", &|rng| {
        let (n, d, k) = (3, rng.random_range(2..6), rng.random_range(1..6));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let inputs = vec![uniform(rng, n, d), uniform(rng, d, k)];
        check_gradients(|t, v| record_cosface(t, v[0], v[1], &labels, &cfg), &inputs)
    })?;

    run("balanced-cosface", &|rng| {
        let (n, d, kg, kl) = (4, rng.random_range(2..6), rng.random_range(1..4), rng.random_range(1..4));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..kg + kl)).collect();
        let inputs = vec![uniform(rng, n, d), uniform(rng, d, kg), uniform(rng, d, kl)];
        check_gradients(
            |t, v| {
                let p = t.concat_cols(v[1], v[2])?;
                record_cosface(t, v[0], p, &labels, &cfg)
            },
            &inputs,
        )
    })?;

    run("contrastive", &|rng| {
        let (n, d) = (3, rng.random_range(2..6));
        let glob = uniform(rng, n, d);
        let prev = uniform(rng, n, d);
        let inputs = vec![uniform(rng, n, d)];
        check_gradients(|t, v| record_contrastive(t, v[0], &glob, &prev, cfg.tau), &inputs)
    })?;

    run("dfc-bce", &|rng| {
        let (n, d, k) = (3, rng.random_range(2..6), rng.random_range(1..4));
        let labels: Vec<Option<usize>> = (0..n)
            .map(|_| rng.random_bool(0.7).then(|| rng.random_range(0..k)))
            .collect();
        let inputs = vec![
            uniform(rng, n, d),
            uniform(rng, d, d),
            uniform(rng, 1, d),
            uniform(rng, d, k),
            uniform(rng, 1, 1),
        ];
        check_gradients(
            |t, v| {
                let z = t.matmul(v[0], v[1])?;
                let fp = t.add_row_bias(z, v[2])?;
                record_bce(t, fp, v[3], v[4], &labels, &cfg)
            },
            &inputs,
        )
    })?;

    run("total-objective", &|rng| {
        let dims = [4, 5, 3];
        let (kg, kl, n) = (2, 2, 4);
        let (bb, x) = loop {
            let bb = backbone_inputs(rng, &dims);
            let x = uniform(rng, n, dims[0]);
            if away_from_kinks(&bb, &x) {
                break (bb, x);
            }
        };
        let d = dims[2];
        let glob = uniform(rng, n, d);
        let prev = uniform(rng, n, d);
        let labels: Vec<usize> = (0..n).map(|i| if i % 2 == 0 { rng.random_range(0..kg) } else { kg + rng.random_range(0..kl) }).collect();
        let blabels: Vec<Option<usize>> = labels.iter().map(|&y| y.checked_sub(kg)).collect();
        let nb = bb.len();
        let mut inputs = bb;
        inputs.extend([
            uniform(rng, d, kg),
            uniform(rng, d, kl),
            uniform(rng, d, d),
            uniform(rng, 1, d),
            uniform(rng, d, kl),
            uniform(rng, 1, 1),
        ]);
        check_gradients(
            |t, v| {
                let xv = t.constant(x.clone());
                let f = backbone_vars(&v[..nb]).forward(t, xv)?;
                let r = &v[nb..];
                let p = t.concat_cols(r[0], r[1])?;
                let cos = record_cosface(t, f, p, &labels, &cfg)?;
                let con = record_contrastive(t, f, &glob, &prev, cfg.tau)?;
                let z = t.matmul(f, r[2])?;
                let fp = t.add_row_bias(z, r[3])?;
                let bce = record_bce(t, fp, r[4], r[5], &blabels, &cfg)?;
                t.weighted_sum(&[(cos, cfg.alpha[0]), (con, cfg.alpha[1]), (bce, cfg.alpha[2])])
            },
            &inputs,
        )
    })?;

    Ok(reports)
}
