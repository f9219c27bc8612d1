mod common;

use fedfr::config::ExperimentConfig;
use fedfr::data::{ClientData, FaceSample, FederatedData, Partition, Split};
use fedfr::eval::{personalized_eval, tar_at_far, tpir_at_fpir, FeatureModel, IdentificationProtocol, ProbeLabel};
use fedfr::experiment::build_data;
use fedfr::model::{BackboneParams, Layer};
use fedfr::rng::{stream, tags};
use fedfr::server::evaluate_generic;
use fedfr::tensor::{l2_normalize, Matrix};
use proptest::prelude::*;
use rand::Rng;

const LEVELS: [f64; 5] = [0.05, 0.1, 0.25, 0.5, 1.0];

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    l2_normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap()
}

proptest! {
    #[test]
    fn tar_matches_threshold_sweep(seed in 0u64..10_000, np in 1usize..40, nn in 1usize..200) {
        let mut rng = stream(seed, &[]);
        let pos = common::grid_scores(&mut rng, np);
        let neg = common::grid_scores(&mut rng, nn);
        let curve = tar_at_far(&pos, &neg, &LEVELS).unwrap();
        for &l in &LEVELS {
            prop_assert_eq!(curve.at(l), common::brute_tar(&pos, &neg, l));
        }
    }

    #[test]
    fn tpir_matches_threshold_sweep(seed in 0u64..10_000, ids in 1usize..5, genuine in 1usize..20, imposters in 1usize..20) {
        let mut rng = stream(seed, &[]);
        let d = 3;
        let gallery: Vec<(usize, Vec<f64>)> = (0..ids).map(|i| (i, unit(&mut rng, d))).collect();
        let mut probes = Vec::new();
        for _ in 0..genuine {
            probes.push(common::Probe { feature: unit(&mut rng, d), identity: Some(rng.random_range(0..ids)) });
        }
        for _ in 0..imposters {
            probes.push(common::Probe { feature: unit(&mut rng, d), identity: None });
        }
        // duplicate a probe to force tied scores
        let dup = common::Probe { feature: probes[0].feature.clone(), identity: None };
        probes.push(dup);

        let rows: Vec<&[f64]> = probes.iter().map(|p| p.feature.as_slice()).collect();
        let features = Matrix::from_rows(&rows).unwrap();
        let enrollment: Vec<(usize, &[f64])> = gallery.iter().map(|(i, g)| (*i, g.as_slice())).collect();
        let labels = probes
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.identity.map_or(ProbeLabel::Imposter, ProbeLabel::Genuine)))
            .collect();
        let protocol = IdentificationProtocol::enroll(&enrollment, labels).unwrap();
        let result = tpir_at_fpir(&protocol, &features, &LEVELS).unwrap();
        for &l in &LEVELS {
            prop_assert_eq!(result.curve.at(l), common::brute_tpir(&gallery, &probes, l));
        }
    }
}

fn sample(x: Vec<f64>, identity: usize, split: Split) -> FaceSample<f64> {
    FaceSample { x, identity, split }
}

fn one_hot(i: usize, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

/// Every identity sits on its own axis; clients own `per_client` identities each.
fn separable(clients: usize, per_client: usize) -> FederatedData<f64> {
    let d = clients * per_client;
    let mut out = Vec::new();
    for c in 0..clients {
        let identities: Vec<usize> = (c * per_client..(c + 1) * per_client).collect();
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for &id in &identities {
            for _ in 0..3 {
                train.push(sample(one_hot(id, d), id, Split::Train));
            }
            for _ in 0..2 {
                eval.push(sample(one_hot(id, d), id, Split::Eval));
            }
        }
        out.push(ClientData { id: c, identities, train, eval });
    }
    FederatedData {
        partition: Partition {
            global_ids: vec![],
            client_ids: out.iter().map(|c| c.identities.clone()).collect(),
            unused_ids: vec![],
            train_per_id: 3,
            eval_per_id: 2,
        },
        global_train: vec![],
        global_eval: vec![],
        clients: out,
    }
}

fn identity_backbone(d: usize) -> BackboneParams<f64> {
    BackboneParams::new(vec![Layer::new(Matrix::identity(d), Matrix::zeros(1, d)).unwrap()]).unwrap()
}

#[test]
fn separable_clients_identify_perfectly() {
    let data = separable(3, 2);
    let b = identity_backbone(6);
    let models = vec![FeatureModel::Backbone(&b); 3];
    let report = personalized_eval(&models, &data, &[0.1, 1.0], &[0.25, 0.5], 1000, 0).unwrap();
    for level in [0.25, 0.5] {
        assert_eq!(report.mean.tpir.at(level), Some(1.0));
    }
    assert_eq!(report.mean.tar.at(0.1), Some(1.0));
    assert_eq!(report.mean.rank1, 1.0);
}

#[test]
fn mean_is_unweighted_average_of_clients() {
    let cfg = ExperimentConfig::default();
    let data = build_data(&cfg).unwrap();
    let mut rng = stream(5, &[]);
    let backbones: Vec<BackboneParams<f64>> = (0..data.clients.len())
        .map(|_| BackboneParams::init(cfg.data.input_dim, &[16], 8, &mut rng))
        .collect();
    let models: Vec<FeatureModel<'_, f64>> = backbones.iter().map(FeatureModel::Backbone).collect();
    let far = [1e-2, 1e-1];
    let report = personalized_eval(&models, &data, &far, &[0.1, 0.5], 500, 3).unwrap();
    assert_eq!(report.per_client.len(), data.clients.len());
    for &l in &far {
        let rates: Vec<f64> = report.per_client.iter().map(|m| m.tar.at(l).unwrap()).collect();
        let hand = rates.iter().sum::<f64>() / rates.len() as f64;
        assert!((report.mean.tar.at(l).unwrap() - hand).abs() < 1e-15);
    }
    for m in &report.per_client {
        assert_eq!(m.imposter_pairs, 500);
    }
    let again = personalized_eval(&models, &data, &far, &[0.1, 0.5], 500, 3).unwrap();
    assert_eq!(report, again);
}

#[test]
fn single_client_has_no_imposters() {
    let data = separable(1, 3);
    let b = identity_backbone(3);
    let report = personalized_eval(&[FeatureModel::Backbone(&b)], &data, &[0.1], &[0.1], 100, 0).unwrap();
    assert_eq!(report.mean.tar.at(0.1), None);
    assert_eq!(report.mean.tpir.at(0.1), None);
    assert_eq!(report.mean.imposter_pairs, 0);
    assert_eq!(report.mean.rank1, 1.0);
}

#[test]
fn untrained_backbone_is_weak() {
    let cfg = ExperimentConfig::default();
    let data = build_data(&cfg).unwrap();
    let mut rng = stream(cfg.seed, &[tags::INIT]);
    let b = BackboneParams::init(cfg.data.input_dim, &cfg.model.hidden_dims, cfg.model.embed_dim, &mut rng);
    let m = evaluate_generic(&cfg, &data, &b).unwrap();
    assert!(m.tar.at(1e-2).unwrap() < 0.5, "{:?}", m.tar);
    assert_eq!(m, evaluate_generic(&cfg, &data, &b).unwrap());
}

#[test]
fn no_shared_identities_is_unsupported() {
    let data = separable(2, 2);
    let cfg = ExperimentConfig::default();
    let m = evaluate_generic(&cfg, &data, &identity_backbone(4)).unwrap();
    assert!(m.tar.points.iter().chain(&m.tpir.points).all(|p| p.rate.is_none()));
}
