use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::{cross_entropy, grad_check_params};

fn small() -> CorrConfig {
    CorrConfig {
        rigs: 5,
        frames: 12,
        layers: 2,
        heads: 2,
        d_model: 8,
        ff_hidden: 8,
        classifier_hidden: 6,
        classes: 6,
        ..CorrConfig::default()
    }
}

fn random_window(cfg: &CorrConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(cfg.rigs, cfg.frames, |_, _| rng.gen_range(-1.0..1.0))
}

#[test]
fn zero_window_gives_zero_feature() {
    let net = CorrNet::init(CorrConfig::default(), 1).unwrap();
    let (_, f) = net.forward(&Tensor::zeros(&[116, 96])).unwrap();
    assert_eq!(f.matrix.shape(), &[116, 116]);
    assert!(f.matrix.data().iter().all(|&v| v == 0.0));
}

#[test]
fn feature_is_generally_asymmetric() {
    let cfg = small();
    let net = CorrNet::init(cfg.clone(), 2).unwrap();
    let (_, f) = net.forward(&random_window(&cfg, 3)).unwrap();
    let asym = (0..5)
        .flat_map(|i| (0..5).map(move |j| (i, j)))
        .map(|(i, j)| (f.matrix.at(i, j) - f.matrix.at(j, i)).abs())
        .fold(0.0, f64::max);
    assert!(asym > 1e-6);
}

#[test]
fn rig_permutation_permutes_feature() {
    let cfg = small();
    let net = CorrNet::init(cfg.clone(), 4).unwrap();
    let x = random_window(&cfg, 5);
    let perm = [3, 0, 4, 1, 2];
    let xp = Tensor::from_fn(5, cfg.frames, |r, t| x.at(perm[r], t));
    let (_, f) = net.forward(&x).unwrap();
    let (_, fp) = net.forward(&xp).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            assert!((fp.matrix.at(i, j) - f.matrix.at(perm[i], perm[j])).abs() < 1e-12);
        }
    }
}

#[test]
fn untrained_model_refuses_prediction() {
    let cfg = small();
    let net = CorrNet::init(cfg.clone(), 6).unwrap();
    assert!(matches!(
        net.predict_emotion(&random_window(&cfg, 1)),
        Err(Error::State(_))
    ));
    assert!(matches!(
        net.export_feature(&random_window(&cfg, 1)),
        Err(Error::State(_))
    ));
}

#[test]
fn prediction_is_deterministic() {
    let cfg = small();
    let mut net = CorrNet::init(cfg.clone(), 7).unwrap();
    net.trained = true;
    let w = random_window(&cfg, 8);
    assert_eq!(net.predict_emotion(&w).unwrap(), net.predict_emotion(&w).unwrap());
    assert_eq!(net.export_feature(&w).unwrap(), net.export_feature(&w).unwrap());
}

#[test]
fn wrong_shape_rejected() {
    let net = CorrNet::init(small(), 9).unwrap();
    assert!(matches!(net.forward(&Tensor::zeros(&[4, 12])), Err(Error::Shape(_))));
}

#[test]
fn config_validation() {
    let cfg = CorrConfig {
        d_model: 10,
        heads: 4,
        ..CorrConfig::default()
    };
    assert!(CorrNet::init(cfg, 0).is_err());
    let cfg = CorrConfig {
        classes: 1,
        ..CorrConfig::default()
    };
    assert!(CorrNet::init(cfg, 0).is_err());
}

#[test]
fn classification_loss_gradients_check_out() {
    for head in [CorrHead::Scores, CorrHead::Logits] {
        let cfg = CorrConfig { head, ..small() };
        let net = CorrNet::init(cfg.clone(), 10).unwrap();
        let x = random_window(&cfg, 11);
        let report = grad_check_params(
            |b| {
                let xv = b.graph().constant(x.clone());
                let out = corr_graph(&cfg, b, xv)?;
                cross_entropy(out.logits, &[2])
            },
            &net.params,
            1e-5,
            1,
        )
        .unwrap();
        for (name, err) in report {
            // With the logits head the key bias only shifts softmax rows, so
            // its gradient is exactly zero and central differences see pure
            // rounding noise.
            if head == CorrHead::Logits && name.ends_with(".bk") {
                continue;
            }
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
