//! End-to-end behaviour of toy training.

use pnp_core::experiment::{train_toy, ExperimentConfig};
use pnp_core::gradcheck::{compare, finite_diff};
use pnp_core::model::MlpModel;
use pnp_core::{batch_loss, EmbeddingBatch, LossSpec, LossVariant, Matrix, Result};

const VARIANTS: [&str; 10] = [
    "o", "iu", "iu-prime", "ib:1", "ib:4", "ds", "dq:1", "dq:2", "dq:4", "smoothap",
];

fn config(variant: &str, steps: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.set("variant", variant).unwrap();
    c.steps = steps;
    c
}

#[test]
fn early_training_lowers_the_loss_for_every_variant() {
    for v in VARIANTS {
        let losses = train_toy(&config(v, 50)).unwrap().record.train_loss;
        let window: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
        assert_eq!(window.len(), 5);
        for (i, w) in window.iter().enumerate().skip(1) {
            assert!(*w < window[0], "{v}: window {i} mean {w} vs first {}", window[0]);
        }
        assert!(window[4] < 0.5 * window[0], "{v}: {window:?}");
    }
}

fn parameter_gradient_error(model: &MlpModel, seed: u64) -> f64 {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_vec(6, 2, (0..12).map(|_| StandardNormal.sample(&mut rng)).collect())
        .unwrap();
    let labels = vec![0, 1, 0, 1, 0, 1];
    let spec = LossSpec::new(LossVariant::DecreasingQuick { alpha: 2.0 }, 0.1).unwrap();
    let (out, cache) = model.forward(&x).unwrap();
    for pre in &cache.pre_activations()[..2] {
        assert!(pre.as_slice().iter().all(|v| v.abs() > 1e-6), "input sits on a kink");
    }
    let up = batch_loss(&EmbeddingBatch::new(out, labels.clone()).unwrap(), &spec)
        .unwrap()
        .grad;
    let analytic = model.backward(&cache, &up).unwrap().flat_params();
    let f = |m: &Matrix| -> Result<f64> {
        let mut probe = model.clone();
        probe.set_flat_params(m.as_slice())?;
        let b = EmbeddingBatch::new(probe.embed(&x)?, labels.clone())?;
        Ok(batch_loss(&b, &spec)?.loss)
    };
    let p = model.flat_params();
    let at = Matrix::from_vec(1, p.len(), p).unwrap();
    let numeric = finite_diff(f, &at, 1e-6).unwrap();
    let analytic = Matrix::from_vec(1, analytic.len(), analytic).unwrap();
    compare(&analytic, &numeric).unwrap().max_rel_err
}

#[test]
fn parameter_gradients_match_before_and_after_training() {
    let init = MlpModel::toy(0);
    assert!(parameter_gradient_error(&init, 21) < 1e-4);
    let trained = train_toy(&config("dq:2", 100)).unwrap().model;
    assert_ne!(trained, init);
    assert!(parameter_gradient_error(&trained, 21) < 1e-4);
}

#[test]
fn runs_are_reproducible() {
    let a = train_toy(&config("ib:4", 300)).unwrap();
    let b = train_toy(&config("ib:4", 300)).unwrap();
    assert_eq!(a.record.without_timing(), b.record.without_timing());
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
}
