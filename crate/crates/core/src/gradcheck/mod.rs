//! Central finite-difference checks for the analytic gradients.
//!
//! [`finite_diff`] works on any f64 function. [`check_loss_gradients`] by
//! default differentiates an independent double-double evaluation of the
//! loss ([`reference::ReferenceLoss`]), so small steps at stiff temperatures
//! are limited by truncation error only.

pub mod double_double;
pub mod reference;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{batch_loss, LossSpec};
use crate::numerics::{normalize_rows, normalize_rows_backward, EmbeddingBatch, Matrix};

/// Floor on the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Step used at a given temperature: stiffer sigmoids need a smaller step.
pub fn default_step(tau: f64) -> f64 {
    if tau >= 0.05 {
        1e-5
    } else {
        1e-7
    }
}

/// Maximum relative error accepted at a given temperature.
pub fn tolerance(tau: f64) -> f64 {
    if tau >= 0.05 {
        1e-4
    } else {
        1e-3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_coordinate: (usize, usize),
    pub n_evaluated: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_coordinate: (0, 0),
            n_evaluated: 0,
        }
    }

    /// Folds another report in, keeping the worst coordinate.
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_err > self.max_rel_err || self.n_evaluated == 0 {
            self.max_rel_err = other.max_rel_err;
            self.worst_coordinate = other.worst_coordinate;
        }
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.n_evaluated += other.n_evaluated;
    }
}

/// Central differences `(f(x + h e) - f(x - h e)) / 2h` for every coordinate.
pub fn finite_diff<F>(f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<f64> + Sync,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
    }
    let (rows, cols) = x.shape();
    let partials: Vec<f64> = (0..rows * cols)
        .into_par_iter()
        .map(|p| {
            let (r, c) = (p / cols, p % cols);
            let mut probe = x.clone();
            let orig = x.get(r, c);
            probe.set(r, c, orig + h);
            let plus = f(&probe)?;
            probe.set(r, c, orig - h);
            let minus = f(&probe)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { row: r, col: c });
            }
            Ok((plus - minus) / (2.0 * h))
        })
        .collect::<Result<_>>()?;
    Matrix::from_vec(rows, cols, partials)
}

/// Elementwise comparison with `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn compare(analytic: &Matrix, numeric: &Matrix) -> Result<GradCheckReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::DimensionMismatch {
            expected: analytic.rows() * analytic.cols(),
            actual: numeric.rows() * numeric.cols(),
        });
    }
    let mut report = GradCheckReport::empty();
    for r in 0..analytic.rows() {
        for c in 0..analytic.cols() {
            let (a, b) = (analytic.get(r, c), numeric.get(r, c));
            let abs = (a - b).abs();
            let rel = abs / a.abs().max(b.abs()).max(REL_ERR_FLOOR);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_coordinate = (r, c);
            }
            report.max_abs_err = report.max_abs_err.max(abs);
            report.n_evaluated += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub n: usize,
    pub d: usize,
    pub n_trials: usize,
    pub seed: u64,
    /// Finite-difference step; [`default_step`] of the spec's τ when `None`.
    pub step: Option<f64>,
    pub precision: Precision,
    /// Test hook: perturbs the analytic gradient so the check must fail.
    pub inject_fault: bool,
}

/// Arithmetic used to evaluate the loss inside the difference quotient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// The production f64 loss.
    Double,
    /// The double-double reference loss.
    Extended,
}

impl GradCheckConfig {
    pub fn new(n: usize, d: usize, n_trials: usize, seed: u64) -> Self {
        Self {
            n,
            d,
            n_trials,
            seed,
            step: None,
            precision: Precision::Extended,
            inject_fault: false,
        }
    }
}

/// Random unit-norm rows with labels cycling over `max(2, n / 4)` classes.
pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<EmbeddingBatch> {
    let n_classes = (n / 4).max(2);
    let raw: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    let labels = (0..n).map(|k| k % n_classes).collect();
    EmbeddingBatch::from_unnormalized(&Matrix::from_vec(n, d, raw)?, labels)
}

/// Compares the analytic gradient of `Z ↦ batch_loss(normalize_rows(Z))`
/// against central differences on random batches.
pub fn check_loss_gradients(spec: &LossSpec, config: &GradCheckConfig) -> Result<GradCheckReport> {
    spec.validate()?;
    if config.n < 4 || config.d < 2 {
        return Err(Error::InvalidParameter(format!(
            "gradient check needs n >= 4 and d >= 2, got n={} d={}",
            config.n, config.d
        )));
    }
    let h = config.step.unwrap_or_else(|| default_step(spec.tau));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport::empty();
    let labels_of = |b: &EmbeddingBatch| b.labels().to_vec();
    for trial in 0..config.n_trials {
        let batch = random_batch(&mut rng, config.n, config.d)?;
        let z = batch.embeddings().clone();
        let labels = labels_of(&batch);
        let failure = |e: Error| {
            Error::GradCheck(format!(
                "variant {} seed {} trial {trial}: {e}",
                spec.variant, config.seed
            ))
        };
        let result = batch_loss(&batch, spec).map_err(failure)?;
        let mut analytic = normalize_rows_backward(&z, &result.grad).map_err(failure)?;
        if config.inject_fault {
            for g in analytic.as_mut_slice() {
                *g *= 1.01;
            }
        }
        let numeric = match config.precision {
            Precision::Double => {
                let f = |m: &Matrix| -> Result<f64> {
                    let b = EmbeddingBatch::new(normalize_rows(m)?, labels.clone())?;
                    Ok(batch_loss(&b, spec)?.loss)
                };
                finite_diff(f, &z, h)
            }
            Precision::Extended => {
                reference::ReferenceLoss::new(&z, &labels, *spec)?.central_difference(h)
            }
        }
        .map_err(failure)?;
        report.merge(&compare(&analytic, &numeric)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{dot_product_loss, LossVariant};

    #[test]
    fn quadratic_is_exact() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let g = finite_diff(|m| Ok(m.as_slice().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.get(0, 0) - 2.0).abs() < 1e-8);
        assert!((g.get(0, 1) - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let g = finite_diff(|_| Ok(7.0), &x, 1e-5).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_evaluation_names_coordinate() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let err = finite_diff(
            |m| Ok(if m.get(0, 1) > 2.0 { f64::NAN } else { 0.0 }),
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 0, col: 1 }));
        assert!(finite_diff(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn dot_product_gradient_agrees_at_two_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_batch(&mut rng, 8, 4).unwrap();
        let spec = LossSpec::new(LossVariant::DecreasingQuick { alpha: 2.0 }, 0.05).unwrap();
        let labels = batch.labels().to_vec();
        let analytic = batch_loss(&batch, &spec).unwrap().grad;
        let f = |m: &Matrix| Ok(dot_product_loss(m, &labels, &spec)?.loss);
        let coarse = finite_diff(f, batch.embeddings(), 1e-5).unwrap();
        let fine = finite_diff(f, batch.embeddings(), 1e-6).unwrap();
        assert!(compare(&analytic, &coarse).unwrap().max_rel_err < 1e-4);
        assert!(compare(&coarse, &fine).unwrap().max_rel_err < 1e-3);
    }

    #[test]
    fn default_variants_pass() {
        for variant in [LossVariant::DecreasingSlow, LossVariant::Original] {
            let spec = LossSpec::new(variant, 0.05).unwrap();
            let r = check_loss_gradients(&spec, &GradCheckConfig::new(16, 8, 20, 0)).unwrap();
            assert!(r.max_rel_err < 1e-4, "{variant}: {r:?}");
            assert_eq!(r.n_evaluated, 20 * 16 * 8);
        }
    }

    #[test]
    fn duplicated_rows_stay_finite() {
        let row = vec![0.6, 0.8];
        let x = Matrix::from_rows(&[row.clone(), row.clone(), row.clone(), row]).unwrap();
        let b = EmbeddingBatch::new(x.clone(), vec![0, 0, 1, 1]).unwrap();
        let spec = LossSpec::new(LossVariant::DecreasingQuick { alpha: 2.0 }, 0.01).unwrap();
        let r = batch_loss(&b, &spec).unwrap();
        r.grad.check_finite().unwrap();
        let labels = b.labels().to_vec();
        let numeric = finite_diff(
            |m| Ok(batch_loss(&EmbeddingBatch::new(normalize_rows(m)?, labels.clone())?, &spec)?.loss),
            &x,
            1e-7,
        )
        .unwrap();
        numeric.check_finite().unwrap();
    }

    #[test]
    fn injected_fault_is_detected() {
        let spec = LossSpec::new(LossVariant::DecreasingSlow, 0.05).unwrap();
        let mut cfg = GradCheckConfig::new(8, 4, 2, 0);
        cfg.inject_fault = true;
        let r = check_loss_gradients(&spec, &cfg).unwrap();
        assert!(r.max_rel_err > 1e-3);
    }

    #[test]
    fn second_order_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(&mut rng, 8, 4).unwrap();
        let spec = LossSpec::new(LossVariant::DecreasingSlow, 0.05).unwrap();
        let labels = batch.labels().to_vec();
        let f = |m: &Matrix| Ok(dot_product_loss(m, &labels, &spec)?.loss);
        let x = batch.embeddings();
        let steps = [4e-3, 2e-3, 1e-3];
        let est: Vec<Matrix> = steps.iter().map(|&h| finite_diff(f, x, h).unwrap()).collect();
        let diff_norm = |a: &Matrix, b: &Matrix| -> f64 {
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        };
        let ratio = diff_norm(&est[0], &est[1]) / diff_norm(&est[1], &est[2]);
        assert!((2.5..=6.0).contains(&ratio), "ratio {ratio}");
    }
}
