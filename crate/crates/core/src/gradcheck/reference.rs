//! Double-double evaluation of `Z ↦ batch_loss(normalize_rows(Z))`.
//!
//! Written separately from the production path so finite differences taken
//! through it check the analytic gradient against an independent loss, and so
//! the difference quotient is not swamped by f64 roundoff at small steps.

use rayon::prelude::*;

use super::double_double::Dd;
use crate::error::{Error, Result};
use crate::losses::{LossSpec, LossVariant};
use crate::numerics::{Matrix, NORM_EPS};

/// Caches the unit rows, similarities and sigmoid terms of the base point;
/// a single-coordinate shift only recomputes the terms touching its row.
pub struct ReferenceLoss<'a> {
    base: &'a Matrix,
    labels: &'a [usize],
    spec: LossSpec,
    tau: Dd,
    unit_rows: Vec<Vec<Dd>>,
    sims: Vec<Dd>,
    /// `G(s_qk - s_qi)` at index `(q * n + i) * n + k`.
    terms: Vec<Dd>,
}

fn unit(row: &[Dd]) -> Result<Vec<Dd>> {
    let norm = row.iter().fold(Dd::ZERO, |acc, &v| acc + v * v).sqrt();
    if norm.hi <= NORM_EPS {
        return Err(Error::DegenerateNorm {
            norm: norm.hi,
            threshold: NORM_EPS,
        });
    }
    Ok(row.iter().map(|&v| v / norm).collect())
}

fn dot(a: &[Dd], b: &[Dd]) -> Dd {
    a.iter().zip(b).fold(Dd::ZERO, |acc, (&x, &y)| acc + x * y)
}

fn sigmoid(x: Dd, tau: Dd) -> Dd {
    let t = x / tau;
    if t.hi >= 0.0 {
        Dd::ONE / (Dd::ONE + (-t).exp())
    } else {
        let e = t.exp();
        e / (Dd::ONE + e)
    }
}

fn positive_loss(variant: LossVariant, r_neg: Dd, r_pos: Dd) -> Dd {
    let one = Dd::ONE;
    match variant {
        LossVariant::Original => r_neg,
        LossVariant::IncreasingUnbounded => (one + r_neg) * (one + r_neg).ln(),
        LossVariant::IncreasingUnboundedPrime => (one + r_neg) * (one + r_neg).ln() - r_neg,
        LossVariant::IncreasingBounded { b } => {
            let b = Dd::from_f64(b);
            let br = b * r_neg;
            (br - (one + br).ln()) / (b * b)
        }
        LossVariant::DecreasingSlow => (one + r_neg).ln(),
        LossVariant::DecreasingQuick { alpha } => {
            one - (-(Dd::from_f64(alpha) * (one + r_neg).ln())).exp()
        }
        LossVariant::SmoothAp => one - (one + r_pos) / (one + r_pos + r_neg),
    }
}

impl<'a> ReferenceLoss<'a> {
    pub fn new(base: &'a Matrix, labels: &'a [usize], spec: LossSpec) -> Result<Self> {
        spec.validate()?;
        let n = base.rows();
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: labels.len(),
            });
        }
        let unit_rows = (0..n)
            .map(|r| {
                let row: Vec<Dd> = base.row(r).iter().map(|&v| Dd::from_f64(v)).collect();
                unit(&row)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sims = vec![Dd::ZERO; n * n];
        for q in 0..n {
            for k in 0..n {
                sims[q * n + k] = dot(&unit_rows[q], &unit_rows[k]);
            }
        }
        let tau = Dd::from_f64(spec.tau);
        let mut terms = vec![Dd::ZERO; n * n * n];
        for q in 0..n {
            for i in 0..n {
                for k in 0..n {
                    terms[(q * n + i) * n + k] = sigmoid(sims[q * n + k] - sims[q * n + i], tau);
                }
            }
        }
        Ok(Self {
            base,
            labels,
            spec,
            tau,
            unit_rows,
            sims,
            terms,
        })
    }

    /// Loss with entry `(row, col)` shifted by `delta`, exactly.
    pub fn eval(&self, shift: Option<(usize, usize, f64)>) -> Result<Dd> {
        let n = self.base.rows();
        // Similarities of the shifted row to every row.
        let moved: Option<(usize, Vec<Dd>)> = match shift {
            None => None,
            Some((r, c, delta)) => {
                let mut row: Vec<Dd> = self.base.row(r).iter().map(|&v| Dd::from_f64(v)).collect();
                row[c] = row[c] + Dd::from_f64(delta);
                let row = unit(&row)?;
                let s = (0..n)
                    .map(|k| if k == r { dot(&row, &row) } else { dot(&row, &self.unit_rows[k]) })
                    .collect();
                Some((r, s))
            }
        };
        let sim = |q: usize, k: usize| -> Dd {
            match &moved {
                Some((r, s)) if q == *r => s[k],
                Some((r, s)) if k == *r => s[q],
                _ => self.sims[q * n + k],
            }
        };
        let touched = |q: usize, i: usize, k: usize| match &moved {
            Some((r, _)) => q == *r || i == *r || k == *r,
            None => false,
        };

        let mut total = Dd::ZERO;
        let mut used = 0usize;
        for q in 0..n {
            let positives: Vec<usize> = (0..n)
                .filter(|&k| k != q && self.labels[k] == self.labels[q])
                .collect();
            if positives.is_empty() {
                continue;
            }
            let mut query_total = Dd::ZERO;
            for &i in &positives {
                let mut r_neg = Dd::ZERO;
                let mut r_pos = Dd::ZERO;
                for k in 0..n {
                    if k == q || k == i {
                        continue;
                    }
                    let g = if touched(q, i, k) {
                        sigmoid(sim(q, k) - sim(q, i), self.tau)
                    } else {
                        self.terms[(q * n + i) * n + k]
                    };
                    if self.labels[k] == self.labels[q] {
                        r_pos = r_pos + g;
                    } else {
                        r_neg = r_neg + g;
                    }
                }
                query_total = query_total + positive_loss(self.spec.variant, r_neg, r_pos);
            }
            total = total + query_total / Dd::from_f64(positives.len() as f64);
            used += 1;
        }
        if used == 0 {
            return Err(Error::NoValidQueries);
        }
        Ok(total / Dd::from_f64(used as f64))
    }

    /// Central differences with step `h`, every quotient formed in
    /// double-double before rounding to f64.
    pub fn central_difference(&self, h: f64) -> Result<Matrix> {
        let (n, d) = self.base.shape();
        let two_h = Dd::from_f64(2.0 * h);
        let partials: Vec<f64> = (0..n * d)
            .into_par_iter()
            .map(|p| {
                let (r, c) = (p / d, p % d);
                let plus = self.eval(Some((r, c, h)))?;
                let minus = self.eval(Some((r, c, -h)))?;
                let g = ((plus - minus) / two_h).to_f64();
                if !g.is_finite() {
                    return Err(Error::NonFinite { row: r, col: c });
                }
                Ok(g)
            })
            .collect::<Result<_>>()?;
        Matrix::from_vec(n, d, partials)
    }
}
