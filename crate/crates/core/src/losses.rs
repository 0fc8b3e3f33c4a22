//! Rank-based losses and their gradients.
//!
//! Each variant is a function `L(R_neg)` of the (smooth) number of negatives
//! ranked above a positive instance. The shape of `dL/dR_neg` decides how
//! correction pressure is spread over positives:
//!
//! | variant | `L(R)` | `dL/dR` |
//! |---|---|---|
//! | `o` | `R` | `1` |
//! | `iu` | `(1+R) ln(1+R)` | `ln(1+R) + 1` |
//! | `iu-prime` | `(1+R) ln(1+R) - R` | `ln(1+R)` |
//! | `ib:b` | `(bR - ln(1+bR)) / b²` | `R / (1+bR)` |
//! | `ds` | `ln(1+R)` | `1 / (1+R)` |
//! | `dq:α` | `1 - (1+R)^-α` | `α (1+R)^-(α+1)` |
//! | `smoothap` | `1 - (1+Rp)/(1+Rp+R)` | `(1+Rp)/(1+Rp+R)²` |
//!
//! The batch loss uses every instance as a query against the rest of the
//! batch, averages over the query's positives, then over queries that have at
//! least one positive.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gram, gram_backward, EmbeddingBatch, Matrix};
use crate::smooth_rank::{QueryContext, RankSet};

/// Relaxation temperature used for training.
pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LossVariant {
    Original,
    IncreasingUnbounded,
    /// Antiderivative of `ln(1+R)`; differs from `IncreasingUnbounded` by `-R`.
    IncreasingUnboundedPrime,
    IncreasingBounded { b: f64 },
    DecreasingSlow,
    DecreasingQuick { alpha: f64 },
    SmoothAp,
}

impl LossVariant {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossVariant::IncreasingBounded { b } if !(b > 0.0 && b.is_finite()) => Err(
                Error::InvalidParameter(format!("ib requires b > 0, got {b}")),
            ),
            LossVariant::DecreasingQuick { alpha } if !(alpha >= 1.0 && alpha.is_finite()) => Err(
                Error::InvalidParameter(format!("dq requires alpha >= 1, got {alpha}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn uses_positive_rank(&self) -> bool {
        matches!(self, LossVariant::SmoothAp)
    }

    /// Loss of one positive instance. No domain checks.
    pub fn loss(&self, r_neg: f64, r_pos: f64) -> f64 {
        let r = r_neg;
        match *self {
            LossVariant::Original => r,
            LossVariant::IncreasingUnbounded => (1.0 + r) * r.ln_1p(),
            LossVariant::IncreasingUnboundedPrime => (1.0 + r) * r.ln_1p() - r,
            LossVariant::IncreasingBounded { b } => (b * r - (b * r).ln_1p()) / (b * b),
            LossVariant::DecreasingSlow => r.ln_1p(),
            LossVariant::DecreasingQuick { alpha } => 1.0 - (1.0 + r).powf(-alpha),
            LossVariant::SmoothAp => 1.0 - (1.0 + r_pos) / (1.0 + r_pos + r),
        }
    }

    /// `dL/dR_neg`.
    pub fn derivative(&self, r_neg: f64, r_pos: f64) -> f64 {
        let r = r_neg;
        match *self {
            LossVariant::Original => 1.0,
            LossVariant::IncreasingUnbounded => r.ln_1p() + 1.0,
            LossVariant::IncreasingUnboundedPrime => r.ln_1p(),
            LossVariant::IncreasingBounded { b } => r / (1.0 + b * r),
            LossVariant::DecreasingSlow => 1.0 / (1.0 + r),
            LossVariant::DecreasingQuick { alpha } => alpha * (1.0 + r).powf(-alpha - 1.0),
            LossVariant::SmoothAp => {
                let denom = 1.0 + r_pos + r;
                (1.0 + r_pos) / (denom * denom)
            }
        }
    }

    /// `dL/dR_pos`; zero for every variant except Smooth-AP.
    pub fn derivative_wrt_pos(&self, r_neg: f64, r_pos: f64) -> f64 {
        match *self {
            LossVariant::SmoothAp => {
                let denom = 1.0 + r_pos + r_neg;
                -r_neg / (denom * denom)
            }
            _ => 0.0,
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossVariant::Original => f.write_str("o"),
            LossVariant::IncreasingUnbounded => f.write_str("iu"),
            LossVariant::IncreasingUnboundedPrime => f.write_str("iu-prime"),
            LossVariant::IncreasingBounded { b } => write!(f, "ib:{b}"),
            LossVariant::DecreasingSlow => f.write_str("ds"),
            LossVariant::DecreasingQuick { alpha } => write!(f, "dq:{alpha}"),
            LossVariant::SmoothAp => f.write_str("smoothap"),
        }
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.as_str(), None),
        };
        let param = |default: f64| -> Result<f64> {
            match arg {
                None => Ok(default),
                Some(a) => a
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidParameter(format!("bad loss parameter {a:?}"))),
            }
        };
        let no_param = |v: LossVariant| -> Result<LossVariant> {
            match arg {
                None => Ok(v),
                Some(_) => Err(Error::InvalidParameter(format!(
                    "loss {name} takes no parameter"
                ))),
            }
        };
        let variant = match name {
            "o" => no_param(LossVariant::Original)?,
            "iu" => no_param(LossVariant::IncreasingUnbounded)?,
            "iu-prime" => no_param(LossVariant::IncreasingUnboundedPrime)?,
            "ib" => LossVariant::IncreasingBounded { b: param(4.0)? },
            "ds" => no_param(LossVariant::DecreasingSlow)?,
            "dq" => LossVariant::DecreasingQuick { alpha: param(2.0)? },
            "smoothap" | "ap" => no_param(LossVariant::SmoothAp)?,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown loss variant {other:?}"
                )))
            }
        };
        variant.validate()?;
        Ok(variant)
    }
}

impl TryFrom<String> for LossVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LossVariant> for String {
    fn from(v: LossVariant) -> String {
        v.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub variant: LossVariant,
    pub tau: f64,
}

impl LossSpec {
    pub fn new(variant: LossVariant, tau: f64) -> Result<Self> {
        let spec = Self { variant, tau };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

fn check_ranks(r_neg: f64, r_pos: f64) -> Result<()> {
    if !(r_neg >= 0.0 && r_neg.is_finite() && r_pos >= 0.0 && r_pos.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "ranks must be finite and non-negative, got R_neg={r_neg} R_pos={r_pos}"
        )));
    }
    Ok(())
}

pub fn per_query_loss(variant: LossVariant, r_neg: f64, r_pos: f64) -> Result<f64> {
    variant.validate()?;
    check_ranks(r_neg, r_pos)?;
    Ok(variant.loss(r_neg, r_pos))
}

pub fn derivative_wrt_rank(variant: LossVariant, r_neg: f64, r_pos: f64) -> Result<f64> {
    variant.validate()?;
    check_ranks(r_neg, r_pos)?;
    Ok(variant.derivative(r_neg, r_pos))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    /// Gradient with respect to the embedding rows.
    pub grad: Matrix,
    pub queries_used: usize,
}

/// Loss of a single query, averaged over its positives, with the exact
/// step indicator. `None` when the query has no positives.
pub fn hard_query_loss(ctx: &QueryContext, variant: LossVariant) -> Option<f64> {
    if ctx.pos_sims.is_empty() {
        return None;
    }
    let total: f64 = (0..ctx.pos_sims.len())
        .map(|p| {
            let r_neg = ctx.hard_rank(p, RankSet::Negatives) as f64;
            let r_pos = if variant.uses_positive_rank() {
                ctx.hard_rank(p, RankSet::Positives) as f64
            } else {
                0.0
            };
            variant.loss(r_neg, r_pos)
        })
        .sum();
    Some(total / ctx.pos_sims.len() as f64)
}

/// Smooth loss of a single query and its gradient with respect to the
/// query's similarity row (indexed by batch row id, length `n`).
pub fn smooth_query_loss(
    ctx: &QueryContext,
    spec: &LossSpec,
    n: usize,
) -> Result<Option<(f64, Vec<f64>)>> {
    if ctx.pos_sims.is_empty() {
        return Ok(None);
    }
    let scale = 1.0 / ctx.pos_sims.len() as f64;
    let mut total = 0.0;
    let mut grad_row = vec![0.0; n];
    for p in 0..ctx.pos_sims.len() {
        let r_neg = ctx.smooth_rank(p, RankSet::Negatives, spec.tau)?;
        let r_pos = if spec.variant.uses_positive_rank() {
            Some(ctx.smooth_rank(p, RankSet::Positives, spec.tau)?)
        } else {
            None
        };
        let rp = r_pos.as_ref().map_or(0.0, |r| r.value);
        total += spec.variant.loss(r_neg.value, rp);
        let d_neg = spec.variant.derivative(r_neg.value, rp) * scale;
        for &(j, d) in &r_neg.partials {
            grad_row[j] += d_neg * d;
        }
        if let Some(r_pos) = r_pos {
            let d_pos = spec.variant.derivative_wrt_pos(r_neg.value, rp) * scale;
            for &(j, d) in &r_pos.partials {
                grad_row[j] += d_pos * d;
            }
        }
    }
    Ok(Some((total * scale, grad_row)))
}

/// Batch loss where similarities are plain dot products of the rows of `x`.
///
/// Rows need not be unit-norm, which makes this the function finite
/// differences can probe directly. [`batch_loss`] calls it on unit rows.
pub fn dot_product_loss(x: &Matrix, labels: &[usize], spec: &LossSpec) -> Result<LossResult> {
    spec.validate()?;
    let n = x.rows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: labels.len(),
        });
    }
    let sims = gram(x);
    let per_query: Vec<Option<(f64, Vec<f64>)>> = (0..n)
        .into_par_iter()
        .map(|q| {
            let ctx = QueryContext::from_similarities(&sims, labels, q);
            smooth_query_loss(&ctx, spec, n)
        })
        .collect::<Result<_>>()?;

    let queries_used = per_query.iter().filter(|r| r.is_some()).count();
    if queries_used == 0 {
        return Err(Error::NoValidQueries);
    }
    let inv_q = 1.0 / queries_used as f64;
    let mut loss = 0.0;
    let mut grad_sims = Matrix::zeros(n, n);
    for (q, entry) in per_query.into_iter().enumerate() {
        if let Some((l, row)) = entry {
            loss += l;
            for (dst, g) in grad_sims.row_mut(q).iter_mut().zip(row) {
                *dst = g * inv_q;
            }
        }
    }
    loss *= inv_q;
    let grad = gram_backward(x, &grad_sims);
    if !loss.is_finite() {
        return Err(Error::NonFinite { row: 0, col: 0 });
    }
    grad.check_finite()?;
    Ok(LossResult {
        loss,
        grad,
        queries_used,
    })
}

pub fn batch_loss(batch: &EmbeddingBatch, spec: &LossSpec) -> Result<LossResult> {
    dot_product_loss(batch.embeddings(), batch.labels(), spec)
}

/// Same averaging as [`batch_loss`] with the exact step indicator. No gradient.
pub fn hard_batch_loss(batch: &EmbeddingBatch, variant: LossVariant) -> Result<f64> {
    variant.validate()?;
    let sims = gram(batch.embeddings());
    let labels = batch.labels();
    let mut total = 0.0;
    let mut used = 0usize;
    for q in 0..batch.len() {
        let ctx = QueryContext::from_similarities(&sims, labels, q);
        if let Some(l) = hard_query_loss(&ctx, variant) {
            total += l;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::NoValidQueries);
    }
    Ok(total / used as f64)
}
