//! Hard and sigmoid-relaxed rank counts.
//!
//! For a positive instance `i` of a query, the rank over a candidate set counts
//! how many candidates score strictly higher than `i`. The smooth version
//! replaces the step with `G(x; τ) = 1 / (1 + exp(-x/τ))`.

use crate::error::{Error, Result};

/// Sigmoid `G(x; τ)` and its derivative with respect to `x`.
///
/// Branches on the sign of `x` so `exp` never sees a large positive argument.
pub fn sigmoid(x: f64, tau: f64) -> Result<(f64, f64)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(sigmoid_unchecked(x, tau))
}

#[inline]
pub(crate) fn sigmoid_unchecked(x: f64, tau: f64) -> (f64, f64) {
    let t = x / tau;
    let value = if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    };
    (value, value * (1.0 - value) / tau)
}

/// Which candidate set a rank is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankSet {
    Negatives,
    Positives,
}

/// Similarities of every other batch instance to one query, split by class.
///
/// Indices are batch row ids; the query itself is in neither list.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryContext {
    pub query_index: usize,
    pub pos_sims: Vec<(usize, f64)>,
    pub neg_sims: Vec<(usize, f64)>,
}

impl QueryContext {
    pub fn new(
        query_index: usize,
        pos_sims: Vec<(usize, f64)>,
        neg_sims: Vec<(usize, f64)>,
    ) -> Result<Self> {
        for &(idx, s) in pos_sims.iter().chain(&neg_sims) {
            if idx == query_index {
                return Err(Error::InvalidParameter(format!(
                    "query {query_index} appears in its own candidate set"
                )));
            }
            if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&s) {
                return Err(Error::InvalidParameter(format!(
                    "similarity {s} of instance {idx} outside [-1, 1]"
                )));
            }
        }
        Ok(Self {
            query_index,
            pos_sims,
            neg_sims,
        })
    }

    /// Builds the context of row `query` from a full similarity matrix.
    pub fn from_similarities(sims: &crate::numerics::Matrix, labels: &[usize], query: usize) -> Self {
        let mut pos_sims = Vec::new();
        let mut neg_sims = Vec::new();
        for (k, &label) in labels.iter().enumerate() {
            if k == query {
                continue;
            }
            let s = sims.get(query, k);
            if label == labels[query] {
                pos_sims.push((k, s));
            } else {
                neg_sims.push((k, s));
            }
        }
        Self {
            query_index: query,
            pos_sims,
            neg_sims,
        }
    }

    fn set(&self, over: RankSet) -> &[(usize, f64)] {
        match over {
            RankSet::Negatives => &self.neg_sims,
            RankSet::Positives => &self.pos_sims,
        }
    }

    /// Number of negatives scoring strictly above the `pos`-th positive.
    pub fn hard_rank_neg(&self, pos: usize) -> usize {
        self.hard_rank(pos, RankSet::Negatives)
    }

    /// Strict-inequality count over `over`, skipping the positive itself.
    pub fn hard_rank(&self, pos: usize, over: RankSet) -> usize {
        let (i, s_i) = self.pos_sims[pos];
        self.set(over)
            .iter()
            .filter(|&&(j, s_j)| j != i && s_j - s_i > 0.0)
            .count()
    }

    /// Smooth rank of the `pos`-th positive over `over`, with partials.
    pub fn smooth_rank(&self, pos: usize, over: RankSet, tau: f64) -> Result<RankComputation> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let (i, s_i) = self.pos_sims[pos];
        let mut value = 0.0;
        let mut d_self = 0.0;
        let mut partials = Vec::with_capacity(self.set(over).len() + 1);
        for &(j, s_j) in self.set(over) {
            if j == i {
                continue;
            }
            let (g, dg) = sigmoid_unchecked(s_j - s_i, tau);
            value += g;
            d_self -= dg;
            partials.push((j, dg));
        }
        if !partials.is_empty() {
            partials.push((i, d_self));
        }
        Ok(RankComputation { value, partials })
    }
}

/// A smooth rank value and its partials with respect to the similarities it
/// depends on, keyed by batch row id.
///
/// When non-empty, the last entry is the partial with respect to the ranked
/// positive's own similarity, which equals minus the sum of the others.
#[derive(Debug, Clone, PartialEq)]
pub struct RankComputation {
    pub value: f64,
    pub partials: Vec<(usize, f64)>,
}

impl RankComputation {
    pub fn partial(&self, index: usize) -> Option<f64> {
        self.partials
            .iter()
            .find(|(j, _)| *j == index)
            .map(|&(_, d)| d)
    }
}
