//! Retrieval metrics: Recall@k, mean intra/inter-class cosine distance and
//! NMI of a k-means clustering against the labels.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, EmbeddingBatch, Matrix};

/// Iteration cap used by [`evaluate`].
pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub recall: BTreeMap<usize, f64>,
    pub dists_intra: f64,
    pub dists_inter: f64,
    pub nmi: f64,
}

fn check_classes(labels: &[usize]) -> Result<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    let singletons: Vec<usize> = counts
        .iter()
        .filter(|(_, &c)| c < 2)
        .map(|(&l, _)| l)
        .collect();
    if !singletons.is_empty() {
        return Err(Error::SingletonClasses(singletons));
    }
    Ok(counts.len())
}

/// Other instances ordered by decreasing similarity to `q`, ties to the
/// lower index.
fn neighbours(x: &Matrix, q: usize) -> Vec<usize> {
    let sims: Vec<f64> = (0..x.rows()).map(|j| dot(x.row(q), x.row(j))).collect();
    let mut order: Vec<usize> = (0..x.rows()).filter(|&j| j != q).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// Fraction of queries with a same-class instance among their `k` nearest
/// neighbours, for each `k` in `ks`. Every instance is used as a query.
pub fn recall_at_k(batch: &EmbeddingBatch, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let labels = batch.labels();
    check_classes(labels)?;
    let n = batch.len();
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > n - 1) {
        return Err(Error::InvalidParameter(format!(
            "recall k must be in 1..={}, got {bad}",
            n - 1
        )));
    }
    // Position of the first same-class neighbour, per query.
    let first_hit: Vec<usize> = (0..n)
        .map(|q| {
            neighbours(batch.embeddings(), q)
                .iter()
                .position(|&j| labels[j] == labels[q])
                .expect("every class has a second member")
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|&&p| p < k).count();
            (k, hits as f64 / n as f64)
        })
        .collect())
}

/// Mean `1 - cos` over same-class pairs and over cross-class pairs.
pub fn dists(batch: &EmbeddingBatch) -> Result<(f64, f64)> {
    let labels = batch.labels();
    if check_classes(labels)? < 2 {
        return Err(Error::InvalidBatch("dists need at least two classes".into()));
    }
    let x = batch.embeddings();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..batch.len() {
        for j in i + 1..batch.len() {
            let d = 1.0 - dot(x.row(i), x.row(j));
            if labels[i] == labels[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    Ok((intra / n_intra as f64, inter / n_inter as f64))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center, ties to the lower index.
fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm from k-means++ seeding. A cluster that ends up empty is
/// moved to the point farthest from its current center.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iters: usize) -> Result<Vec<usize>> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "k-means needs 1 <= k <= {n}, got {k}"
        )));
    }
    points.check_finite()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<Vec<f64>> = vec![points.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            while d2[chosen] == 0.0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points.row(pick).to_vec());
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(points.row(i), &centers[centers.len() - 1]));
        }
    }

    let d = points.cols();
    let mut assignment: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centers).0).collect();
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| !taken[i])
                .map(|i| (i, sq_dist(points.row(i), &centers[assignment[i]])))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            taken[far.0] = true;
            centers[c] = points.row(far.0).to_vec();
        }
        let next: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centers).0).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(assignment)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(A; L) / sqrt(H(A) H(L))` with natural logarithms.
///
/// Two single-cluster partitions score 1; a single-cluster partition
/// against any other scores 0.
pub fn nmi(assignment: &[usize], labels: &[usize]) -> Result<f64> {
    if assignment.is_empty() {
        return Err(Error::InvalidParameter("nmi of an empty partition".into()));
    }
    if assignment.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: assignment.len(),
        });
    }
    let n = assignment.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cl: BTreeMap<usize, usize> = BTreeMap::new();
    for (&a, &l) in assignment.iter().zip(labels) {
        *joint.entry((a, l)).or_insert(0) += 1;
        *ca.entry(a).or_insert(0) += 1;
        *cl.entry(l).or_insert(0) += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hl = entropy(cl.values().copied(), n);
    if ca.len() == 1 || cl.len() == 1 {
        return Ok(if ca.len() == cl.len() { 1.0 } else { 0.0 });
    }
    if joint.len() == ca.len() && joint.len() == cl.len() {
        // The clusters are the classes under some relabeling.
        return Ok(1.0);
    }
    let mut cells: Vec<(&(usize, usize), &usize)> = joint.iter().collect();
    cells.sort();
    let mi: f64 = cells
        .into_iter()
        .map(|(&(a, l), &c)| {
            let pj = c as f64 / n;
            let pa = ca[&a] as f64 / n;
            let pl = cl[&l] as f64 / n;
            pj * (pj / (pa * pl)).ln()
        })
        .sum();
    Ok((mi / (ha * hl).sqrt()).clamp(0.0, 1.0))
}

/// Recall at `ks`, dists, and NMI of k-means with one cluster per class.
pub fn evaluate(batch: &EmbeddingBatch, ks: &[usize], seed: u64) -> Result<RetrievalReport> {
    let recall = recall_at_k(batch, ks)?;
    let (dists_intra, dists_inter) = dists(batch)?;
    let n_classes = check_classes(batch.labels())?;
    let clusters = kmeans(batch.embeddings(), n_classes, seed, KMEANS_MAX_ITERS)?;
    Ok(RetrievalReport {
        recall,
        dists_intra,
        dists_inter,
        nmi: nmi(&clusters, batch.labels())?,
    })
}
