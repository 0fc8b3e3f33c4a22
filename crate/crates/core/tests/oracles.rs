//! Losses and metrics against independent brute-force computations.

use pnp_core::gradcheck::random_batch;
use pnp_core::metrics::{dists, recall_at_k};
use pnp_core::numerics::{cosine_sim, gram};
use pnp_core::smooth_rank::QueryContext;
use pnp_core::{batch_loss, hard_batch_loss, EmbeddingBatch, LossSpec, LossVariant, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Average precision of one query: walk the other instances by decreasing
/// similarity and average the precision at each relevant one.
fn textbook_ap(sims: &[f64], labels: &[usize], q: usize) -> Option<f64> {
    let mut order: Vec<usize> = (0..sims.len()).filter(|&j| j != q).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap());
    let mut hits = 0.0;
    let mut total = 0.0;
    for (pos, &j) in order.iter().enumerate() {
        if labels[j] == labels[q] {
            hits += 1.0;
            total += hits / (pos + 1) as f64;
        }
    }
    (hits > 0.0).then(|| total / hits)
}

fn min_gap(x: &Matrix) -> f64 {
    let s = gram(x);
    let mut gap = f64::INFINITY;
    for q in 0..x.rows() {
        for a in 0..x.rows() {
            for b in a + 1..x.rows() {
                if a != q && b != q {
                    gap = gap.min((s.get(q, a) - s.get(q, b)).abs());
                }
            }
        }
    }
    gap
}

fn separated_batch(rng: &mut ChaCha8Rng) -> EmbeddingBatch {
    loop {
        let b = random_batch(rng, 6, 3).unwrap();
        if min_gap(b.embeddings()) >= 0.05 {
            return b;
        }
    }
}

#[test]
fn hard_smooth_ap_is_one_minus_average_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let b = separated_batch(&mut rng);
        let s = gram(b.embeddings());
        let n = b.len();
        let aps: Vec<f64> = (0..n)
            .filter_map(|q| textbook_ap(s.row(q), b.labels(), q))
            .collect();
        let expected = aps.iter().map(|ap| 1.0 - ap).sum::<f64>() / aps.len() as f64;
        let got = hard_batch_loss(&b, LossVariant::SmoothAp).unwrap();
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }
}

#[test]
fn smooth_loss_approaches_hard_loss_at_low_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for variant in ["o", "iu", "ib:4", "ds", "dq:2", "smoothap"] {
        let v: LossVariant = variant.parse().unwrap();
        let b = separated_batch(&mut rng);
        let smooth = batch_loss(&b, &LossSpec::new(v, 1e-4).unwrap()).unwrap().loss;
        let hard = hard_batch_loss(&b, v).unwrap();
        assert!((smooth - hard).abs() < 1e-3, "{variant}: {smooth} vs {hard}");
    }
}

#[test]
fn perfect_ranking_is_the_only_zero_of_hard_ap_loss() {
    let x = Matrix::from_rows(&[
        vec![1.0, 0.0],
        vec![0.9, 0.1],
        vec![0.0, 1.0],
        vec![0.1, 0.9],
    ])
    .unwrap();
    let good = EmbeddingBatch::from_unnormalized(&x, vec![0, 0, 1, 1]).unwrap();
    assert_eq!(hard_batch_loss(&good, LossVariant::SmoothAp).unwrap(), 0.0);
    let bad = EmbeddingBatch::from_unnormalized(&x, vec![0, 1, 0, 1]).unwrap();
    assert!(hard_batch_loss(&bad, LossVariant::SmoothAp).unwrap() > 0.0);
}

#[test]
fn per_query_fixture() {
    let ctx = QueryContext::new(0, vec![(1, 0.8), (2, 0.4)], vec![(3, 0.6)]).unwrap();
    let loss = |v: &str| pnp_core::losses::hard_query_loss(&ctx, v.parse().unwrap()).unwrap();
    assert!((loss("o") - 0.5).abs() < 1e-12);
    assert!((loss("ds") - 2f64.ln() / 2.0).abs() < 1e-12);
    assert!((loss("dq:2") - 0.375).abs() < 1e-12);
    assert!((loss("smoothap") - 1.0 / 6.0).abs() < 1e-12);
}

#[test]
fn recall_and_dists_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let b = random_batch(&mut rng, 20, 4).unwrap();
        let x = b.embeddings();
        let labels = b.labels();
        let r = recall_at_k(&b, &[1, 2, 5]).unwrap();
        for k in [1, 2, 5] {
            let mut hits = 0;
            for q in 0..20 {
                let mut scored: Vec<(f64, usize)> = (0..20)
                    .filter(|&j| j != q)
                    .map(|j| (cosine_sim(x.row(q), x.row(j)).unwrap(), j))
                    .collect();
                scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                if scored[..k].iter().any(|&(_, j)| labels[j] == labels[q]) {
                    hits += 1;
                }
            }
            assert_eq!(r[&k], hits as f64 / 20.0);
        }
        let (intra, inter) = dists(&b).unwrap();
        let (mut si, mut ni, mut se, mut ne) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..20 {
            for j in 0..20 {
                if i == j {
                    continue;
                }
                let d = 1.0 - cosine_sim(x.row(i), x.row(j)).unwrap();
                if labels[i] == labels[j] {
                    si += d;
                    ni += 1.0;
                } else {
                    se += d;
                    ne += 1.0;
                }
            }
        }
        assert!((intra - si / ni).abs() < 1e-12);
        assert!((inter - se / ne).abs() < 1e-12);
    }
}
