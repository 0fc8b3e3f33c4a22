//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs with `cargo test --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use pnp_core::experiment::{
    default_check_variants, grad_check_all, robustness, robustness_variants, train_toy,
    ExperimentConfig,
};
use pnp_core::gradcheck::{random_batch, GradCheckConfig};
use pnp_core::losses::{derivative_wrt_rank, hard_query_loss, per_query_loss};
use pnp_core::metrics::{dists, nmi, recall_at_k};
use pnp_core::numerics::{cosine_sim, gram};
use pnp_core::smooth_rank::QueryContext;
use pnp_core::{batch_loss, hard_batch_loss, EmbeddingBatch, LossSpec, LossVariant, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn v(name: &str) -> LossVariant {
    name.parse().expect("valid variant")
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let config = GradCheckConfig::new(16, 8, 20, 0);
    let summary =
        grad_check_all(&default_check_variants(), &[0.05, 0.01], &config).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = |tau: f64| {
        summary
            .entries
            .iter()
            .filter(|e| e.tau == tau)
            .map(|e| (e.report.max_rel_err, e.variant))
            .fold((0.0, v("o")), |a, b| if b.0 > a.0 { b } else { a })
    };
    let (w05, v05) = worst(0.05);
    let (w01, v01) = worst(0.01);
    ensure(w05 < 1e-4, || format!("tau=0.05 worst {w05:.3e} ({v05})"))?;
    ensure(w01 < 1e-3, || format!("tau=0.01 worst {w01:.3e} ({v01})"))?;
    ensure(summary.entries.iter().all(|e| e.tau != 0.01 || e.step == 1e-7), || {
        "tau=0.01 did not use h=1e-7".into()
    })?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "10 variants x 20 batches; worst rel err {w05:.2e} at tau=0.05, {w01:.2e} at tau=0.01; {secs:.1}s"
    ))
}

fn five_point(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 2e-3 * (1.0 + x);
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

fn derivative_identities() -> Outcome {
    let all = [
        "o", "iu", "iu-prime", "ib:1", "ib:4", "ds", "dq:1", "dq:2", "dq:4", "smoothap",
    ];
    let mut worst: f64 = 0.0;
    for name in all {
        let var = v(name);
        for r in [0.1, 1.0, 5.0, 20.0] {
            for rp in [0.0, 1.0] {
                let numeric = five_point(|x| per_query_loss(var, x, rp).unwrap(), r);
                let analytic = derivative_wrt_rank(var, r, rp).map_err(|e| e.to_string())?;
                let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(rel);
                ensure(rel < 1e-8, || format!("{name} R={r} R_pos={rp}: rel err {rel:.2e}"))?;
            }
        }
    }
    let grid: Vec<f64> = (0..1000).map(|i| 100.0 * i as f64 / 999.0).collect();
    let deriv = |name: &str| -> Vec<f64> {
        grid.iter().map(|&r| derivative_wrt_rank(v(name), r, 0.0).unwrap()).collect()
    };
    for name in ["ib:1", "ib:4", "iu", "iu-prime"] {
        let d = deriv(name);
        ensure(d.windows(2).all(|w| w[1] > w[0]), || format!("{name} not strictly increasing"))?;
    }
    for name in ["ds", "dq:1", "dq:2", "dq:4"] {
        let d = deriv(name);
        ensure(d.windows(2).all(|w| w[1] < w[0]), || format!("{name} not strictly decreasing"))?;
    }
    Ok(format!("worst rel err {worst:.2e}; monotonicity holds on 1000-point grid"))
}

fn min_gap(x: &Matrix) -> f64 {
    let s = gram(x);
    let n = x.rows();
    let mut gap = f64::INFINITY;
    for q in 0..n {
        for a in 0..n {
            for b in a + 1..n {
                if a != q && b != q {
                    gap = gap.min((s.get(q, a) - s.get(q, b)).abs());
                }
            }
        }
    }
    gap
}

fn textbook_ap(sims: &[f64], labels: &[usize], q: usize) -> Option<f64> {
    let mut order: Vec<usize> = (0..sims.len()).filter(|&j| j != q).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap());
    let (mut hits, mut total) = (0.0, 0.0);
    for (pos, &j) in order.iter().enumerate() {
        if labels[j] == labels[q] {
            hits += 1.0;
            total += hits / (pos + 1) as f64;
        }
    }
    (hits > 0.0).then(|| total / hits)
}

fn perfectly_ranked(sims: &Matrix, labels: &[usize]) -> bool {
    (0..labels.len()).all(|q| {
        let others = (0..labels.len()).filter(|&j| j != q);
        let worst_pos = others
            .clone()
            .filter(|&j| labels[j] == labels[q])
            .map(|j| sims.get(q, j))
            .fold(f64::INFINITY, f64::min);
        let best_neg = others
            .filter(|&j| labels[j] != labels[q])
            .map(|j| sims.get(q, j))
            .fold(f64::NEG_INFINITY, f64::max);
        worst_pos > best_neg
    })
}

fn hard_indicator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut batches = Vec::new();
    while batches.len() < 20 {
        let b = random_batch(&mut rng, 6, 3).map_err(|e| e.to_string())?;
        if min_gap(b.embeddings()) >= 0.05 {
            batches.push(b);
        }
    }
    let mut worst: f64 = 0.0;
    for b in &batches {
        for var in default_check_variants() {
            let spec = LossSpec::new(var, 1e-4).unwrap();
            let smooth = batch_loss(b, &spec).map_err(|e| e.to_string())?.loss;
            let hard = hard_batch_loss(b, var).map_err(|e| e.to_string())?;
            worst = worst.max((smooth - hard).abs());
            ensure((smooth - hard).abs() < 1e-3, || format!("{var}: smooth {smooth} vs hard {hard}"))?;
        }
    }

    // A perfectly ranked batch plus the random ones.
    let perfect = EmbeddingBatch::from_unnormalized(
        &Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.95, 0.3, 0.0],
            vec![0.9, -0.4, 0.1],
            vec![0.0, 0.0, 1.0],
            vec![0.1, 0.2, 0.95],
            vec![-0.1, 0.3, 0.9],
        ])
        .unwrap(),
        vec![0, 0, 0, 1, 1, 1],
    )
    .unwrap();
    batches.push(perfect);
    let mut zeros = 0;
    for b in &batches {
        let s = gram(b.embeddings());
        let aps: Vec<f64> = (0..b.len())
            .filter_map(|q| textbook_ap(s.row(q), b.labels(), q))
            .collect();
        let expected = aps.iter().map(|ap| 1.0 - ap).sum::<f64>() / aps.len() as f64;
        let got = hard_batch_loss(b, LossVariant::SmoothAp).map_err(|e| e.to_string())?;
        ensure((got - expected).abs() < 1e-10, || format!("AP loss {got} vs 1 - AP {expected}"))?;
        let perfect = perfectly_ranked(&s, b.labels());
        ensure((got == 0.0) == perfect, || format!("AP loss {got}, perfect ranking {perfect}"))?;
        zeros += usize::from(got == 0.0);
    }
    ensure(zeros >= 1, || "no zero-loss batch exercised".into())?;
    Ok(format!(
        "20 batches x 10 variants, worst |smooth - hard| {worst:.2e}; AP identity on 21 batches ({zeros} perfect)"
    ))
}

fn hand_fixtures() -> Outcome {
    // Query 0 with positives at similarity 0.8 and 0.4 and a negative at 0.6.
    let x = Matrix::from_rows(&[
        vec![1.0, 0.0, 0.0],
        vec![0.8, 0.6, 0.0],
        vec![0.4, 0.0, 0.84f64.sqrt()],
        vec![0.6, -0.8, 0.0],
    ])
    .unwrap();
    let batch = EmbeddingBatch::new(x, vec![0, 0, 0, 1]).map_err(|e| e.to_string())?;
    let ctx = QueryContext::from_similarities(&gram(batch.embeddings()), batch.labels(), 0);
    let mut parts = Vec::new();
    for (name, expected) in [("o", 0.5), ("ds", 0.3466), ("dq:2", 0.375), ("smoothap", 1.0 / 6.0)] {
        let got = hard_query_loss(&ctx, v(name)).ok_or("query has no positives")?;
        ensure((got - expected).abs() < 1e-3, || format!("{name}: {got} vs {expected}"))?;
        parts.push(format!("{name}={got:.4}"));
    }
    Ok(parts.join(" "))
}

fn toy_replication() -> Outcome {
    let start = Instant::now();
    let run = |name: &str| {
        let mut c = ExperimentConfig::default();
        c.set("variant", name).unwrap();
        train_toy(&c).map(|r| r.record).map_err(|e| e.to_string())
    };
    let ib = run("ib:4")?;
    let dq = run("dq:2")?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "test R@1 dq {:.4} vs ib {:.4}; intra {:.4} vs {:.4}; inter {:.4} vs {:.4}; {secs:.1}s",
        dq.test_r1(),
        ib.test_r1(),
        dq.test.dists_intra,
        ib.test.dists_intra,
        dq.test.dists_inter,
        ib.test.dists_inter
    );
    let ok = dq.test_r1() > ib.test_r1()
        && dq.test.dists_intra > ib.test.dists_intra
        && dq.test.dists_inter > ib.test.dists_inter
        && secs < 120.0;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn robustness_protocol() -> Outcome {
    let start = Instant::now();
    let base = ExperimentConfig {
        n_classes: 6,
        ..ExperimentConfig::default()
    };
    let report = robustness(&base, &robustness_variants()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let deg = |var: &str| {
        report
            .entries
            .iter()
            .find(|e| e.variant == v(var))
            .map(|e| e.r1_degradation)
            .unwrap()
    };
    ensure(report.merged_train_classes == 2, || {
        format!("{} merged classes", report.merged_train_classes)
    })?;
    let detail = format!(
        "R@1 degradation dq {:.4}, ib {:.4}, smoothap {:.4}; {secs:.1}s",
        deg("dq:2"),
        deg("ib:4"),
        deg("smoothap")
    );
    if deg("dq:2") < deg("ib:4") && secs < 300.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn crossover() -> Outcome {
    let dq = |r: f64| derivative_wrt_rank(v("dq:2"), r, 0.0).unwrap();
    let ap = |r: f64| derivative_wrt_rank(LossVariant::SmoothAp, r, 0.0).unwrap();
    ensure(dq(0.5) > ap(0.5), || format!("R=0.5: {} vs {}", dq(0.5), ap(0.5)))?;
    ensure(dq(1.0) == ap(1.0), || format!("R=1: {} vs {}", dq(1.0), ap(1.0)))?;
    ensure(dq(2.0) < ap(2.0), || format!("R=2: {} vs {}", dq(2.0), ap(2.0)))?;
    ensure(dq(0.5) == 2.0 / 1.5f64.powi(3) && ap(0.5) == 1.0 / 1.5f64.powi(2), || {
        "closed forms differ at R=0.5".into()
    })?;
    Ok(format!(
        "R=0.5: {:.4} > {:.4}; R=1: {} = {}; R=2: {:.4} < {:.4}",
        dq(0.5),
        ap(0.5),
        dq(1.0),
        ap(1.0),
        dq(2.0),
        ap(2.0)
    ))
}

fn metrics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ks = [1, 2, 5];
    let mut worst_dist: f64 = 0.0;
    for _ in 0..50 {
        let b = random_batch(&mut rng, 20, 4).map_err(|e| e.to_string())?;
        let (x, labels, n) = (b.embeddings(), b.labels(), b.len());
        let recall = recall_at_k(&b, &ks).map_err(|e| e.to_string())?;
        for k in ks {
            // Instance j is within the top k iff fewer than k others outrank it
            // (higher similarity, or equal similarity and lower index).
            let hits = (0..n)
                .filter(|&q| {
                    let s = |j: usize| cosine_sim(x.row(q), x.row(j)).unwrap();
                    (0..n).filter(|&j| j != q && labels[j] == labels[q]).any(|j| {
                        let ahead = (0..n)
                            .filter(|&m| m != q && m != j)
                            .filter(|&m| s(m) > s(j) || (s(m) == s(j) && m < j))
                            .count();
                        ahead < k
                    })
                })
                .count();
            let expected = hits as f64 / n as f64;
            ensure(recall[&k] == expected, || format!("R@{k}: {} vs {expected}", recall[&k]))?;
        }
        let (intra, inter) = dists(&b).map_err(|e| e.to_string())?;
        let (mut si, mut ni, mut se, mut ne) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if i != j {
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
        }
        worst_dist = worst_dist.max((intra - si / ni).abs()).max((inter - se / ne).abs());
    }
    ensure(worst_dist < 1e-12, || format!("dists differ by {worst_dist:.2e}"))?;
    let same = nmi(&[0, 0, 1, 1, 2, 2], &[0, 0, 1, 1, 2, 2]).map_err(|e| e.to_string())?;
    let indep = nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).map_err(|e| e.to_string())?;
    ensure(same == 1.0 && indep == 0.0, || format!("nmi fixtures {same}, {indep}"))?;
    Ok(format!("50 batches; dists max diff {worst_dist:.1e}; nmi fixtures exact"))
}

fn pnp(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_pnp"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("pnp {args:?} failed: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

/// File contents with wall-clock lines removed.
fn payload(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            let cleaned = if name.ends_with(".json") {
                String::from_utf8_lossy(&bytes)
                    .lines()
                    .filter(|l| !l.contains("\"wall_clock_secs\""))
                    .collect::<Vec<_>>()
                    .join("\n")
                    .into_bytes()
            } else {
                bytes
            };
            Ok((name, cleaned))
        })
        .collect()
}

fn determinism() -> Outcome {
    let tmp = std::env::temp_dir().join(format!("pnp-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&tmp);
    std::fs::create_dir_all(&tmp).map_err(|e| e.to_string())?;
    let out = tmp.join("out");
    let out_s = out.to_str().unwrap().to_owned();
    let fixture = tmp.join("fixture.csv");
    std::fs::write(
        &fixture,
        "label,x0,x1\n0,1,0\n0,0.9,0.2\n0,0.8,-0.1\n1,0,1\n1,0.2,0.9\n1,-0.3,0.8\n",
    )
    .map_err(|e| e.to_string())?;
    let fixture_s = fixture.to_str().unwrap().to_owned();
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("train-toy", vec!["train-toy", "--out", &out_s]),
        ("curves", vec!["curves", "--out", &out_s]),
        ("sweep", vec!["sweep", "--axis", "alpha", "--values", "1,2,4", "--out", &out_s]),
        ("robustness", vec!["robustness", "--steps", "500", "--out", &out_s]),
        ("grad-check", vec!["grad-check", "--trials", "2", "--out", &out_s]),
        ("eval", vec!["eval", "--embeddings", &fixture_s, "--ks", "1,2", "--out", &out_s]),
    ];
    let mut checked = Vec::new();
    for (name, args) in &commands {
        let mut runs = Vec::new();
        for _ in 0..2 {
            let _ = std::fs::remove_dir_all(&out);
            pnp(args)?;
            runs.push(payload(&out)?);
        }
        ensure(!runs[0].is_empty(), || format!("{name} wrote nothing"))?;
        ensure(runs[0] == runs[1], || format!("{name} payload differs between runs"))?;
        checked.push(format!("{name}({} files)", runs[0].len()));
    }
    let _ = std::fs::remove_dir_all(&tmp);
    Ok(checked.join(", "))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient_correctness),
        ("derivative-function identities", derivative_identities),
        ("hard-indicator oracle", hard_indicator_oracle),
        ("hand-computed fixtures", hand_fixtures),
        ("toy replication (D_q vs I_b)", toy_replication),
        ("robustness under class merging", robustness_protocol),
        ("D_q / AP derivative crossover", crossover),
        ("metrics oracles", metrics_oracles),
        ("CLI determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
