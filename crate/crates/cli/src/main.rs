//! `pnp`: toy experiments, derivative curves, sweeps, the robustness
//! protocol, gradient checks and retrieval evaluation.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical failure
//! (including a failed gradient check).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pnp_core::data::{load_embeddings_csv, save_embeddings_csv, LabeledDataset, Split};
use pnp_core::experiment::{
    curves, curves_csv, default_check_variants, grad_check_all, rank_grid, robustness,
    robustness_variants, sweep, train_toy, ExperimentConfig, SweepAxis,
};
use pnp_core::gradcheck::{GradCheckConfig, Precision};
use pnp_core::metrics::{evaluate, RetrievalReport};
use pnp_core::{EmbeddingBatch, Error, LossVariant, Result};

#[derive(Parser)]
#[command(name = "pnp", version, about = "Ranking-loss experiments on a 2D toy problem")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy network with one loss and evaluate train/test retrieval.
    TrainToy(RunArgs),
    /// Tabulate loss and dL/dR of loss variants over a rank grid.
    Curves(CurvesArgs),
    /// One toy run per value of alpha, b or per_class.
    Sweep(SweepArgs),
    /// Train on merged classes, evaluate on the original test classes.
    Robustness(RunArgs),
    /// Compare analytic gradients against central differences.
    GradCheck(GradCheckArgs),
    /// Retrieval metrics of an embedding CSV.
    Eval(EvalArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// INI-style `key = value` file, or a JSON config / result file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    k_classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    /// Comma-separated variants, e.g. `o,iu,ib:4,ds,dq:2,smoothap`.
    #[arg(long, default_value = "o,iu,iu-prime,ib:4,ds,dq:2,smoothap")]
    variants: String,
    #[arg(long, default_value_t = 10.0)]
    r_max: f64,
    #[arg(long, default_value_t = 101)]
    points: usize,
    /// Positive ranks for the Smooth-AP curves.
    #[arg(long, default_value = "0,1,2,3")]
    r_pos: String,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// `alpha`, `b` or `per_class`.
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long)]
    values: String,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value = "o,iu,iu-prime,ib:1,ib:4,ds,dq:1,dq:2,dq:4,smoothap")]
    variants: String,
    #[arg(long, default_value = "0.05,0.01")]
    taus: String,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step; chosen from τ when omitted.
    #[arg(long)]
    step: Option<f64>,
    /// Arithmetic of the difference quotient: `extended` or `double`.
    #[arg(long, default_value = "extended")]
    precision: String,
    /// Corrupt the analytic gradient (self-test of the checker).
    #[arg(long, hide = true)]
    inject_fault: bool,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// CSV with header `label,x0,...`.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value = "1,2,4,8")]
    ks: String,
    /// Seed of the k-means clustering behind NMI.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Serialize)]
struct CurvesEcho<'a> {
    variants: Vec<String>,
    r_max: f64,
    points: usize,
    r_pos: &'a [f64],
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    embeddings: &'a Path,
    ks: &'a [usize],
    seed: u64,
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    config: EvalEcho<'a>,
    report: &'a RetrievalReport,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_list<T: std::str::FromStr>(what: &str, text: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|e| config_err(format!("{what}: cannot parse {s:?}: {e}")))
        })
        .collect()
}

fn parse_variants(text: &str) -> Result<Vec<LossVariant>> {
    let v: Vec<LossVariant> = parse_list("variants", text)?;
    if v.is_empty() {
        return Err(config_err("no variants given"));
    }
    Ok(v)
}

impl RunArgs {
    /// File (if any) over `base`, then `--set` pairs, then dedicated flags.
    fn resolve(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            if text.trim_start().starts_with('{') {
                cfg = ExperimentConfig::from_text(&text)?;
            } else {
                cfg.apply_ini(&text)?;
            }
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| config_err(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            cfg.set(k, v)?;
        }
        if let Some(v) = &self.variant {
            cfg.set("variant", v)?;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.k_classes {
            cfg.k_classes = v;
        }
        if let Some(v) = self.per_class {
            cfg.per_class = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

fn prepare(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn cmd_train_toy(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve(ExperimentConfig::default())?;
    prepare(&cfg.out)?;
    let run = train_toy(&cfg)?;
    let emb_train = LabeledDataset::new(
        run.train_embeddings.clone(),
        run.train.labels().to_vec(),
        Split::Train,
    )?;
    let emb_test =
        LabeledDataset::new(run.test_embeddings.clone(), run.test.labels().to_vec(), Split::Test)?;
    save_embeddings_csv(&emb_train, &cfg.out.join("train_embeddings.csv"))?;
    save_embeddings_csv(&emb_test, &cfg.out.join("test_embeddings.csv"))?;
    run.model.save(&cfg.out.join("model.bin"))?;
    let path = write_json(&cfg.out, "run.json", &run.record)?;
    println!(
        "{}: test R@1 {:.4}, dists intra {:.4} inter {:.4}, nmi {:.4} -> {}",
        cfg.variant,
        run.record.test_r1(),
        run.record.test.dists_intra,
        run.record.test.dists_inter,
        run.record.test.nmi,
        path.display()
    );
    Ok(())
}

fn cmd_curves(args: &CurvesArgs) -> Result<()> {
    let variants = parse_variants(&args.variants)?;
    let grid = rank_grid(args.r_max, args.points)?;
    let r_pos: Vec<f64> = parse_list("r-pos", &args.r_pos)?;
    let rows = curves(&variants, &grid, &r_pos)?;
    prepare(&args.out)?;
    write_text(&args.out, "curves.csv", &curves_csv(&rows))?;
    let echo = CurvesEcho {
        variants: variants.iter().map(ToString::to_string).collect(),
        r_max: args.r_max,
        points: args.points,
        r_pos: &r_pos,
    };
    write_json(&args.out, "curves_config.json", &echo)?;
    println!("{} rows -> {}", rows.len(), args.out.join("curves.csv").display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let axis: SweepAxis = args.axis.parse()?;
    let values: Vec<f64> = parse_list("values", &args.values)?;
    let base = args.run.resolve(ExperimentConfig::default())?;
    prepare(&base.out)?;
    let result = sweep(&base, axis, &values)?;
    write_text(&base.out, "sweep.csv", &result.csv())?;
    write_json(&base.out, "sweep.json", &result)?;
    print!("{}", result.csv());
    println!(
        "test R@1 non-decreasing along {axis}: {}",
        result.r1_non_decreasing()
    );
    Ok(())
}

fn cmd_robustness(args: &RunArgs) -> Result<()> {
    let base = ExperimentConfig {
        n_classes: 6,
        ..ExperimentConfig::default()
    };
    let cfg = args.resolve(base)?;
    prepare(&cfg.out)?;
    let report = robustness(&cfg, &robustness_variants())?;
    write_json(&cfg.out, "robustness.json", &report)?;
    println!("merged training classes: {}", report.merged_train_classes);
    for e in &report.entries {
        println!(
            "{}: test R@1 {:.4} -> {:.4} (degradation {:.4})",
            e.variant,
            e.unmerged.test_r1(),
            e.merged.test_r1(),
            e.r1_degradation
        );
    }
    Ok(())
}

/// Returns whether every check passed.
fn cmd_grad_check(args: &GradCheckArgs) -> Result<bool> {
    let variants = if args.variants.trim() == "default" {
        default_check_variants()
    } else {
        parse_variants(&args.variants)?
    };
    let taus: Vec<f64> = parse_list("taus", &args.taus)?;
    if taus.is_empty() {
        return Err(config_err("no temperatures given"));
    }
    let precision = match args.precision.as_str() {
        "extended" => Precision::Extended,
        "double" => Precision::Double,
        other => return Err(config_err(format!("unknown precision {other:?}"))),
    };
    let config = GradCheckConfig {
        step: args.step,
        precision,
        inject_fault: args.inject_fault,
        ..GradCheckConfig::new(args.n, args.d, args.trials, args.seed)
    };
    prepare(&args.out)?;
    let summary = grad_check_all(&variants, &taus, &config)?;
    write_json(&args.out, "grad_check.json", &summary)?;
    for e in &summary.entries {
        println!(
            "{} tau={} h={:e}: max rel err {:.3e} (tol {:e}) {}",
            e.variant,
            e.tau,
            e.step,
            e.report.max_rel_err,
            e.tolerance,
            if e.passed { "PASS" } else { "FAIL" }
        );
    }
    Ok(summary.all_passed)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ks: Vec<usize> = parse_list("ks", &args.ks)?;
    let ds = load_embeddings_csv(&args.embeddings, Split::Test)?;
    let batch = EmbeddingBatch::from_unnormalized(ds.points(), ds.labels().to_vec())?;
    let report = evaluate(&batch, &ks, args.seed)?;
    prepare(&args.out)?;
    let record = EvalRecord {
        config: EvalEcho {
            embeddings: &args.embeddings,
            ks: &ks,
            seed: args.seed,
        },
        report: &report,
    };
    write_json(&args.out, "eval.json", &record)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Curves(a) => cmd_curves(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Robustness(a) => cmd_robustness(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GradCheck(a) => match cmd_grad_check(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return ExitCode::from(3);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
