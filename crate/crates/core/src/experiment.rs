//! Experiment drivers behind the command-line tool: toy training, derivative
//! curves, sweeps, the class-merging robustness protocol and gradient checks.
//!
//! Every driver is a pure function of its [`ExperimentConfig`]; results embed
//! the config so a result file is enough to rerun the experiment.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    make_toy, merge_classes, merge_mapping, BatchPlan, BatchSampler, LabeledDataset, ToyConfig,
};
use crate::error::{Error, Result};
use crate::gradcheck::{check_loss_gradients, default_step, tolerance, GradCheckConfig, GradCheckReport};
use crate::losses::{batch_loss, LossSpec, LossVariant, DEFAULT_TAU};
use crate::metrics::{evaluate, RetrievalReport};
use crate::model::{adam_step, AdamConfig, AdamState, MlpModel, TOY_LAYERS};
use crate::numerics::{EmbeddingBatch, Matrix};

/// Everything that determines a toy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: LossVariant,
    pub tau: f64,
    pub k_classes: usize,
    pub per_class: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub seed: u64,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub radius: f64,
    pub sigma_ratio: f64,
    pub test_offset: f64,
    pub eval_ks: Vec<usize>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let toy = ToyConfig::default();
        Self {
            variant: LossVariant::DecreasingQuick { alpha: 2.0 },
            tau: DEFAULT_TAU,
            k_classes: 4,
            per_class: 4,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps_adam: adam.eps,
            weight_decay: adam.weight_decay,
            steps: 2000,
            seed: 0,
            n_classes: toy.n_classes,
            n_per_class: toy.n_per_class,
            radius: toy.radius,
            sigma_ratio: toy.sigma_ratio,
            test_offset: toy.test_offset,
            eval_ks: vec![1, 2, 4, 8],
            out: PathBuf::from("results"),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| config_err(format!("{key}: cannot parse {value:?}: {e}")))
}

impl ExperimentConfig {
    /// Sets one field from its textual form, as written in config files and
    /// on the command line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "variant" | "loss" => {
                self.variant = value
                    .parse()
                    .map_err(|e| config_err(format!("variant: {e}")))?
            }
            "tau" => self.tau = parse_value(key, value)?,
            "k_classes" | "k" => self.k_classes = parse_value(key, value)?,
            "per_class" => self.per_class = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "eps_adam" => self.eps_adam = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "n_classes" => self.n_classes = parse_value(key, value)?,
            "n_per_class" => self.n_per_class = parse_value(key, value)?,
            "radius" => self.radius = parse_value(key, value)?,
            "sigma_ratio" => self.sigma_ratio = parse_value(key, value)?,
            "test_offset" => self.test_offset = parse_value(key, value)?,
            "eval_ks" => {
                self.eval_ks = value
                    .split(',')
                    .map(|v| parse_value(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "out" => self.out = PathBuf::from(value),
            other => return Err(config_err(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines, `#`/`;`
    /// comments and `[section]` headers are ignored.
    pub fn apply_ini(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key = value", i + 1)))?;
            self.set(key, value)
                .map_err(|e| config_err(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Reads a config from either an INI file, a JSON config, or a JSON
    /// result file carrying a `config` echo.
    pub fn from_text(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            let value: serde_json::Value =
                serde_json::from_str(text).map_err(|e| config_err(format!("json: {e}")))?;
            let inner = value.get("config").cloned().unwrap_or(value);
            let config: Self =
                serde_json::from_value(inner).map_err(|e| config_err(format!("json: {e}")))?;
            config.validate()?;
            return Ok(config);
        }
        let mut config = Self::default();
        config.apply_ini(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn loss_spec(&self) -> Result<LossSpec> {
        LossSpec::new(self.variant, self.tau).map_err(|e| config_err(e.to_string()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_adam,
            weight_decay: self.weight_decay,
        }
    }

    pub fn toy(&self) -> ToyConfig {
        ToyConfig {
            n_classes: self.n_classes,
            n_per_class: self.n_per_class,
            radius: self.radius,
            sigma_ratio: self.sigma_ratio,
            test_offset: self.test_offset,
        }
    }

    pub fn plan(&self) -> BatchPlan {
        BatchPlan {
            k_classes: self.k_classes,
            per_class: self.per_class,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_spec()?;
        self.adam().validate().map_err(|e| config_err(e.to_string()))?;
        self.toy().validate().map_err(|e| config_err(e.to_string()))?;
        if self.per_class < 2 || self.k_classes < 1 {
            return Err(config_err(format!(
                "batch plan needs k_classes >= 1 and per_class >= 2, got {} and {}",
                self.k_classes, self.per_class
            )));
        }
        if self.k_classes > self.n_classes || self.per_class > self.n_per_class {
            return Err(config_err(format!(
                "batch plan {}x{} does not fit {} classes of {}",
                self.k_classes, self.per_class, self.n_classes, self.n_per_class
            )));
        }
        let n_eval = self.n_classes * self.n_per_class;
        if self.eval_ks.is_empty() || self.eval_ks.iter().any(|&k| k == 0 || k >= n_eval) {
            return Err(config_err(format!(
                "eval_ks must be non-empty values in 1..{n_eval}, got {:?}",
                self.eval_ks
            )));
        }
        Ok(())
    }
}

/// Result file of a toy training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    /// Batch loss at every optimization step.
    pub train_loss: Vec<f64>,
    pub train: RetrievalReport,
    pub test: RetrievalReport,
    /// Distinct training labels seen by the optimizer.
    pub train_classes: usize,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// The record with the wall-clock time zeroed, for comparing reruns.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn test_r1(&self) -> f64 {
        self.test.recall.get(&1).copied().unwrap_or(f64::NAN)
    }
}

/// Outputs of [`train_toy`] besides the record.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub record: RunRecord,
    pub model: MlpModel,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub train_embeddings: Matrix,
    pub test_embeddings: Matrix,
}

/// Trains the toy network on `train` (labels as given) and evaluates on
/// `train` and `test`.
pub fn train_on(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    eval_train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<ToyRun> {
    config.validate()?;
    let start = Instant::now();
    let spec = config.loss_spec()?;
    let mut model = MlpModel::init(&TOY_LAYERS, config.seed)?;
    let mut adam = AdamState::new(model.n_params(), config.adam());
    let mut sampler = BatchSampler::new(train, config.plan())?;
    let mut params = model.flat_params();
    let mut train_loss = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = sampler.next_batch(train)?;
        let (x, labels) = train.select(&idx);
        let (emb, cache) = model.forward(&x)?;
        let batch = EmbeddingBatch::new(emb, labels)?;
        let res = match batch_loss(&batch, &spec) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        let grads = model.backward(&cache, &res.grad)?.flat_params();
        if !res.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                loss: res.loss,
            });
        }
        adam_step(&mut params, &grads, &mut adam)?;
        model.set_flat_params(&params)?;
        if model.check_finite().is_err() {
            return Err(Error::Diverged {
                step,
                loss: res.loss,
            });
        }
        train_loss.push(res.loss);
    }
    let train_embeddings = model.embed(eval_train.points())?;
    let test_embeddings = model.embed(test.points())?;
    let report = |emb: &Matrix, ds: &LabeledDataset| {
        evaluate(
            &EmbeddingBatch::new(emb.clone(), ds.labels().to_vec())?,
            &config.eval_ks,
            config.seed,
        )
    };
    let record = RunRecord {
        config: config.clone(),
        train_loss,
        train: report(&train_embeddings, eval_train)?,
        test: report(&test_embeddings, test)?,
        train_classes: train.n_classes(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(ToyRun {
        record,
        model,
        train: eval_train.clone(),
        test: test.clone(),
        train_embeddings,
        test_embeddings,
    })
}

/// Builds the toy data from the config and trains on it.
pub fn train_toy(config: &ExperimentConfig) -> Result<ToyRun> {
    config.validate()?;
    let (train, test) = make_toy(&config.toy(), config.seed)?;
    train_on(config, &train, &train, &test)
}

/// One row of the derivative-curve table.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub variant: String,
    pub r: f64,
    pub loss: f64,
    pub dldr: f64,
}

/// `R = 0, step, 2·step, ..., r_max`.
pub fn rank_grid(r_max: f64, points: usize) -> Result<Vec<f64>> {
    if !(r_max > 0.0 && r_max.is_finite()) || points < 2 {
        return Err(config_err(format!(
            "grid needs r_max > 0 and at least 2 points, got {r_max} and {points}"
        )));
    }
    Ok((0..points)
        .map(|i| r_max * i as f64 / (points - 1) as f64)
        .collect())
}

/// Loss and derivative along `grid` for each variant. Smooth-AP gets one
/// curve per entry of `ap_r_pos`, labelled `smoothap@<R_pos>`.
pub fn curves(variants: &[LossVariant], grid: &[f64], ap_r_pos: &[f64]) -> Result<Vec<CurveRow>> {
    if let Some(r) = grid.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(config_err(format!("rank grid values must be >= 0, got {r}")));
    }
    let mut rows = Vec::new();
    for v in variants {
        v.validate().map_err(|e| config_err(e.to_string()))?;
        let positives: Vec<Option<f64>> = if v.uses_positive_rank() {
            ap_r_pos.iter().map(|&p| Some(p)).collect()
        } else {
            vec![None]
        };
        for rp in positives {
            let name = match rp {
                Some(p) => format!("{v}@{p}"),
                None => v.to_string(),
            };
            for &r in grid {
                let p = rp.unwrap_or(0.0);
                rows.push(CurveRow {
                    variant: name.clone(),
                    r,
                    loss: v.loss(r, p),
                    dldr: v.derivative(r, p),
                });
            }
        }
    }
    Ok(rows)
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("variant,R,loss,dLdR\n");
    for row in rows {
        let _ = writeln!(out, "{},{:?},{:?},{:?}", row.variant, row.r, row.loss, row.dldr);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    B,
    PerClass,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "alpha" => Ok(SweepAxis::Alpha),
            "b" => Ok(SweepAxis::B),
            "per_class" => Ok(SweepAxis::PerClass),
            other => Err(config_err(format!(
                "unknown sweep axis {other:?}; expected alpha, b or per_class"
            ))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::B => "b",
            SweepAxis::PerClass => "per_class",
        })
    }
}

/// The base config with one axis set to `value`.
pub fn sweep_config(base: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    match axis {
        SweepAxis::Alpha => c.variant = LossVariant::DecreasingQuick { alpha: value },
        SweepAxis::B => c.variant = LossVariant::IncreasingBounded { b: value },
        SweepAxis::PerClass => {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(config_err(format!("per_class must be an integer, got {value}")));
            }
            c.per_class = value as usize;
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub runs: Vec<RunRecord>,
}

/// One training run per value, results in value order. Configs are all
/// validated before any run starts.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(config_err("sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|&v| sweep_config(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let runs = configs
        .iter()
        .map(|c| Ok(train_toy(c)?.record))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        axis,
        values: values.to_vec(),
        runs,
    })
}

impl SweepResult {
    pub fn csv(&self) -> String {
        let mut out = format!("{},test_r1,dists_intra,dists_inter,nmi\n", self.axis);
        for (v, r) in self.values.iter().zip(&self.runs) {
            let _ = writeln!(
                out,
                "{v:?},{:?},{:?},{:?},{:?}",
                r.test_r1(),
                r.test.dists_intra,
                r.test.dists_inter,
                r.test.nmi
            );
        }
        out
    }

    /// Whether test R@1 never decreases along the sweep values.
    pub fn r1_non_decreasing(&self) -> bool {
        self.runs.windows(2).all(|w| w[1].test_r1() >= w[0].test_r1())
    }
}

/// Classes merged in groups of this size by the robustness protocol.
pub const MERGE_GROUP: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessEntry {
    pub variant: LossVariant,
    pub unmerged: RunRecord,
    pub merged: RunRecord,
    /// Unmerged test R@1 minus merged test R@1.
    pub r1_degradation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub config: ExperimentConfig,
    pub merged_train_classes: usize,
    /// Merged label of each original training class.
    pub merge_mapping: Vec<usize>,
    pub entries: Vec<RobustnessEntry>,
}

pub fn robustness_variants() -> Vec<LossVariant> {
    vec![
        LossVariant::IncreasingBounded { b: 4.0 },
        LossVariant::DecreasingQuick { alpha: 2.0 },
        LossVariant::SmoothAp,
    ]
}

/// Trains each variant on the original and on merged training labels and
/// evaluates both on the untouched test split. Batches of merged data draw
/// `min(k, merged classes)` classes with the per-class count scaled so the
/// batch size is unchanged.
pub fn robustness(base: &ExperimentConfig, variants: &[LossVariant]) -> Result<RobustnessReport> {
    base.validate()?;
    if base.n_classes < 2 * MERGE_GROUP {
        return Err(config_err(format!(
            "robustness needs at least {} classes, got {}",
            2 * MERGE_GROUP,
            base.n_classes
        )));
    }
    let (train, test) = make_toy(&base.toy(), base.seed)?;
    let merged = merge_classes(&train, MERGE_GROUP, base.seed)?;
    let merged_classes = merged.n_classes();
    let batch = base.k_classes * base.per_class;
    let merged_k = base.k_classes.min(merged_classes);
    let merged_per_class = batch / merged_k;

    let mut entries = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut cfg = base.clone();
        cfg.variant = variant;
        let unmerged = train_on(&cfg, &train, &train, &test)?.record;
        let mut mcfg = cfg.clone();
        mcfg.k_classes = merged_k;
        mcfg.per_class = merged_per_class;
        // Report train metrics against the labels the network was trained on.
        let merged_run = train_on(&mcfg, &merged, &merged, &test)?.record;
        entries.push(RobustnessEntry {
            variant,
            r1_degradation: unmerged.test_r1() - merged_run.test_r1(),
            unmerged,
            merged: merged_run,
        });
    }
    Ok(RobustnessReport {
        config: base.clone(),
        merged_train_classes: merged_classes,
        merge_mapping: merge_mapping(train.n_classes(), MERGE_GROUP, base.seed),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub variant: LossVariant,
    pub tau: f64,
    pub step: f64,
    pub tolerance: f64,
    pub report: GradCheckReport,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub config: GradCheckConfig,
    pub entries: Vec<GradCheckEntry>,
    pub all_passed: bool,
}

/// The variants exercised by default: every family member, the
/// parametrized ones at several settings.
pub fn default_check_variants() -> Vec<LossVariant> {
    vec![
        LossVariant::Original,
        LossVariant::IncreasingUnbounded,
        LossVariant::IncreasingUnboundedPrime,
        LossVariant::IncreasingBounded { b: 1.0 },
        LossVariant::IncreasingBounded { b: 4.0 },
        LossVariant::DecreasingSlow,
        LossVariant::DecreasingQuick { alpha: 1.0 },
        LossVariant::DecreasingQuick { alpha: 2.0 },
        LossVariant::DecreasingQuick { alpha: 4.0 },
        LossVariant::SmoothAp,
    ]
}

/// Gradient checks for every `(variant, τ)` pair. Numerical failures inside
/// a check propagate; exceeding the tolerance is reported as `passed: false`.
pub fn grad_check_all(
    variants: &[LossVariant],
    taus: &[f64],
    config: &GradCheckConfig,
) -> Result<GradCheckSummary> {
    let mut entries = Vec::new();
    for &variant in variants {
        for &tau in taus {
            let spec = LossSpec::new(variant, tau).map_err(|e| config_err(e.to_string()))?;
            let report = check_loss_gradients(&spec, config)?;
            let tol = tolerance(tau);
            entries.push(GradCheckEntry {
                variant,
                tau,
                step: config.step.unwrap_or_else(|| default_step(tau)),
                tolerance: tol,
                passed: report.max_rel_err < tol,
                report,
            });
        }
    }
    Ok(GradCheckSummary {
        config: config.clone(),
        all_passed: entries.iter().all(|e| e.passed),
        entries,
    })
}
