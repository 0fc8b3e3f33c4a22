//! Toy 2D datasets, class-balanced batch sampling, class merging and the
//! embedding CSV format.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Points with one integer label per row. Labels run `0..n_classes` and
/// every class has at least two members.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    points: Matrix,
    labels: Vec<usize>,
    split: Split,
}

impl LabeledDataset {
    pub fn new(points: Matrix, labels: Vec<usize>, split: Split) -> Result<Self> {
        if labels.len() != points.rows() {
            return Err(Error::DimensionMismatch {
                expected: points.rows(),
                actual: labels.len(),
            });
        }
        points.check_finite()?;
        let counts = class_counts(&labels);
        if let Some((&max, _)) = counts.iter().next_back() {
            if max + 1 != counts.len() {
                return Err(Error::InvalidBatch(format!(
                    "labels must be contiguous from 0, found {} distinct labels up to {max}",
                    counts.len()
                )));
            }
        }
        let singletons: Vec<usize> = counts
            .iter()
            .filter(|(_, &c)| c < 2)
            .map(|(&l, _)| l)
            .collect();
        if !singletons.is_empty() {
            return Err(Error::SingletonClasses(singletons));
        }
        Ok(Self {
            points,
            labels,
            split,
        })
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Row indices of each class, in row order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.class_indices().iter().map(Vec::len).collect()
    }

    /// Rows and labels at `indices`, e.g. a sampled batch.
    pub fn select(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.points.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.points.clone(), labels, self.split)
    }
}

fn class_counts(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    counts
}

/// Geometry of the ring-of-blobs toy data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Classes per split.
    pub n_classes: usize,
    pub n_per_class: usize,
    pub radius: f64,
    /// Blob standard deviation, as a fraction of the radius.
    pub sigma_ratio: f64,
    /// Angle between a test center and the preceding train center, as a
    /// fraction of the spacing between train centers.
    pub test_offset: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_per_class: 150,
            radius: 1.0,
            sigma_ratio: 0.1,
            test_offset: 0.5,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_per_class < 2 {
            return Err(Error::InvalidParameter(format!(
                "toy data needs at least 2 classes of 2 points, got {} x {}",
                self.n_classes, self.n_per_class
            )));
        }
        if !(self.radius > 0.0 && self.radius.is_finite())
            || !(self.sigma_ratio > 0.0 && self.sigma_ratio.is_finite())
        {
            return Err(Error::InvalidParameter(format!(
                "toy radius and sigma must be positive, got {} and {}",
                self.radius, self.sigma_ratio
            )));
        }
        if !(self.test_offset > 0.0 && self.test_offset < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "test offset must lie strictly between 0 and 1, got {}",
                self.test_offset
            )));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_ratio * self.radius
    }

    /// Class-center angles: train classes evenly spaced from 0, test classes
    /// shifted by `test_offset` of the spacing.
    pub fn center_angles(&self, split: Split) -> Vec<f64> {
        let step = TAU / self.n_classes as f64;
        let offset = match split {
            Split::Train => 0.0,
            Split::Test => step * self.test_offset,
        };
        (0..self.n_classes).map(|c| offset + c as f64 * step).collect()
    }

    pub fn centers(&self, split: Split) -> Vec<[f64; 2]> {
        self.center_angles(split)
            .into_iter()
            .map(|a| [self.radius * a.cos(), self.radius * a.sin()])
            .collect()
    }
}

/// Train and test splits of Gaussian blobs on a ring. The two splits share
/// no class: test centers sit between the train centers.
pub fn make_toy(config: &ToyConfig, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.sigma()).expect("sigma validated");
    let mut build = |split: Split| {
        let n = config.n_classes * config.n_per_class;
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for (c, [cx, cy]) in config.centers(split).into_iter().enumerate() {
            for _ in 0..config.n_per_class {
                data.push(cx + noise.sample(&mut rng));
                data.push(cy + noise.sample(&mut rng));
                labels.push(c);
            }
        }
        LabeledDataset::new(Matrix::from_vec(n, 2, data)?, labels, split)
    };
    let train = build(Split::Train)?;
    let test = build(Split::Test)?;
    Ok((train, test))
}

/// The four-class toy problem with `n_per_class` points per class.
pub fn make_toy_2d(n_per_class: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    make_toy(
        &ToyConfig {
            n_per_class,
            ..ToyConfig::default()
        },
        seed,
    )
}

/// Sample `k_classes` classes, then `per_class` instances of each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub k_classes: usize,
    pub per_class: usize,
    pub seed: u64,
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.k_classes * self.per_class
    }

    pub fn validate(&self, dataset: &LabeledDataset) -> Result<()> {
        if self.per_class < 2 || self.k_classes < 1 {
            return Err(Error::InvalidParameter(format!(
                "batch plan needs k >= 1 and per_class >= 2, got k={} per_class={}",
                self.k_classes, self.per_class
            )));
        }
        if self.k_classes > dataset.n_classes() {
            return Err(Error::InvalidParameter(format!(
                "batch plan asks for {} classes but the dataset has {}",
                self.k_classes,
                dataset.n_classes()
            )));
        }
        if self.batch_size() > dataset.len() {
            return Err(Error::InvalidParameter(format!(
                "batch of {} exceeds dataset size {}",
                self.batch_size(),
                dataset.len()
            )));
        }
        for (label, &available) in dataset.class_sizes().iter().enumerate() {
            if available < self.per_class {
                return Err(Error::ClassTooSmall {
                    label,
                    available,
                    required: self.per_class,
                });
            }
        }
        Ok(())
    }
}

/// Batch number `draw` of the stream defined by `plan.seed`. Classes and
/// instances are drawn uniformly without replacement; the result is grouped
/// by class in draw order.
pub fn sample_batch(dataset: &LabeledDataset, plan: &BatchPlan, draw: u64) -> Result<Vec<usize>> {
    plan.validate(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(draw);
    let by_class = dataset.class_indices();
    let classes = index::sample(&mut rng, by_class.len(), plan.k_classes);
    let mut out = Vec::with_capacity(plan.batch_size());
    for c in classes.iter() {
        let members = &by_class[c];
        out.extend(
            index::sample(&mut rng, members.len(), plan.per_class)
                .iter()
                .map(|i| members[i]),
        );
    }
    Ok(out)
}

/// Stateful wrapper over [`sample_batch`] that advances the draw counter.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    plan: BatchPlan,
    draws: u64,
}

impl BatchSampler {
    pub fn new(dataset: &LabeledDataset, plan: BatchPlan) -> Result<Self> {
        plan.validate(dataset)?;
        Ok(Self { plan, draws: 0 })
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_batch(&mut self, dataset: &LabeledDataset) -> Result<Vec<usize>> {
        let batch = sample_batch(dataset, &self.plan, self.draws)?;
        self.draws += 1;
        Ok(batch)
    }
}

/// Shuffle the classes and relabel consecutive groups of `group_size` as one
/// class. A final group smaller than `group_size` is kept as its own class.
pub fn merge_classes(dataset: &LabeledDataset, group_size: usize, seed: u64) -> Result<LabeledDataset> {
    let n_classes = dataset.n_classes();
    if group_size == 0 || n_classes < group_size {
        return Err(Error::InvalidParameter(format!(
            "cannot merge {n_classes} classes in groups of {group_size}"
        )));
    }
    let mapping = merge_mapping(n_classes, group_size, seed);
    let labels = dataset.labels().iter().map(|&l| mapping[l]).collect();
    dataset.with_labels(labels)
}

/// Merged label of each original class, as used by [`merge_classes`].
pub fn merge_mapping(n_classes: usize, group_size: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut mapping = vec![0; n_classes];
    for (pos, &class) in order.iter().enumerate() {
        mapping[class] = pos / group_size;
    }
    mapping
}

/// Writes `label,x0,...,x{d-1}` with a header row. Values use the shortest
/// representation that parses back to the same f64.
pub fn save_embeddings_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    std::fs::write(path, embeddings_csv_string(dataset.points(), dataset.labels()))?;
    Ok(())
}

pub fn embeddings_csv_string(points: &Matrix, labels: &[usize]) -> String {
    let mut out = String::from("label");
    for c in 0..points.cols() {
        out.push_str(&format!(",x{c}"));
    }
    out.push('\n');
    for (r, l) in labels.iter().enumerate() {
        out.push_str(&l.to_string());
        for v in points.row(r) {
            out.push(',');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    out
}

/// Reads the format written by [`save_embeddings_csv`]. Labels may be any
/// non-negative integers; they are renumbered `0..C` in increasing order.
pub fn load_embeddings_csv(path: &Path, split: Split) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_embeddings_csv(&text, path, split)
}

pub fn parse_embeddings_csv(text: &str, path: &Path, split: Split) -> Result<LabeledDataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();

    let header = match records.next() {
        None => return Err(parse_err(1, "missing header".into())),
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
    };
    let expected_header = header.len() >= 2
        && &header[0] == "label"
        && (1..header.len()).all(|c| header[c] == format!("x{}", c - 1));
    if !expected_header {
        return Err(parse_err(
            1,
            format!("missing header: expected label,x0,...; found {:?}", header.iter().collect::<Vec<_>>()),
        ));
    }
    let d = header.len() - 1;

    let mut raw_labels = Vec::new();
    let mut data = Vec::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != d + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", d + 1, record.len()),
            ));
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("invalid label {:?}", &record[0])))?;
        raw_labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric field {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value {field:?}")));
            }
            data.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let counts = class_counts(&raw_labels);
    let singletons: Vec<usize> = counts
        .iter()
        .filter(|(_, &c)| c < 2)
        .map(|(&l, _)| l)
        .collect();
    if !singletons.is_empty() {
        return Err(Error::SingletonClasses(singletons));
    }
    let dense: BTreeMap<usize, usize> = counts.keys().enumerate().map(|(i, &l)| (l, i)).collect();
    let labels = raw_labels.iter().map(|l| dense[l]).collect();
    let n = raw_labels.len();
    LabeledDataset::new(Matrix::from_vec(n, d, data)?, labels, split)
}
