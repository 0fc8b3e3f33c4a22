//! A small fully-connected embedding network with hand-written backprop,
//! plus Adam with decoupled weight decay.
//!
//! The toy network is 2 → 30 → 30 → 2 with rectifier hidden units and a
//! linear head whose output is projected onto the unit circle.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{normalize_rows, normalize_rows_backward, Matrix};

const CHECKPOINT_MAGIC: &[u8; 8] = b"PNPMLP01";

/// Layer widths of the toy network, input first.
pub const TOY_LAYERS: [usize; 4] = [2, 30, 30, 2];

/// One affine map `y = W x + b`, `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `X Wᵀ + 1 bᵀ` for a batch `X` of row vectors.
    fn apply(&self, x: &Matrix) -> Matrix {
        let (n, _) = x.shape();
        let mut out = Matrix::zeros(n, self.output_dim());
        for r in 0..n {
            let xr = x.row(r);
            for (o, dst) in out.row_mut(r).iter_mut().enumerate() {
                let w = self.weight.row(o);
                *dst = self.bias[o] + w.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }
}

/// Multi-layer perceptron; every layer but the last is followed by a
/// rectifier, and the final output rows are unit-normalized.
///
/// Gradients returned by [`MlpModel::backward`] use the same type, one
/// entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Dense>,
}

/// Intermediate values kept by [`MlpModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (the batch itself, then post-rectifier activations).
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer; the last one is the raw embedding.
    pre: Vec<Matrix>,
}

impl ForwardCache {
    /// Pre-activations of every layer, last one being the unnormalized output.
    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }
}

fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for v in out.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

impl MlpModel {
    /// All-zero parameters with the given layer widths.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "layer widths must be at least two positive sizes, got {widths:?}"
            )));
        }
        let layers = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self { layers })
    }

    /// Weights and biases drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let bound = 1.0 / (layer.input_dim() as f64).sqrt();
            for w in layer.weight.as_mut_slice() {
                *w = rng.random_range(-bound..bound);
            }
            for b in &mut layer.bias {
                *b = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn toy(seed: u64) -> Self {
        Self::init(&TOY_LAYERS, seed).expect("toy widths are valid")
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Dense::output_dim));
        w
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameters in layer order, each layer's weights (row-major) then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                actual: params.len(),
            });
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weight.as_slice().len());
            l.weight.as_mut_slice().copy_from_slice(w);
            let (b, tail) = tail.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for l in &self.layers {
            l.weight.check_finite()?;
            if let Some(c) = l.bias.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: 0, col: c });
            }
        }
        Ok(())
    }

    /// Unit-norm embeddings for each input row.
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: inputs.cols(),
            });
        }
        inputs.check_finite()?;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut x = inputs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.apply(&x);
            let next = if i + 1 < self.layers.len() {
                relu(&pre)
            } else {
                normalize_rows(&pre)?
            };
            cache.inputs.push(x);
            cache.pre.push(pre);
            x = next;
        }
        Ok((x, cache))
    }

    /// Embeddings only.
    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward(inputs)?.0)
    }

    /// Parameter gradients given the gradient with respect to the
    /// normalized outputs.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<MlpModel> {
        let last = self.layers.len() - 1;
        let raw = &cache.pre[last];
        if cache.pre.len() != self.layers.len() || grad_out.shape() != raw.shape() {
            return Err(Error::DimensionMismatch {
                expected: raw.rows() * raw.cols(),
                actual: grad_out.rows() * grad_out.cols(),
            });
        }
        let mut grads = Self::zeros(&self.widths())?;
        let mut delta = normalize_rows_backward(raw, grad_out)?;
        for i in (0..=last).rev() {
            let x = &cache.inputs[i];
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            let (n, input) = x.shape();
            for r in 0..n {
                let dr = delta.row(r);
                let xr = x.row(r);
                for (o, &d) in dr.iter().enumerate() {
                    g.bias[o] += d;
                    if d != 0.0 {
                        for (w, &xv) in g.weight.row_mut(o).iter_mut().zip(xr) {
                            *w += d * xv;
                        }
                    }
                }
            }
            if i == 0 {
                break;
            }
            let prev_pre = &cache.pre[i - 1];
            let mut next = Matrix::zeros(n, input);
            for r in 0..n {
                let dr = delta.row(r);
                for (c, dst) in next.row_mut(r).iter_mut().enumerate() {
                    if prev_pre.get(r, c) > 0.0 {
                        *dst = dr
                            .iter()
                            .enumerate()
                            .map(|(o, &d)| d * layer.weight.get(o, c))
                            .sum();
                    }
                }
            }
            delta = next;
        }
        Ok(grads)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.n_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.output_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.input_dim() as u32).to_le_bytes());
        }
        for v in self.flat_params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut magic = [0u8; 8];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut read_u32 = |what: &str| -> Result<usize> {
            let mut b = [0u8; 4];
            cursor
                .read_exact(&mut b)
                .map_err(|_| Error::Checkpoint(format!("truncated {what}")))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let n_layers = read_u32("layer count")?;
        if n_layers == 0 || n_layers > 1024 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let mut widths = Vec::with_capacity(n_layers + 1);
        for i in 0..n_layers {
            let out = read_u32("layer shape")?;
            let input = read_u32("layer shape")?;
            if i == 0 {
                widths.push(input);
            } else if widths[i] != input {
                return Err(Error::Checkpoint(format!(
                    "layer {i} expects {input} inputs but previous layer has {}",
                    widths[i]
                )));
            }
            widths.push(out);
        }
        let mut model = Self::zeros(&widths).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let payload = &bytes[bytes.len() - cursor.len()..];
        if payload.len() != 8 * model.n_params() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                8 * model.n_params(),
                payload.len()
            )));
        }
        let params: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        model.set_flat_params(&params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update; weight decay is applied to the
/// parameters directly (`p -= lr·wd·p`), not folded into the gradient.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: state.m.len(),
            actual: grads.len().max(params.len()),
        });
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * weight_decay * *p;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
