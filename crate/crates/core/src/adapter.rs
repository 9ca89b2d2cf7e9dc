//! The trainable weight adapter and its contrastive training loop.
//!
//! The adapter is a two-layer residual MLP blended with its input:
//!
//! ```text
//! z = alpha * (W2 . relu(W1 . e + b1) + b2) + (1 - alpha) * e
//! ```
//!
//! It is trained with a supervised multi-positive InfoNCE objective over
//! cosine similarities. Gradients are derived by hand (see the book chapter
//! on the adapter) and checked against finite differences in the tests.

use crate::featio::{Embedding, Stage, TemplateBank};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AdapterError {
    #[error("embedding dim {got} does not match adapter dim {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("batch needs at least two embeddings, got {0}")]
    BatchTooSmall(usize),
    #[error("batch has no same-instance pair")]
    NoPositivePair,
    #[error("embedding {0} has zero norm")]
    ZeroNorm(usize),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("template bank has {0} instance(s), need at least 2")]
    BankTooSmall(usize),
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("could not draw a batch with a positive pair after {0} attempts")]
    Sampling(usize),
}

pub const DEFAULT_ALPHA: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// `hidden x dim`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `dim x hidden`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub alpha: f64,
}

impl AdapterParams {
    /// Identity-blend adapter: with `alpha = 0` it passes embeddings through.
    pub fn passthrough(dim: usize) -> Self {
        Self {
            w1: Array2::eye(dim),
            b1: Array1::zeros(dim),
            w2: Array2::eye(dim),
            b2: Array1::zeros(dim),
            alpha: 0.0,
        }
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation, square hidden layer.
    pub fn init(dim: usize, alpha: f64, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut u = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        Self {
            w1: Array2::from_shape_vec((dim, dim), u(dim * dim)).unwrap(),
            b1: Array1::from(u(dim)),
            w2: Array2::from_shape_vec((dim, dim), u(dim * dim)).unwrap(),
            b2: Array1::from(u(dim)),
            alpha,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite()
            && [&self.w1, &self.w2].iter().all(|m| m.iter().all(|v| v.is_finite()))
            && [&self.b1, &self.b2].iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Weights and biases flattened in the order `w1, b1, w2, b2`.
    pub fn flatten(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
            .collect()
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for v in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
        {
            *v = it.next().expect("flat parameter vector too short");
        }
    }

    fn check_dim(&self, got: usize) -> Result<(), AdapterError> {
        if got != self.dim() {
            return Err(AdapterError::DimMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }
}

/// Apply the adapter to a single raw embedding.
pub fn adapter_forward(params: &AdapterParams, e: &Embedding) -> Result<Embedding, AdapterError> {
    params.check_dim(e.dim())?;
    let x = Array2::from_shape_vec((1, e.dim()), e.values.clone()).unwrap();
    let z = forward_batch(params, x.view()).z;
    Ok(Embedding {
        values: z.row(0).to_vec(),
        stage: Stage::Adapted,
    })
}

struct Forward {
    h: Array2<f64>,
    a: Array2<f64>,
    o: Array2<f64>,
    z: Array2<f64>,
}

fn forward_batch(p: &AdapterParams, x: ArrayView2<f64>) -> Forward {
    let h = x.dot(&p.w1.t()) + &p.b1;
    let a = h.mapv(|v| v.max(0.0));
    let o = a.dot(&p.w2.t()) + &p.b2;
    let z = &o * p.alpha + &x * (1.0 - p.alpha);
    Forward { h, a, o, z }
}

/// Adapt a whole set of embeddings at once.
pub fn adapt_all(params: &AdapterParams, embeddings: &[&Embedding]) -> Result<Vec<Embedding>, AdapterError> {
    if embeddings.is_empty() {
        return Ok(Vec::new());
    }
    for e in embeddings {
        params.check_dim(e.dim())?;
    }
    let x = stack(embeddings.iter().map(|e| e.values.as_slice()), params.dim());
    let z = forward_batch(params, x.view()).z;
    Ok(z
        .rows()
        .into_iter()
        .map(|r| Embedding {
            values: r.to_vec(),
            stage: Stage::Adapted,
        })
        .collect())
}

fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    let n = flat.len() / dim.max(1);
    Array2::from_shape_vec((n, dim), flat).unwrap()
}

struct LossParts {
    loss: f64,
    /// dL/dZ
    grad: Array2<f64>,
}

/// Multi-positive InfoNCE over cosine similarity, with its gradient
/// with respect to the unnormalised rows of `z`.
fn infonce_with_grad(z: ArrayView2<f64>, labels: &[u32], temperature: f64) -> Result<LossParts, AdapterError> {
    let n = z.nrows();
    if !(temperature > 0.0) {
        return Err(AdapterError::Temperature(temperature));
    }
    if n < 2 {
        return Err(AdapterError::BatchTooSmall(n));
    }
    let norms: Vec<f64> = z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&v| !(v > 0.0)) {
        return Err(AdapterError::ZeroNorm(i));
    }
    let mut u = z.to_owned();
    for (mut row, &nm) in u.rows_mut().into_iter().zip(&norms) {
        row /= nm;
    }
    let sim = u.dot(&u.t()) / temperature;

    let positives: Vec<usize> = (0..n)
        .map(|a| (0..n).filter(|&k| k != a && labels[k] == labels[a]).count())
        .collect();
    let total: usize = positives.iter().sum();
    if total == 0 {
        return Err(AdapterError::NoPositivePair);
    }
    let total = total as f64;

    let mut loss = 0.0;
    let mut g_sim = Array2::<f64>::zeros((n, n));
    let mut shifted = vec![0.0; n];
    for a in 0..n {
        if positives[a] == 0 {
            continue;
        }
        let row = sim.row(a);
        let max = (0..n).filter(|&k| k != a).map(|k| row[k]).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for k in (0..n).filter(|&k| k != a) {
            shifted[k] = (row[k] - max).exp();
            denom += shifted[k];
        }
        let lse = max + denom.ln();
        let n_a = positives[a] as f64;
        for k in 0..n {
            if k == a {
                continue;
            }
            let q = shifted[k] / denom;
            let is_pos = labels[k] == labels[a];
            if is_pos {
                loss -= row[k] - lse;
            }
            g_sim[[a, k]] = (n_a * q - if is_pos { 1.0 } else { 0.0 }) / total;
        }
    }
    loss /= total;

    // S = U U^T / t  =>  dL/dU = (G + G^T) U / t
    let g_u = (&g_sim + &g_sim.t()).dot(&u) / temperature;
    // u = z / |z|  =>  dL/dz = (g_u - u (u . g_u)) / |z|
    let mut grad = g_u;
    for ((mut g, ur), &nm) in grad.rows_mut().into_iter().zip(u.rows()).zip(&norms) {
        let proj = g.dot(&ur);
        g.zip_mut_with(&ur, |gv, &uv| *gv = (*gv - uv * proj) / nm);
    }
    Ok(LossParts { loss, grad })
}

/// InfoNCE loss of a labelled batch of embeddings (used as given, no adapter).
pub fn infonce_loss(batch: &[(Embedding, u32)], temperature: f64) -> Result<f64, AdapterError> {
    let dim = batch.first().map_or(0, |(e, _)| e.dim());
    if let Some((e, _)) = batch.iter().find(|(e, _)| e.dim() != dim) {
        return Err(AdapterError::DimMismatch { expected: dim, got: e.dim() });
    }
    let z = stack(batch.iter().map(|(e, _)| e.values.as_slice()), dim);
    let labels: Vec<u32> = batch.iter().map(|(_, l)| *l).collect();
    Ok(infonce_with_grad(z.view(), &labels, temperature)?.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// Reported for completeness; the blend ratio is a fixed hyperparameter
    /// during training.
    pub alpha: f64,
}

impl AdapterGrads {
    pub fn flatten(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
            .collect()
    }
}

fn backward_raw(
    params: &AdapterParams,
    x: ArrayView2<f64>,
    labels: &[u32],
    temperature: f64,
) -> Result<(f64, AdapterGrads), AdapterError> {
    let fw = forward_batch(params, x);
    let LossParts { loss, grad: g_z } = infonce_with_grad(fw.z.view(), labels, temperature)?;
    let g_alpha = (&g_z * &(&fw.o - &x)).sum();
    let g_o = &g_z * params.alpha;
    let g_w2 = g_o.t().dot(&fw.a);
    let g_b2 = g_o.sum_axis(Axis(0));
    let mut g_h = g_o.dot(&params.w2);
    g_h.zip_mut_with(&fw.h, |g, &h| {
        if h <= 0.0 {
            *g = 0.0
        }
    });
    let g_w1 = g_h.t().dot(&x);
    let g_b1 = g_h.sum_axis(Axis(0));
    Ok((
        loss,
        AdapterGrads {
            w1: g_w1,
            b1: g_b1,
            w2: g_w2,
            b2: g_b2,
            alpha: g_alpha,
        },
    ))
}

/// Loss and analytic gradients of InfoNCE over adapter outputs for a batch
/// of raw embeddings.
pub fn infonce_backward(
    params: &AdapterParams,
    batch: &[(Embedding, u32)],
    temperature: f64,
) -> Result<(f64, AdapterGrads), AdapterError> {
    for (e, _) in batch {
        params.check_dim(e.dim())?;
    }
    let x = stack(batch.iter().map(|(e, _)| e.values.as_slice()), params.dim());
    let labels: Vec<u32> = batch.iter().map(|(_, l)| *l).collect();
    backward_raw(params, x.view(), &labels, temperature)
}

/// Adam with bias correction over the flattened weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One Adam update of the adapter weights (alpha is left untouched).
pub fn adam_step(state: &mut AdamState, params: &mut AdapterParams, grads: &AdapterGrads, lr: f64) {
    let mut flat = params.flatten();
    state.step(&mut flat, &grads.flatten(), lr);
    params.unflatten_into(&flat);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 640,
            lr: 1e-3,
            batch_size: 1024,
            temperature: 0.05,
            alpha: DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        let bad = |m: &str| Err(AdapterError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be > 0");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if self.batch_size < 2 {
            return bad("batch size must be >= 2");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: AdapterParams,
    /// Mean batch loss per epoch.
    pub loss_history: Vec<f64>,
}

const MAX_BATCH_DRAWS: usize = 1000;

/// Train the adapter on all template embeddings of the bank, labels being
/// instance ids. An epoch is `ceil(N*K / batch_size)` batches drawn
/// uniformly with replacement.
pub fn train_adapter(bank: &TemplateBank, cfg: &TrainConfig) -> Result<TrainOutcome, AdapterError> {
    cfg.validate()?;
    if bank.instance_count() < 2 {
        return Err(AdapterError::BankTooSmall(bank.instance_count()));
    }
    let dim = bank.dim();
    let (labels, rows): (Vec<u32>, Vec<&[f64]>) = bank.iter().map(|(id, _, e)| (id, e.values.as_slice())).unzip();
    let data = stack(rows.into_iter(), dim);
    let n = labels.len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = AdapterParams::init(dim, cfg.alpha, &mut rng);
    let mut adam = AdamState::new(params.flatten().len());
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch = Array2::<f64>::zeros((cfg.batch_size, dim));
    let mut batch_labels = vec![0u32; cfg.batch_size];

    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..steps_per_epoch {
            let mut draws = 0;
            loop {
                draws += 1;
                for slot in 0..cfg.batch_size {
                    let i = rng.random_range(0..n);
                    batch.slice_mut(s![slot, ..]).assign(&data.row(i));
                    batch_labels[slot] = labels[i];
                }
                if has_positive(&batch_labels) {
                    break;
                }
                if draws >= MAX_BATCH_DRAWS {
                    return Err(AdapterError::Sampling(draws));
                }
            }
            let (loss, grads) = backward_raw(&params, batch.view(), &batch_labels, cfg.temperature)?;
            if !loss.is_finite() {
                return Err(AdapterError::Diverged { epoch });
            }
            sum += loss;
            adam_step(&mut adam, &mut params, &grads, cfg.lr);
            if !params.is_finite() {
                return Err(AdapterError::Diverged { epoch });
            }
        }
        history.push(sum / steps_per_epoch as f64);
    }
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}

fn has_positive(labels: &[u32]) -> bool {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    sorted.windows(2).any(|w| w[0] == w[1])
}
