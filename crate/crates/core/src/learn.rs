//! Fully connected patch-to-microstructure regressor.
//!
//! Rectifier hidden layers, identity output, mean-squared-error loss and
//! mini-batch SGD with momentum. Training is single-threaded so that a fixed
//! seed reproduces the loss history bit for bit; prediction runs in parallel
//! over patches.
//!
//! Parameters live in one flat vector. Layer `i` (mapping `sizes[i]` to
//! `sizes[i+1]` units) stores its weights row-major (`out × in`) followed by
//! its biases.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVectorView};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::patches::{assemble, extract_inputs, PatchGeometry, PatchMode, PatchSample, SampleSet};
use crate::volume::{DwiVolume, ScalarVolume};

/// Multilayer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    seed: u64,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Invalid("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Invalid("batch size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Invalid(format!(
                "validation fraction {} must be in (0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Hidden-layer widths used when none are configured.
pub const DEFAULT_HIDDEN: [usize; 3] = [150, 150, 150];

fn layer_spans(sizes: &[usize]) -> Vec<(usize, usize, usize)> {
    // (weight offset, bias offset, end) per layer
    let mut spans = Vec::with_capacity(sizes.len() - 1);
    let mut at = 0;
    for w in sizes.windows(2) {
        let b = at + w[0] * w[1];
        let end = b + w[1];
        spans.push((at, b, end));
        at = end;
    }
    spans
}

impl MlpModel {
    /// He-normal weights (variance `2 / fan_in`), zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Invalid(format!(
                "a model needs at least an input and an output layer, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Invalid(format!("layer sizes {layer_sizes:?} must be positive")));
        }
        let spans = layer_spans(layer_sizes);
        let mut params = vec![0.0; spans.last().unwrap().2];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, &(w, b, _)) in spans.iter().enumerate() {
            let std = (2.0 / layer_sizes[i] as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[w..b] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(Self { layer_sizes: layer_sizes.to_vec(), params, seed })
    }

    /// Builds a model from explicit parameters in the flat layout.
    pub fn from_params(layer_sizes: &[usize], params: Vec<f64>, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Invalid(format!("invalid layer sizes {layer_sizes:?}")));
        }
        let expected = layer_spans(layer_sizes).last().unwrap().2;
        if params.len() != expected {
            return Err(Error::Dimension(format!(
                "{} parameters for layer sizes {layer_sizes:?} (expected {expected})",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite model parameters".into()));
        }
        Ok(Self { layer_sizes: layer_sizes.to_vec(), params, seed })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_len(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Weight `(out, in)` of layer `layer`.
    pub fn weight(&self, layer: usize, out: usize, input: usize) -> f64 {
        let (w, _, _) = layer_spans(&self.layer_sizes)[layer];
        self.params[w + out * self.layer_sizes[layer] + input]
    }

    pub fn bias(&self, layer: usize, out: usize) -> f64 {
        let (_, b, _) = layer_spans(&self.layer_sizes)[layer];
        self.params[b + out]
    }

    /// Activations of every layer for a batch stored one sample per column
    /// (input first).
    fn activations(&self, input: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let spans = layer_spans(&self.layer_sizes);
        let last = spans.len() - 1;
        let mut acts = Vec::with_capacity(spans.len() + 1);
        acts.push(input);
        for (i, &(w, b, _)) in spans.iter().enumerate() {
            let (n_in, n_out) = (self.layer_sizes[i], self.layer_sizes[i + 1]);
            // Row-major out×in weights are the column-major in×out transpose.
            let wt = DMatrixView::from_slice(&self.params[w..b], n_in, n_out);
            let mut z = wt.tr_mul(&acts[i]);
            let bias = DVectorView::from_slice(&self.params[b..b + n_out], n_out);
            for mut col in z.column_iter_mut() {
                col += &bias;
            }
            if i != last {
                z.apply(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Output of the network for one input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_len() {
            return Err(Error::Dimension(format!(
                "input has {} values, model expects {}",
                input.len(),
                self.input_len()
            )));
        }
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        Ok(self.activations(x).pop().unwrap().as_slice().to_vec())
    }

    /// Adds `scale · ∂(Σ‖ŷ − y‖²)/∂θ` over the batch into `grad` and returns
    /// the summed squared error.
    fn accumulate(&self, batch: &[&PatchSample], scale: f64, grad: &mut [f64]) -> f64 {
        let spans = layer_spans(&self.layer_sizes);
        let acts = self.activations(input_matrix(batch, self.input_len()));
        let mut delta = acts.last().unwrap() - target_matrix(batch, self.output_len());
        let sq = delta.norm_squared();
        delta *= scale;
        for i in (0..spans.len()).rev() {
            let (w, b, _) = spans[i];
            let (n_in, n_out) = (self.layer_sizes[i], self.layer_sizes[i + 1]);
            {
                let (gw, gb) = grad[w..b + n_out].split_at_mut(b - w);
                let mut gwt = DMatrixViewMut::from_slice(gw, n_in, n_out);
                gwt.gemm(2.0, &acts[i], &delta.transpose(), 1.0);
                for (g, s) in gb.iter_mut().zip(delta.column_sum().iter()) {
                    *g += 2.0 * s;
                }
            }
            if i > 0 {
                let wt = DMatrixView::from_slice(&self.params[w..b], n_in, n_out);
                let mut back = wt * &delta;
                // Rectifier derivative: pass where the unit was active.
                back.zip_apply(&acts[i], |d, a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        sq
    }

    fn check_sample(&self, s: &PatchSample) -> Result<()> {
        if s.input.len() != self.input_len() || s.target.len() != self.output_len() {
            return Err(Error::Dimension(format!(
                "sample lengths {}/{} do not match model {}/{}",
                s.input.len(),
                s.target.len(),
                self.input_len(),
                self.output_len()
            )));
        }
        Ok(())
    }
}

fn input_matrix(batch: &[&PatchSample], n: usize) -> DMatrix<f64> {
    DMatrix::from_iterator(n, batch.len(), batch.iter().flat_map(|s| s.input.iter().copied()))
}

fn target_matrix(batch: &[&PatchSample], n: usize) -> DMatrix<f64> {
    DMatrix::from_iterator(n, batch.len(), batch.iter().flat_map(|s| s.target.iter().copied()))
}

/// Mean squared error over the batch and output units, and its gradient with
/// respect to every parameter (flat layout).
pub fn loss_and_gradients(model: &MlpModel, batch: &[&PatchSample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    for s in batch {
        model.check_sample(s)?;
    }
    let denom = (batch.len() * model.output_len()) as f64;
    let mut grad = vec![0.0; model.params.len()];
    let sq = model.accumulate(batch, 1.0 / denom, &mut grad);
    Ok((sq / denom, grad))
}

/// Mean squared error without gradients.
pub fn mean_squared_error(model: &MlpModel, samples: &[&PatchSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples".into()));
    }
    let mut sq = 0.0;
    for chunk in samples.chunks(256) {
        for s in chunk {
            model.check_sample(s)?;
        }
        let acts = model.activations(input_matrix(chunk, model.input_len()));
        sq += (acts.last().unwrap() - target_matrix(chunk, model.output_len())).norm_squared();
    }
    Ok(sq / (samples.len() * model.output_len()) as f64)
}

/// Per-epoch losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch (0-based) whose parameters were returned.
    pub best_epoch: usize,
}

/// Trains with seeded shuffling and returns the parameters of the epoch with
/// the lowest validation loss.
pub fn train(model: &MlpModel, samples: &SampleSet, cfg: &TrainConfig) -> Result<(MlpModel, TrainHistory)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("cannot train on an empty sample set".into()));
    }
    if samples.geometry.input_len() != model.input_len() || samples.geometry.target_len() != model.output_len() {
        return Err(Error::Dimension(format!(
            "sample geometry {}/{} does not match model {}/{}",
            samples.geometry.input_len(),
            samples.geometry.target_len(),
            model.input_len(),
            model.output_len()
        )));
    }
    samples.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if samples.len() >= 2 {
        ((samples.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, samples.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<&PatchSample> = val_idx.iter().map(|&i| &samples.samples[i]).collect();
    let mut train_order: Vec<usize> = train_idx.to_vec();

    let mut current = model.clone();
    let mut velocity = vec![0.0; current.params.len()];
    let mut best = (f64::INFINITY, current.clone(), 0);
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        train_order.shuffle(&mut rng);
        for chunk in train_order.chunks(cfg.batch_size) {
            let batch: Vec<&PatchSample> = chunk.iter().map(|&i| &samples.samples[i]).collect();
            let (_, grad) = loss_and_gradients(&current, &batch)?;
            for ((p, v), g) in current.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *p += *v;
            }
        }
        if current.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical(format!("training diverged in epoch {epoch}")));
        }
        let train_set: Vec<&PatchSample> = train_order.iter().map(|&i| &samples.samples[i]).collect();
        let train_loss = mean_squared_error(&current, &train_set)?;
        let val_loss = if val.is_empty() { train_loss } else { mean_squared_error(&current, &val)? };
        log::debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}");
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, current.clone(), epoch);
        }
    }
    history.best_epoch = best.2;
    Ok((best.1, history))
}

/// Applies the model to every eligible patch of `dwi` and assembles the
/// predicted measure maps on the output grid of `geometry`.
pub fn predict_volume(
    model: &MlpModel,
    dwi: &DwiVolume,
    mask: &ScalarVolume,
    geometry: &PatchGeometry,
    stride: usize,
) -> Result<Vec<ScalarVolume>> {
    if geometry.input_len() != model.input_len() || geometry.target_len() != model.output_len() {
        return Err(Error::Dimension("patch geometry does not match the model".into()));
    }
    if dwi.n_gradients() != geometry.n_signals {
        return Err(Error::Dimension(format!(
            "data has {} gradients, the model was trained on {}",
            dwi.n_gradients(),
            geometry.n_signals
        )));
    }
    let inputs = extract_inputs(dwi, mask, geometry, stride)?;
    let preds: Vec<([usize; 3], Vec<f64>)> = inputs
        .into_par_iter()
        .map(|(c, x)| model.forward(&x).map(|y| (c, y)))
        .collect::<Result<_>>()?;
    let scale = match geometry.mode {
        PatchMode::QDl => 1.0,
        PatchMode::Sr => geometry.gamma as f64,
    };
    let voxel_size = dwi.header.voxel_size.map(|v| v / scale);
    assemble(&preds, geometry, geometry.output_dims(dwi.dims()), voxel_size)
}

/// A trained model with the configuration and sample geometry it was
/// trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub config: TrainConfig,
    pub geometry: PatchGeometry,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"QXMLPCK1";
const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    /// Little-endian layout: magic, version, layer count and sizes, training
    /// configuration, sample geometry, model seed, parameter count and `f64`
    /// parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let sizes = self.model.layer_sizes();
        out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        for &s in sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        let c = &self.config;
        out.extend_from_slice(&(c.epochs as u32).to_le_bytes());
        out.extend_from_slice(&(c.batch_size as u32).to_le_bytes());
        for v in [c.learning_rate, c.momentum, c.validation_fraction] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        let g = &self.geometry;
        out.push(match g.mode {
            PatchMode::QDl => 0,
            PatchMode::Sr => 1,
        });
        out.extend_from_slice(&[0; 3]);
        for v in [g.in_size, g.out_size, g.gamma, g.n_signals, g.n_measures] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.model.seed.to_le_bytes());
        out.extend_from_slice(&(self.model.params.len() as u64).to_le_bytes());
        for p in &self.model.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, at: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a model checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let n_layers = r.u32()? as usize;
        if n_layers > 64 {
            return Err(Error::Parse(format!("implausible layer count {n_layers}")));
        }
        let sizes = (0..n_layers).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let config = TrainConfig {
            epochs: r.u32()? as usize,
            batch_size: r.u32()? as usize,
            learning_rate: r.f64()?,
            momentum: r.f64()?,
            validation_fraction: r.f64()?,
            seed: r.u64()?,
        };
        let mode = match r.take(4)?[0] {
            0 => PatchMode::QDl,
            1 => PatchMode::Sr,
            m => return Err(Error::Parse(format!("unknown patch mode {m}"))),
        };
        let geometry = PatchGeometry {
            mode,
            in_size: r.u32()? as usize,
            out_size: r.u32()? as usize,
            gamma: r.u32()? as usize,
            n_signals: r.u32()? as usize,
            n_measures: r.u32()? as usize,
        };
        let seed = r.u64()?;
        let n = r.u64()? as usize;
        if n.checked_mul(8).map_or(true, |b| b != bytes.len() - r.at) {
            return Err(Error::Parse("checkpoint parameter block has the wrong length".into()));
        }
        let params = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let model = MlpModel::from_params(&sizes, params, seed)?;
        if geometry.input_len() != model.input_len() || geometry.target_len() != model.output_len() {
            return Err(Error::Parse("checkpoint geometry does not match its layer sizes".into()));
        }
        Ok(Self { model, config, geometry })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Parse("checkpoint is truncated".into()))?;
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
