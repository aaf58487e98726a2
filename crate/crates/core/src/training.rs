//! Loss, gradients, and the optimization loop.
//!
//! The loss is the Gaussian negative log-likelihood of the head mean under
//! the head variance, so gradients reach every head through both the mean
//! and the spread.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::digest::Digest;
use crate::geometry::{self, NeighborList, Structure};
use crate::model::{self, freeze_mask, FreezeMask, ModelError, ModelParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("structure {0} has no reference energy")]
    MissingLabel(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<geometry::GeometryError> for TrainError {
    fn from(e: geometry::GeometryError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Nll,
    Mse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Nll => "nll",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nll" => Ok(LossKind::Nll),
            "mse" => Ok(LossKind::Mse),
            other => Err(format!("unknown loss kind '{other}' (expected nll or mse)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Share of the dataset used for training; the rest is validation.
    pub split_fraction: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub freeze_trunk: bool,
    /// Lower bound on the variance entering the NLL, eV².
    pub variance_floor: f64,
    pub adam: AdamConfig,
    /// Divide Δy and σ by the atom count before the loss.
    pub normalize_per_atom: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 20,
            epochs: 200,
            split_fraction: 0.8,
            seed: 0,
            loss: LossKind::Nll,
            freeze_trunk: false,
            variance_floor: 1e-8,
            adam: AdamConfig::default(),
            normalize_per_atom: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction must lie in (0, 1), got {}", self.split_fraction));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return bad(format!("variance_floor must be positive, got {}", self.variance_floor));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }

    /// Flat `key=value` view, in a fixed order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("split_fraction", self.split_fraction.to_string()),
            ("seed", self.seed.to_string()),
            ("loss", self.loss.to_string()),
            ("freeze_trunk", self.freeze_trunk.to_string()),
            ("variance_floor", self.variance_floor.to_string()),
            ("adam_beta1", self.adam.beta1.to_string()),
            ("adam_beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("normalize_per_atom", self.normalize_per_atom.to_string()),
        ]
    }

    /// Sets one field from its `key=value` form. Returns `Ok(false)` when the
    /// key is not a training key.
    pub fn set_kv(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value.trim().parse().map_err(|_| format!("bad value '{value}' for {key}"))
        }
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "split_fraction" => self.split_fraction = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "loss" => self.loss = value.trim().parse()?,
            "freeze_trunk" => self.freeze_trunk = parse(key, value)?,
            "variance_floor" => self.variance_floor = parse(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "normalize_per_atom" => self.normalize_per_atom = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// `½ [Δy²/σ² + ln(2πσ²)]` with `σ² = max(variance, floor)`.
pub fn nll_loss(delta_y: f64, variance: f64, floor: f64) -> f64 {
    let var = variance.max(floor);
    0.5 * (delta_y * delta_y / var + (2.0 * std::f64::consts::PI * var).ln())
}

/// Loss of one prediction against its label, and `∂loss/∂y_m` per head.
pub fn structure_loss(pred: &model::EnsemblePrediction, ref_energy: f64, unbiased: bool, config: &TrainConfig) -> (f64, Vec<f64>) {
    let m = pred.head_energies.len();
    let n = if config.normalize_per_atom { pred.n_atoms as f64 } else { 1.0 };
    let delta = (pred.mean - ref_energy) / n;
    // ∂Δy/∂y_m = 1/(nM)
    let d_delta = 1.0 / (n * m as f64);
    match config.loss {
        LossKind::Mse => {
            let g = 2.0 * delta * d_delta;
            (delta * delta, vec![g; m])
        }
        LossKind::Nll => {
            let var_n = pred.variance / (n * n);
            let floored = var_n <= config.variance_floor;
            let var = var_n.max(config.variance_floor);
            let loss = nll_loss(delta, var, config.variance_floor);
            let dl_ddelta = delta / var;
            let dl_dvar = if floored { 0.0 } else { 0.5 * (1.0 / var - delta * delta / (var * var)) };
            let denom = if unbiased { (m - 1) as f64 } else { m as f64 };
            let grads = pred
                .head_energies
                .iter()
                .map(|&y| dl_ddelta * d_delta + dl_dvar * 2.0 * (y - pred.mean) / (denom * n * n))
                .collect();
            (loss, grads)
        }
    }
}

/// A labeled structure with its neighbor list.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub structure: &'a Structure,
    pub nbrs: NeighborList,
    pub energy: f64,
}

/// Builds neighbor lists with the model cutoff and checks labels.
pub fn prepare<'a>(params: &ModelParams, structures: &'a [Structure]) -> Result<Vec<Sample<'a>>> {
    structures
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let energy = s.ref_energy.ok_or(TrainError::MissingLabel(k))?;
            let nbrs = geometry::build_neighbor_list(s, params.hyper.cutoff)?;
            Ok(Sample { structure: s, nbrs, energy })
        })
        .collect()
}

fn sample_loss(params: &ModelParams, sample: &Sample<'_>, config: &TrainConfig) -> Result<f64> {
    let pred = model::forward(params, sample.structure, &sample.nbrs)?;
    Ok(structure_loss(&pred, sample.energy, params.hyper.unbiased_variance, config).0)
}

/// Mean loss over prepared samples, reduced in index order.
pub fn mean_loss(params: &ModelParams, samples: &[Sample<'_>], config: &TrainConfig) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| sample_loss(params, s, config))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Mean per-structure loss over `batch`.
pub fn batch_loss(params: &ModelParams, batch: &[Structure], config: &TrainConfig) -> Result<f64> {
    let samples = prepare(params, batch)?;
    mean_loss(params, &samples, config)
}

fn sample_gradient(params: &ModelParams, sample: &Sample<'_>, config: &TrainConfig) -> Result<(f64, ModelParams)> {
    let (pred, cache) = model::forward_cached(params, sample.structure, &sample.nbrs)?;
    let (loss, head_grads) = structure_loss(&pred, sample.energy, params.hyper.unbiased_variance, config);
    let mut grads = params.zeros_like();
    model::backward(params, sample.structure, &cache, &head_grads, &mut grads);
    Ok((loss, grads))
}

/// Mean loss and its gradient over prepared samples. Per-sample gradients may
/// be computed in parallel; they are summed in index order. Frozen tensors
/// get exactly zero gradient.
pub fn gradient_prepared(
    params: &ModelParams,
    samples: &[Sample<'_>],
    config: &TrainConfig,
    mask: &FreezeMask,
) -> Result<(f64, ModelParams)> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let parts: Vec<(f64, ModelParams)> = samples
        .par_iter()
        .map(|s| sample_gradient(params, s, config))
        .collect::<Result<_>>()?;
    let scale = 1.0 / samples.len() as f64;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        for (dst, src) in total.tensors_mut().into_iter().zip(g.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(&src.tensor.data) {
                *d += s;
            }
        }
    }
    for (k, t) in total.tensors_mut().into_iter().enumerate() {
        if mask.is_trainable(k) {
            t.data.iter_mut().for_each(|v| *v *= scale);
        } else {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok((loss * scale, total))
}

/// Loss and exact gradient of [`batch_loss`] with respect to every tensor.
pub fn gradient(params: &ModelParams, batch: &[Structure], config: &TrainConfig) -> Result<(f64, ModelParams)> {
    let samples = prepare(params, batch)?;
    let mask = freeze_mask(params, config.freeze_trunk);
    gradient_prepared(params, &samples, config, &mask)
}

/// Adam with bias correction. Frozen tensors are never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        Adam { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, mask: &FreezeMask, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for (k, ((p, g), (m, v))) in tensors.zip(moments).enumerate() {
            if !mask.is_trainable(k) {
                continue;
            }
            for (((pi, gi), mi), vi) in p.data.iter_mut().zip(&g.tensor.data).zip(&mut m.data).zip(&mut v.data) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Sample-weighted mean of the batch losses seen during each epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss after each epoch (NaN with an empty validation set).
    pub val_loss: Vec<f64>,
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub final_digest: Digest,
    pub wall_seconds: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub normalize_per_atom: bool,
    pub freeze_summary: String,
    pub n_train: usize,
    pub n_val: usize,
    /// Epoch (0-based) with the lowest validation loss.
    pub best_epoch: Option<usize>,
}

/// Seeded split into `(train, validation)` index sets.
pub fn split_indices(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut n_train = (fraction * n as f64).round() as usize;
    n_train = n_train.clamp(1, n);
    if n >= 2 && n_train == n {
        n_train = n - 1;
    }
    let val = idx.split_off(n_train);
    (idx, val)
}

/// Mini-batch Adam training. Deterministic for a given seed.
pub fn train(params: &ModelParams, dataset: &[Structure], config: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let started = Instant::now();
    let samples = prepare(params, dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut train_idx, val_idx) = split_indices(samples.len(), config.split_fraction, &mut rng);
    let val: Vec<Sample<'_>> = val_idx.iter().map(|&k| samples[k].clone()).collect();

    let mut params = params.clone();
    let mask = freeze_mask(&params, config.freeze_trunk);
    let mut adam = Adam::new(&params, config.adam);

    let train_set: Vec<Sample<'_>> = train_idx.iter().map(|&k| samples[k].clone()).collect();
    let initial_train_loss = mean_loss(&params, &train_set, config)?;
    let initial_val_loss = mean_loss(&params, &val, config)?;

    let mut train_loss = Vec::with_capacity(config.epochs);
    let mut val_loss = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in train_idx.chunks(config.batch_size) {
            let batch: Vec<Sample<'_>> = chunk.iter().map(|&k| samples[k].clone()).collect();
            let (loss, grads) = gradient_prepared(&params, &batch, config, &mask)?;
            adam.step(&mut params, &grads, &mask, config.learning_rate);
            epoch_sum += loss * batch.len() as f64;
        }
        train_loss.push(epoch_sum / train_idx.len() as f64);
        val_loss.push(mean_loss(&params, &val, config)?);
    }

    let best_epoch = val_loss
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k);
    let report = TrainReport {
        train_loss,
        val_loss,
        initial_train_loss,
        initial_val_loss,
        final_digest: params.digest(),
        wall_seconds: started.elapsed().as_secs_f64(),
        seed: config.seed,
        loss: config.loss,
        normalize_per_atom: config.normalize_per_atom,
        freeze_summary: mask.summary(&params),
        n_train: train_idx.len(),
        n_val: val.len(),
        best_epoch,
    };
    Ok((params, report))
}

/// Mean reference energy per atom over `dataset`, eV/atom.
pub fn mean_energy_per_atom(dataset: &[Structure]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut sum = 0.0;
    for (k, s) in dataset.iter().enumerate() {
        sum += s.ref_energy.ok_or(TrainError::MissingLabel(k))? / s.n_atoms() as f64;
    }
    Ok(sum / dataset.len() as f64)
}

/// Sets every head bias to `offset` (eV/atom) so that a fresh model starts
/// at the right energy scale. Head weights are untouched.
pub fn set_energy_offset(params: &mut ModelParams, offset: f64) {
    params.head_b.data.iter_mut().for_each(|b| *b = offset);
}

/// [`train`] with the trunk frozen: only the head weights and biases move.
pub fn finetune(pretrained: &ModelParams, dataset: &[Structure], config: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    let config = TrainConfig { freeze_trunk: true, ..config.clone() };
    train(pretrained, dataset, &config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Hyper};

    fn tiny() -> Hyper {
        Hyper { z_max: 4, embed_dim: 4, readout_dim: 4, n_interactions: 1, n_heads: 3, n_rbf: 8, ..Hyper::default() }
    }

    fn dimer(r: f64, e: f64) -> Structure {
        Structure::molecule(vec![1, 1], vec![[0.0; 3], [r, 0.0, 0.0]]).unwrap().with_energy(e)
    }

    #[test]
    fn nll_values() {
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((nll_loss(0.0, 1.0, 1e-8) - half_ln_2pi).abs() < 1e-12);
        assert!((nll_loss(1.0, 1.0, 1e-8) - (0.5 + half_ln_2pi)).abs() < 1e-12);
        let floored = nll_loss(0.0, 0.0, 1e-8);
        assert!(floored.is_finite());
        assert!((floored - 0.5 * (2.0 * std::f64::consts::PI * 1e-8).ln()).abs() < 1e-12);
    }

    #[test]
    fn structure_loss_exact_model() {
        let pred = model::EnsemblePrediction::from_heads(vec![-1.0, 1.0, 0.0], 2, true).unwrap();
        assert_eq!(pred.variance, 1.0);
        let (loss, _) = structure_loss(&pred, 0.0, true, &TrainConfig::default());
        assert!((loss - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let mse = TrainConfig { loss: LossKind::Mse, ..TrainConfig::default() };
        let (l1, _) = structure_loss(&pred, 1.0, true, &mse);
        let (l2, _) = structure_loss(&pred, -1.0, true, &mse);
        assert_eq!((l1 + l2) / 2.0, 1.0);
    }

    #[test]
    fn missing_label() {
        let p = init_params(&tiny(), 0).unwrap();
        let unlabeled = Structure::molecule(vec![1], vec![[0.0; 3]]).unwrap();
        let batch = vec![dimer(1.0, 0.0), unlabeled];
        assert_eq!(batch_loss(&p, &batch, &TrainConfig::default()).unwrap_err(), TrainError::MissingLabel(1));
    }

    #[test]
    fn frozen_trunk_has_zero_gradient() {
        let p = init_params(&tiny(), 0).unwrap();
        let cfg = TrainConfig { freeze_trunk: true, ..TrainConfig::default() };
        let (_, g) = gradient(&p, &[dimer(1.1, -0.5), dimer(1.4, -0.2)], &cfg).unwrap();
        for t in g.tensors() {
            let zero = t.tensor.data.iter().all(|v| *v == 0.0);
            assert_eq!(zero, t.role == model::TensorRole::Trunk, "{}", t.full_name());
        }
    }

    #[test]
    fn identical_heads_get_identical_gradients() {
        let mut p = init_params(&tiny(), 0).unwrap();
        let h = p.hyper.readout_dim;
        let first: Vec<f64> = p.head_w.data[..h].to_vec();
        for row in p.head_w.data.chunks_exact_mut(h) {
            row.copy_from_slice(&first);
        }
        let (_, g) = gradient(&p, &[dimer(1.1, -0.5)], &TrainConfig::default()).unwrap();
        let rows: Vec<&[f64]> = g.head_w.data.chunks_exact(h).collect();
        assert!(rows.iter().all(|r| *r == rows[0]));
    }

    #[test]
    fn epochs_zero_is_identity() {
        let p = init_params(&tiny(), 0).unwrap();
        let data: Vec<Structure> = (0..6).map(|k| dimer(1.0 + 0.1 * k as f64, -0.3)).collect();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (q, report) = train(&p, &data, &cfg).unwrap();
        assert_eq!(p, q);
        assert!(report.train_loss.is_empty() && report.val_loss.is_empty());
    }

    #[test]
    fn empty_dataset() {
        let p = init_params(&tiny(), 0).unwrap();
        assert_eq!(train(&p, &[], &TrainConfig::default()).unwrap_err(), TrainError::EmptyDataset);
    }

    #[test]
    fn split_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (tr, va) = split_indices(10, 0.8, &mut rng);
        assert_eq!((tr.len(), va.len()), (8, 2));
        let (tr, va) = split_indices(2, 0.99, &mut rng);
        assert_eq!((tr.len(), va.len()), (1, 1));
        let (tr, va) = split_indices(1, 0.5, &mut rng);
        assert_eq!((tr.len(), va.len()), (1, 0));
    }

    #[test]
    fn config_kv_roundtrip() {
        let cfg = TrainConfig { learning_rate: 5e-5, loss: LossKind::Mse, seed: 42, ..TrainConfig::default() };
        let mut back = TrainConfig::default();
        for (k, v) in cfg.to_kv() {
            assert!(back.set_kv(k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set_kv("nonsense", "1").unwrap());
        assert!(back.set_kv("epochs", "x").is_err());
    }

    #[test]
    fn invalid_configs() {
        let zero_floor = TrainConfig { variance_floor: 0.0, ..TrainConfig::default() };
        assert!(zero_floor.validate().is_err());
        let split = TrainConfig { split_fraction: 1.0, ..TrainConfig::default() };
        assert!(split.validate().is_err());
    }
}
