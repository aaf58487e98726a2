//! SchNet-style trunk with a shallow-ensemble last layer.
//!
//! Per atom `a` with species `Z_a`:
//!
//! ```text
//! x_a      = embedding[Z_a]
//! repeat K times:
//!   f_ab   = W2 · ssp(W1 · rbf(d_ab) + b1) + b2            (filter)
//!   m_a    = Σ_b (W_pre · x_b) ⊙ f_ab
//!   x_a   += W_post · ssp(m_a) + b_post
//! r_a      = ssp(W_r · x_a + b_r)
//! y_m      = Σ_a (w_m · r_a + b_m)                        (head m)
//! ```
//!
//! All weights up to `r_a` are shared; only `(w_m, b_m)` differ between
//! heads. The prediction is the head mean and its uncertainty the head
//! variance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::digest::Digest;
use crate::geometry::{self, GeometryError, NeighborList, Structure};
use crate::linalg::{self, ssp, ssp_grad};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("species {z} outside embedding table (z_max = {z_max})")]
    UnknownSpecies { z: u32, z_max: usize },
    #[error("ensemble needs at least 2 heads, got {0}")]
    TooFewHeads(usize),
    #[error("neighbor list cutoff {got} does not match model cutoff {expected}")]
    CutoffMismatch { expected: f64, got: f64 },
    #[error("non-finite head energy")]
    NonFinite,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    /// Embedding table rows; species must be `< z_max`.
    pub z_max: usize,
    pub embed_dim: usize,
    pub readout_dim: usize,
    pub n_interactions: usize,
    pub n_heads: usize,
    pub n_rbf: usize,
    /// Å
    pub cutoff: f64,
    /// Å⁻²
    pub rbf_gamma: f64,
    /// Bessel-corrected head variance (`1/(M-1)`); `1/M` otherwise.
    pub unbiased_variance: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            z_max: 100,
            embed_dim: 64,
            readout_dim: 32,
            n_interactions: 3,
            n_heads: 64,
            n_rbf: 50,
            cutoff: 5.0,
            rbf_gamma: 10.0,
            unbiased_variance: true,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads < 2 {
            return Err(ModelError::InvalidHyper(format!("n_heads must be >= 2, got {}", self.n_heads)));
        }
        let dims = [
            ("z_max", self.z_max),
            ("embed_dim", self.embed_dim),
            ("readout_dim", self.readout_dim),
            ("n_interactions", self.n_interactions),
            ("n_rbf", self.n_rbf),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::InvalidHyper(format!("{name} must be >= 1")));
            }
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(ModelError::InvalidHyper(format!("cutoff must be positive, got {}", self.cutoff)));
        }
        if !(self.rbf_gamma > 0.0 && self.rbf_gamma.is_finite()) {
            return Err(ModelError::InvalidHyper(format!("rbf_gamma must be positive, got {}", self.rbf_gamma)));
        }
        Ok(())
    }

    pub fn rbf_centers(&self) -> Vec<f64> {
        geometry::uniform_centers(self.cutoff, self.n_rbf)
    }

    /// Flat `key=value` view, in a fixed order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("z_max", self.z_max.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("readout_dim", self.readout_dim.to_string()),
            ("n_interactions", self.n_interactions.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_rbf", self.n_rbf.to_string()),
            ("cutoff", self.cutoff.to_string()),
            ("rbf_gamma", self.rbf_gamma.to_string()),
            ("unbiased_variance", self.unbiased_variance.to_string()),
        ]
    }

    /// Sets one field; `Ok(false)` when `key` is not a model key.
    pub fn set_kv(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value.trim().parse().map_err(|_| format!("bad value '{value}' for {key}"))
        }
        match key {
            "z_max" => self.z_max = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "readout_dim" => self.readout_dim = parse(key, value)?,
            "n_interactions" => self.n_interactions = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "n_rbf" => self.n_rbf = parse(key, value)?,
            "cutoff" => self.cutoff = parse(key, value)?,
            "rbf_gamma" => self.rbf_gamma = parse(key, value)?,
            "unbiased_variance" => self.unbiased_variance = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn digest(&self) -> Digest {
        Digest::of_f64s(&self.data)
    }

    fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor { shape: shape.to_vec(), data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Trunk,
    Head,
}

/// Weights of one interaction block.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    /// `d × n_rbf`
    pub filter_w1: Tensor,
    pub filter_b1: Tensor,
    /// `d × d`
    pub filter_w2: Tensor,
    pub filter_b2: Tensor,
    /// `d × d`, applied to neighbor features before the filter product
    pub pre_w: Tensor,
    /// `d × d`, applied to the activated aggregated message
    pub post_w: Tensor,
    pub post_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    /// `z_max × d`
    pub embedding: Tensor,
    pub interactions: Vec<Interaction>,
    /// `h × d`
    pub readout_w: Tensor,
    pub readout_b: Tensor,
    /// `M × h`, row `m` is head `m`
    pub head_w: Tensor,
    /// `M`
    pub head_b: Tensor,
}

/// One named tensor, as listed by [`ModelParams::tensors`].
#[derive(Debug, Clone, Copy)]
pub struct TensorRef<'a> {
    pub name: &'static str,
    pub block: Option<usize>,
    pub role: TensorRole,
    pub tensor: &'a Tensor,
}

impl TensorRef<'_> {
    pub fn full_name(&self) -> String {
        match self.block {
            Some(k) => format!("interaction.{k}.{}", self.name),
            None => self.name.to_string(),
        }
    }
}

const BLOCK_TENSORS: [&str; 7] =
    ["filter_w1", "filter_b1", "filter_w2", "filter_b2", "pre_w", "post_w", "post_b"];

impl Interaction {
    fn fields(&self) -> [&Tensor; 7] {
        [
            &self.filter_w1,
            &self.filter_b1,
            &self.filter_w2,
            &self.filter_b2,
            &self.pre_w,
            &self.post_w,
            &self.post_b,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.filter_w1,
            &mut self.filter_b1,
            &mut self.filter_w2,
            &mut self.filter_b2,
            &mut self.pre_w,
            &mut self.post_w,
            &mut self.post_b,
        ]
    }
}

impl ModelParams {
    /// Zero-valued parameters with the shapes implied by `hyper`.
    pub fn zeros(hyper: &Hyper) -> Self {
        let (d, h, m) = (hyper.embed_dim, hyper.readout_dim, hyper.n_heads);
        ModelParams {
            hyper: hyper.clone(),
            embedding: Tensor::zeros(&[hyper.z_max, d]),
            interactions: (0..hyper.n_interactions)
                .map(|_| Interaction {
                    filter_w1: Tensor::zeros(&[d, hyper.n_rbf]),
                    filter_b1: Tensor::zeros(&[d]),
                    filter_w2: Tensor::zeros(&[d, d]),
                    filter_b2: Tensor::zeros(&[d]),
                    pre_w: Tensor::zeros(&[d, d]),
                    post_w: Tensor::zeros(&[d, d]),
                    post_b: Tensor::zeros(&[d]),
                })
                .collect(),
            readout_w: Tensor::zeros(&[h, d]),
            readout_b: Tensor::zeros(&[h]),
            head_w: Tensor::zeros(&[m, h]),
            head_b: Tensor::zeros(&[m]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.hyper)
    }

    /// Every tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![TensorRef { name: "embedding", block: None, role: TensorRole::Trunk, tensor: &self.embedding }];
        for (k, blk) in self.interactions.iter().enumerate() {
            for (name, tensor) in BLOCK_TENSORS.iter().zip(blk.fields()) {
                out.push(TensorRef { name, block: Some(k), role: TensorRole::Trunk, tensor });
            }
        }
        out.push(TensorRef { name: "readout_w", block: None, role: TensorRole::Trunk, tensor: &self.readout_w });
        out.push(TensorRef { name: "readout_b", block: None, role: TensorRole::Trunk, tensor: &self.readout_b });
        out.push(TensorRef { name: "head_w", block: None, role: TensorRole::Head, tensor: &self.head_w });
        out.push(TensorRef { name: "head_b", block: None, role: TensorRole::Head, tensor: &self.head_b });
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for blk in &mut self.interactions {
            out.extend(blk.fields_mut());
        }
        out.extend([&mut self.readout_w, &mut self.readout_b, &mut self.head_w, &mut self.head_b]);
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.tensor.len()).sum()
    }

    /// Digest over every tensor in canonical order.
    pub fn digest(&self) -> Digest {
        Digest::of_f64s(self.tensors().iter().flat_map(|t| t.tensor.data.iter()))
    }

    pub fn role_digest(&self, role: TensorRole) -> Digest {
        Digest::of_f64s(
            self.tensors()
                .iter()
                .filter(|t| t.role == role)
                .flat_map(|t| t.tensor.data.iter()),
        )
    }

    pub fn trunk_digest(&self) -> Digest {
        self.role_digest(TensorRole::Trunk)
    }

    pub fn head_digest(&self) -> Digest {
        self.role_digest(TensorRole::Head)
    }

    /// Per-tensor digests, keyed by full tensor name.
    pub fn tensor_digests(&self) -> Vec<(String, Digest)> {
        self.tensors().iter().map(|t| (t.full_name(), t.tensor.digest())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.tensor.data.iter().all(|v| v.is_finite()))
    }
}

/// Deterministic initialization from `seed`.
///
/// Weight matrices draw from `U(-1/√fan_in, 1/√fan_in)`, embeddings from
/// `U(-1, 1)`, trunk biases start at zero. Each head row is drawn from its
/// own stream so that heads start distinct.
pub fn init_params(hyper: &Hyper, seed: u64) -> Result<ModelParams> {
    hyper.validate()?;
    let (d, h) = (hyper.embed_dim, hyper.readout_dim);
    let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::zeros(hyper);
    p.embedding = Tensor::uniform(&[hyper.z_max, d], 1.0, &mut rng);
    for blk in &mut p.interactions {
        blk.filter_w1 = Tensor::uniform(&[d, hyper.n_rbf], bound(hyper.n_rbf), &mut rng);
        blk.filter_w2 = Tensor::uniform(&[d, d], bound(d), &mut rng);
        blk.pre_w = Tensor::uniform(&[d, d], bound(d), &mut rng);
        blk.post_w = Tensor::uniform(&[d, d], bound(d), &mut rng);
    }
    p.readout_w = Tensor::uniform(&[h, d], bound(d), &mut rng);

    for (m, row) in p.head_w.data.chunks_exact_mut(h).enumerate() {
        let mut head_rng = ChaCha8Rng::seed_from_u64(seed);
        head_rng.set_stream(1 + m as u64);
        for w in row {
            *w = head_rng.random_range(-bound(h)..bound(h));
        }
    }
    Ok(p)
}

/// Per-head energies with their mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    /// eV
    pub head_energies: Vec<f64>,
    /// eV
    pub mean: f64,
    /// eV²
    pub variance: f64,
    /// `√variance / n_atoms`, eV/atom
    pub sigma_per_atom: f64,
    pub n_atoms: usize,
}

impl EnsemblePrediction {
    pub fn from_heads(head_energies: Vec<f64>, n_atoms: usize, unbiased: bool) -> Result<Self> {
        let (mean, variance) = ensemble_stats_with(&head_energies, unbiased)?;
        Ok(EnsemblePrediction {
            sigma_per_atom: variance.sqrt() / n_atoms as f64,
            head_energies,
            mean,
            variance,
            n_atoms,
        })
    }

    /// eV
    pub fn sigma(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Head mean and Bessel-corrected variance.
pub fn ensemble_stats(head_energies: &[f64]) -> Result<(f64, f64)> {
    ensemble_stats_with(head_energies, true)
}

/// Welford accumulation of mean and variance; `unbiased` selects `1/(M-1)`.
pub fn ensemble_stats_with(head_energies: &[f64], unbiased: bool) -> Result<(f64, f64)> {
    let m = head_energies.len();
    if m < 2 {
        return Err(ModelError::TooFewHeads(m));
    }
    if head_energies.iter().any(|y| !y.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &y) in head_energies.iter().enumerate() {
        let delta = y - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (y - mean);
    }
    let denom = if unbiased { (m - 1) as f64 } else { m as f64 };
    Ok((mean, (m2 / denom).max(0.0)))
}

/// Per-tensor trainability. Entries follow [`ModelParams::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeMask {
    pub trainable: Vec<(String, bool)>,
}

impl FreezeMask {
    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index].1
    }

    pub fn trainable_count(&self, params: &ModelParams) -> usize {
        params
            .tensors()
            .iter()
            .zip(&self.trainable)
            .filter(|(_, (_, t))| *t)
            .map(|(t, _)| t.tensor.len())
            .sum()
    }

    /// One-line summary, e.g. `trainable 2 of 26 tensors (2112 of 52960 parameters)`.
    pub fn summary(&self, params: &ModelParams) -> String {
        let n_train = self.trainable.iter().filter(|(_, t)| *t).count();
        format!(
            "trainable {n_train} of {} tensors ({} of {} parameters)",
            self.trainable.len(),
            self.trainable_count(params),
            params.n_parameters()
        )
    }
}

/// With `freeze_trunk` only the head weights and biases stay trainable.
pub fn freeze_mask(params: &ModelParams, freeze_trunk: bool) -> FreezeMask {
    FreezeMask {
        trainable: params
            .tensors()
            .iter()
            .map(|t| (t.full_name(), !freeze_trunk || t.role == TensorRole::Head))
            .collect(),
    }
}

/// Intermediate activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    n_atoms: usize,
    /// `(i, j)` per neighbor pair
    pairs: Vec<(usize, usize)>,
    /// `P × n_rbf`
    rbf: Vec<f64>,
    blocks: Vec<BlockCache>,
    /// `N × d`, final atom features
    x_final: Vec<f64>,
    /// `N × h`, pre-activation readout
    z_read: Vec<f64>,
    /// `h`, Σ_a r_a
    r_sum: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    /// `N × d`, block input features
    x_in: Vec<f64>,
    /// `N × d`
    q: Vec<f64>,
    /// `P × d`
    z1: Vec<f64>,
    /// `P × d`
    u: Vec<f64>,
    /// `P × d`
    f: Vec<f64>,
    /// `N × d`
    m: Vec<f64>,
    /// `N × d`
    s: Vec<f64>,
}

fn check_inputs(params: &ModelParams, structure: &Structure, nbrs: &NeighborList) -> Result<()> {
    if nbrs.cutoff != params.hyper.cutoff {
        return Err(ModelError::CutoffMismatch { expected: params.hyper.cutoff, got: nbrs.cutoff });
    }
    for &z in &structure.species {
        if z as usize >= params.hyper.z_max {
            return Err(ModelError::UnknownSpecies { z, z_max: params.hyper.z_max });
        }
    }
    let n = structure.n_atoms();
    if nbrs.pairs.iter().any(|p| p.i >= n || p.j >= n) {
        return Err(GeometryError::IndexOutOfRange { index: n, n_atoms: n }.into());
    }
    Ok(())
}

/// Ensemble prediction for one structure.
pub fn forward(params: &ModelParams, structure: &Structure, nbrs: &NeighborList) -> Result<EnsemblePrediction> {
    forward_cached(params, structure, nbrs).map(|(pred, _)| pred)
}

/// Builds the neighbor list with the model cutoff, then runs [`forward`].
pub fn predict(params: &ModelParams, structure: &Structure) -> Result<EnsemblePrediction> {
    let nbrs = geometry::build_neighbor_list(structure, params.hyper.cutoff)?;
    forward(params, structure, &nbrs)
}

pub(crate) fn forward_cached(
    params: &ModelParams,
    structure: &Structure,
    nbrs: &NeighborList,
) -> Result<(EnsemblePrediction, ForwardCache)> {
    check_inputs(params, structure, nbrs)?;
    let hp = &params.hyper;
    let (d, h, n_rbf) = (hp.embed_dim, hp.readout_dim, hp.n_rbf);
    let n = structure.n_atoms();
    let n_pairs = nbrs.len();

    let centers = hp.rbf_centers();
    let mut rbf = vec![0.0; n_pairs * n_rbf];
    for (pair, out) in nbrs.pairs.iter().zip(rbf.chunks_exact_mut(n_rbf)) {
        geometry::rbf_expand_into(pair.distance, &centers, hp.rbf_gamma, out);
    }

    let mut x = vec![0.0; n * d];
    for (a, &z) in structure.species.iter().enumerate() {
        let z = z as usize;
        x[a * d..(a + 1) * d].copy_from_slice(&params.embedding.data[z * d..(z + 1) * d]);
    }

    let mut blocks = Vec::with_capacity(params.interactions.len());
    for blk in &params.interactions {
        let mut q = vec![0.0; n * d];
        for (xa, qa) in x.chunks_exact(d).zip(q.chunks_exact_mut(d)) {
            linalg::affine(&blk.pre_w.data, None, xa, qa);
        }
        let mut z1 = vec![0.0; n_pairs * d];
        let mut u = vec![0.0; n_pairs * d];
        let mut f = vec![0.0; n_pairs * d];
        let mut m = vec![0.0; n * d];
        for (p, pair) in nbrs.pairs.iter().enumerate() {
            let span = p * d..(p + 1) * d;
            linalg::affine(&blk.filter_w1.data, Some(&blk.filter_b1.data), &rbf[p * n_rbf..(p + 1) * n_rbf], &mut z1[span.clone()]);
            for (uk, zk) in u[span.clone()].iter_mut().zip(&z1[span.clone()]) {
                *uk = ssp(*zk);
            }
            linalg::affine(&blk.filter_w2.data, Some(&blk.filter_b2.data), &u[span.clone()], &mut f[span.clone()]);
            let (qb, fp) = (&q[pair.j * d..(pair.j + 1) * d], &f[span]);
            for ((mk, qk), fk) in m[pair.i * d..(pair.i + 1) * d].iter_mut().zip(qb).zip(fp) {
                *mk += qk * fk;
            }
        }
        let s: Vec<f64> = m.iter().map(|&v| ssp(v)).collect();
        let x_in = x.clone();
        let mut v = vec![0.0; d];
        for (sa, xa) in s.chunks_exact(d).zip(x.chunks_exact_mut(d)) {
            linalg::affine(&blk.post_w.data, Some(&blk.post_b.data), sa, &mut v);
            linalg::acc(xa, &v);
        }
        blocks.push(BlockCache { x_in, q, z1, u, f, m, s });
    }

    let mut z_read = vec![0.0; n * h];
    let mut r_sum = vec![0.0; h];
    for (xa, za) in x.chunks_exact(d).zip(z_read.chunks_exact_mut(h)) {
        linalg::affine(&params.readout_w.data, Some(&params.readout_b.data), xa, za);
        for (rs, zk) in r_sum.iter_mut().zip(za.iter()) {
            *rs += ssp(*zk);
        }
    }

    let mut heads = vec![0.0; hp.n_heads];
    linalg::affine(&params.head_w.data, None, &r_sum, &mut heads);
    for (y, b) in heads.iter_mut().zip(&params.head_b.data) {
        *y += n as f64 * b;
    }
    if heads.iter().any(|y| !y.is_finite()) {
        return Err(ModelError::NonFinite);
    }

    let pred = EnsemblePrediction::from_heads(heads, n, hp.unbiased_variance)?;
    let cache = ForwardCache {
        n_atoms: n,
        pairs: nbrs.pairs.iter().map(|p| (p.i, p.j)).collect(),
        rbf,
        blocks,
        x_final: x,
        z_read,
        r_sum,
    };
    Ok((pred, cache))
}

/// Accumulates `∂L/∂θ` into `grads` given `head_grads[m] = ∂L/∂y_m`.
pub(crate) fn backward(
    params: &ModelParams,
    structure: &Structure,
    cache: &ForwardCache,
    head_grads: &[f64],
    grads: &mut ModelParams,
) {
    let hp = &params.hyper;
    let (d, h, n_rbf) = (hp.embed_dim, hp.readout_dim, hp.n_rbf);
    let n = cache.n_atoms;

    // Heads: y_m = w_m · R + n b_m
    linalg::outer_acc(&mut grads.head_w.data, head_grads, &cache.r_sum);
    for (gb, g) in grads.head_b.data.iter_mut().zip(head_grads) {
        *gb += g * n as f64;
    }
    let mut d_r = vec![0.0; h];
    linalg::affine_transpose_acc(&params.head_w.data, head_grads, &mut d_r);

    // Readout
    let mut dx = vec![0.0; n * d];
    let mut dz = vec![0.0; h];
    for a in 0..n {
        let za = &cache.z_read[a * h..(a + 1) * h];
        for k in 0..h {
            dz[k] = d_r[k] * ssp_grad(za[k]);
        }
        linalg::outer_acc(&mut grads.readout_w.data, &dz, &cache.x_final[a * d..(a + 1) * d]);
        linalg::acc(&mut grads.readout_b.data, &dz);
        linalg::affine_transpose_acc(&params.readout_w.data, &dz, &mut dx[a * d..(a + 1) * d]);
    }

    // Interaction blocks, last to first. Residual: dx passes through unchanged.
    let mut ds = vec![0.0; d];
    let mut df = vec![0.0; d];
    let mut du = vec![0.0; d];
    for (k, blk) in params.interactions.iter().enumerate().rev() {
        let c = &cache.blocks[k];
        let g = &mut grads.interactions[k];
        let mut dm = vec![0.0; n * d];
        for a in 0..n {
            let dxa = &dx[a * d..(a + 1) * d];
            linalg::acc(&mut g.post_b.data, dxa);
            linalg::outer_acc(&mut g.post_w.data, dxa, &c.s[a * d..(a + 1) * d]);
            ds.iter_mut().for_each(|v| *v = 0.0);
            linalg::affine_transpose_acc(&blk.post_w.data, dxa, &mut ds);
            for t in 0..d {
                dm[a * d + t] = ds[t] * ssp_grad(c.m[a * d + t]);
            }
        }

        let mut dq = vec![0.0; n * d];
        for (p, &(i, j)) in cache.pairs.iter().enumerate() {
            let dma = &dm[i * d..(i + 1) * d];
            let fp = &c.f[p * d..(p + 1) * d];
            let qb = &c.q[j * d..(j + 1) * d];
            for t in 0..d {
                dq[j * d + t] += dma[t] * fp[t];
                df[t] = dma[t] * qb[t];
            }
            linalg::acc(&mut g.filter_b2.data, &df);
            linalg::outer_acc(&mut g.filter_w2.data, &df, &c.u[p * d..(p + 1) * d]);
            du.iter_mut().for_each(|v| *v = 0.0);
            linalg::affine_transpose_acc(&blk.filter_w2.data, &df, &mut du);
            for t in 0..d {
                du[t] *= ssp_grad(c.z1[p * d + t]);
            }
            linalg::acc(&mut g.filter_b1.data, &du);
            linalg::outer_acc(&mut g.filter_w1.data, &du, &cache.rbf[p * n_rbf..(p + 1) * n_rbf]);
        }

        for b in 0..n {
            let dqb = &dq[b * d..(b + 1) * d];
            linalg::outer_acc(&mut g.pre_w.data, dqb, &c.x_in[b * d..(b + 1) * d]);
            linalg::affine_transpose_acc(&blk.pre_w.data, dqb, &mut dx[b * d..(b + 1) * d]);
        }
    }

    for (a, &z) in structure.species.iter().enumerate() {
        let z = z as usize;
        linalg::acc(&mut grads.embedding.data[z * d..(z + 1) * d], &dx[a * d..(a + 1) * d]);
    }
}
