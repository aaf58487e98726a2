//! Shallow-ensemble interatomic potential.
//!
//! A SchNet-style message-passing trunk whose last layer is split into `M`
//! heads. Every head predicts the total energy; the head mean is the energy
//! estimate and the head spread is its uncertainty. Training minimizes the
//! Gaussian negative log-likelihood of the mean under the head variance.
//!
//! Modules:
//! - [`geometry`]: structures, periodic neighbor lists, radial basis, scan generators
//! - [`model`]: parameters, forward pass, ensemble aggregation
//! - [`training`]: NLL loss, reverse-mode gradients, Adam, train/finetune loops
//! - [`uqeval`]: parity metrics, variance summaries, energy-sorted profiles
//! - [`data`]: LJ/Morse oracles, synthetic datasets, extended XYZ, checkpoints
//! - [`cli`]: the `dpose` command line

pub mod cli;
pub mod data;
pub mod geometry;
pub mod model;
pub mod training;
pub mod uqeval;

mod digest;
mod linalg;

pub use digest::Digest;
pub use geometry::{NeighborList, Structure};


pub use model::{EnsemblePrediction, Hyper, ModelParams};
pub use training::{TrainConfig, TrainReport};
