//! Monte Carlo batch normalisation (MCBN) and MC dropout approximate
//! inference on a small, seedable, fully deterministic neural-network
//! engine, with an ELBO estimator suite on an analytic linear-Gaussian
//! model and a batch-size sweep harness.
//!
//! The engine is deliberately minimal: dense layers, batch normalisation
//! with batch / running / frozen statistic modes, ReLU, inverted dropout,
//! and softmax cross-entropy, all with exact manual gradients in `f64`.
//! Everything stochastic flows through explicit [`rng::Rng`] streams, so any
//! result can be reproduced bit-for-bit from its seeds.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod elbo;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod layers;
pub mod matrix;
pub mod network;
pub mod report;
pub mod rng;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use network::{build_mlp, BnPolicy, FrozenBnStats, Layer, Network};
pub use rng::Rng;
pub use train::{Dataset, TrainConfig, TrainHistory};
