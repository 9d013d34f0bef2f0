//! Deformable registration of 2D images trained under anatomical constraints.

pub mod apps;
pub mod error;
pub mod scalar;
pub mod synth;
pub mod training;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

use rand::SeedableRng;

/// The deterministic generator used for every random draw in the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Production precision.
pub type Tensor32 = Tensor<f32>;
/// Verification precision.
pub type Tensor64 = Tensor<f64>;
pub type VectorCnn32 = models::VectorCnn<f32>;
pub type Autoencoder32 = models::Autoencoder<f32>;
