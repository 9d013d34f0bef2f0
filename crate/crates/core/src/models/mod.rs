//! The two networks: the mask autoencoder and the deformation-field predictor.

pub mod autoencoder;
mod corrupt;
pub mod layers;
pub mod vectorcnn;

pub use autoencoder::{AnatomyCode, Autoencoder, CODE_DIM};
pub use corrupt::corrupt_mask;
pub use layers::Forward;
pub use vectorcnn::{pair_tensor, VectorCnn};
