//! File formats: rasters, dataset manifests and model bundles.

pub mod bundle;
pub mod config;
pub mod manifest;
pub mod raster;

pub use config::{AppsConfig, Config};
pub use bundle::{load_bundle, save_bundle, BundleInfo, Bundled};
pub use manifest::{write_dataset, Fold, Manifest, Record};
pub use raster::{load_image, load_mask, save_field_pfm, save_image_pgm, save_mask_pgm, WORKING_SIZE};
