//! Diffusion U-Net feature taps, cross-attention image-text matching and
//! representation analyses.

pub mod analysis;
pub mod array;
pub mod backbone;
pub mod config;
pub mod datasets;
pub mod error;
pub mod fusion;
pub mod guidance;
pub mod hashing;
pub mod itm;
pub mod leakage;
pub mod store;

pub use array::{DynArray, Dtype, Element};
pub use backbone::{
    BlockAddress, CrossAttnStack, DenoiserBackend, ExtractionRequest, Extractor, FeatureTensor, FeatureType,
    NoiseSchedule, NoiseSpec, Provenance, Stage,
};
pub use error::{Error, Result};
pub use guidance::GuidancePair;
pub use store::FeatureStore;
