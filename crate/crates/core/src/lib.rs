//! Simulation of thermal desorption spectra from hydrogen diffusion–trapping
//! models, synthetic dataset generation, and a two-stage neural identifier
//! (trap count, then binding energies and densities) with a particle-swarm
//! fitter as an independent check.

pub mod datagen;
pub mod error;
pub mod fem;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod psofit;
pub mod spectrum;
pub mod transport;

pub use datagen::{Dataset, GenerationConfig, Protocol, Provenance, TrapRanges};
pub use error::{Result, TdsError};
pub use fem::{simulate_tds, ModelVariant, NumericalParams};
pub use pipeline::{ModelBundle, TrainingSettings, TrapPrediction};
pub use psofit::{FitResult, PsoConfig};
pub use spectrum::Spectrum;
pub use transport::{MaterialParams, TestParams, TrapSpec};
