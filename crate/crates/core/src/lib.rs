//! Analytic patch-mosaic score machines for diffusion sampling.
//!
//! The crate evaluates closed-form score functions of Gaussian mixtures built
//! from training images (whole-image and patch-local variants), integrates the
//! reverse process with a DDIM stepper, and provides tooling to calibrate
//! locality scales and check generated samples.

pub mod analysis;
pub mod calibration;
pub mod cli;
pub mod dictionary;
pub mod error;
pub mod grid;
pub mod io;
pub mod machines;
pub mod sampler;
pub mod schedule;
pub mod toy;

pub use dictionary::{DictionaryOptions, PatchDictionary};
pub use error::{Error, Result};
pub use grid::{BorderSignature, ImageGrid, PaddingMode, Shape};
pub use machines::{build_machine, MachineConfig, MachineRegistry, PosteriorWeights, ScoreMachine, Variant};
pub use sampler::{sample, ScaleSchedule, Trajectory};
pub use schedule::NoiseSchedule;
