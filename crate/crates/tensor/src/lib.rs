//! Minimal dense-tensor engine for small sequence models.
//!
//! Everything the decision-transformer stack needs lives here: a row-major
//! [`Tensor`] type, a Wengert-style [`Tape`] recording a fixed set of
//! differentiable ops, a named [`ParamStore`], an AdamW optimizer with linear
//! warmup, a central finite-difference gradient checker and a two-file
//! checkpoint format.
//!
//! The engine is generic over [`Scalar`] so the same model code runs in
//! single precision for training and in double precision for gradient checks.

mod checkpoint;
mod error;
mod gradcheck;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, ManifestEntry};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, select_probes, GradCheckReport, Probe, ProbeResult};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{numel, Tensor};
