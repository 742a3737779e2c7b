//! Multi-dataset, multi-modal MRI synthesis on a CPU autograd core.
//!
//! The crate is organised bottom-up:
//!
//! * [`datamodel`] – modality vocabulary, registry, samples, on-disk corpus.
//! * [`phantom`] – deterministic synthetic datasets with known ground truth.
//! * [`scheduler`] – modality-consistent batch scheduling.
//! * [`autograd`] – reverse-mode differentiation used by the networks.
//! * [`network`] – generator with dataset-conditioned feature modulation,
//!   availability-aware fusion and per-modality patch discriminators.
//! * [`losses`] – selective-supervision generator and discriminator losses.
//! * [`metrics`] – PSNR / SSIM kernels and the task evaluation harness.
//! * [`trainer`] – optimisation loop, schedule, checkpoints, ablations.

pub mod autograd;
pub mod checkpoint;
pub mod datamodel;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod montage;
pub mod network;
pub mod optim;
pub mod phantom;
pub mod scheduler;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
