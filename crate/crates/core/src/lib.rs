//! Core library for an upsampling diffusion model: a forward chain that
//! jointly downsamples and noises images, a reverse chain whose structured
//! Gaussian steps upsample them back, and the training, sampling, and
//! latent-space tooling around the pair — plus an independent dense-matrix
//! and Monte-Carlo verification suite that re-derives every closed form
//! the fast paths rely on.
//!
//! Layout:
//! - [`tensor`], [`rng`], [`fft`]: planar image tensors, deterministic
//!   splittable random streams, and a small exact DFT.
//! - [`degrade`]: whitening blur-then-subsample operators, their adjoints,
//!   and the two interchangeable Gram representations.
//! - [`schedule`]: continuous noise schedules and their discretizations.
//! - [`diffusion`]: forward marginals, the two-eigenvalue reverse
//!   covariance, sampling, divergences, and the evidence bound.
//! - [`denoiser`]: a small convolutional predictor with a hand-written,
//!   finite-difference-verified backward pass.
//! - [`training`], [`checkpoint`]: deterministic multi-threaded training
//!   and the on-disk bundle format.
//! - [`generation`], [`latent`]: the reverse-chain sampler, replayable
//!   latent records, guidance, and latent-space edits.
//! - [`oracle`]: the independent verification suite.

pub mod checkpoint;
pub mod degrade;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod fft;
pub mod generation;
pub mod latent;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use checkpoint::{file_sha256, Checkpoint};
pub use degrade::{box_kernel, GramDescriptor, GramRepresentation, Kernel};
pub use denoiser::{ArchDescriptor, ConvNetParams, Denoiser, DenoiserInput};
pub use diffusion::{ElboReport, PosteriorParams, StepCoefficients};
pub use error::{CoreError, CoreResult};
pub use generation::{GuidanceConfig, LatentRecord, SampleNoise, SampleOptions};
pub use oracle::{CheckResult, VerificationReport};
pub use rng::RngStream;
pub use schedule::{steps_for_size, Schedule, ScheduleMeta, ScheduleVariant};
pub use tensor::{ImageTensor, Precision};
pub use training::{DatasetConfig, LossVariant, TrainConfig, TrainOutcome};
