//! Algorithmic core for rehearsal-free class-incremental unsupervised domain
//! adaptation over a frozen vision-language encoder.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation: the encoder gateway with a deterministic toy backend, the
//! per-domain attribute dictionaries, prompt assembly and class probabilities,
//! attention-heatmap matching, the loss terms and their analytic gradients,
//! the incremental step schedules, the training loop, and the evaluation
//! metrics. File formats, dataset ingestion and the CLI live in the companion
//! `attralign` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod dictionary;
pub mod encoder;
pub mod error;
pub mod kmeans;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod prompt;
pub mod schedule;
pub mod synth;
pub mod toy;
pub mod trainer;
pub mod transformer;
pub mod vac;

pub use dictionary::{Attribute, AttributeDictionary, Domain, SelectionResult};
pub use encoder::{EncoderSpec, ImageInput, SoftPrompt, TapActivations, TextImageEncoder, VisualFeature};
pub use error::Error;
pub use losses::{DebiasState, LossBreakdown, TrainingMode};
pub use metrics::MetricsReport;
pub use schedule::{Benchmark, StepSchedule};
pub use toy::ToyEncoder;
pub use trainer::{RunState, TrainHyper};

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
