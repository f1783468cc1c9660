//! Deep Transformer stability lab.
//!
//! Building blocks, bottom-up:
//!
//! * [`autodiff`], [`gradcheck`], [`init`], [`rng`]: a deterministic reverse-mode
//!   tape over dense f64 tensors, its finite-difference oracle, Xavier draws and
//!   named seed streams.
//! * [`gains`]: DeepNorm `(α, β)` per architecture, Post-LN-init scales and the
//!   residual rule of each normalization scheme.
//! * [`model`]: tiny encoder-only / decoder-only / encoder-decoder Transformers.
//! * [`theory`]: scalar-reduced models and the model-update bounds.
//! * [`train`]: optimizers, schedules, toy tasks and instrumented training runs.
//! * [`experiment`]: sweeps, verification suites and the log-depth fit behind the CLI.

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod gains;
pub mod gradcheck;
pub mod init;
mod kernels;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use experiment::{fit_log_scaling, run_suite, run_sweep, ExperimentConfig, ScalingFit, Suite, VerifyConfig, VerifyReport};
pub use gains::{apply_residual, compute_gains, postln_init_scale, ArchKind, ArchShape, GainForm, GainSpec, NormScheme};
pub use model::{build_model, model_forward, InitScheme, ModelConfig, NormKind, TokenBatch, TransformerModel};
pub use tensor::Tensor;
pub use theory::{BoundReport, ScalarModel};
pub use train::{train_run, RunTrace, TaskKind, TaskSpec, TrainConfig};
