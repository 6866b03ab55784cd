//! Low-rank adapters with measurable fusion behavior, on a toy diffusion
//! transformer over synthetic motion clips.
//!
//! Start with the runnable examples (`cargo run --release --example <name>`):
//!
//! - **`gradient_check`** — tape autodiff verified against central differences
//! - **`render_dataset`** — synthetic scenes, motion primitives, clip files
//! - **`train_adapter`** — base pre-training plus low-rank adapter training
//! - **`scaling_token`** — Fourier-embedded amplitude control of one adapter
//! - **`fuse_norm_consistency`** — norm-consistent vs vanilla weight fusion
//! - **`multifuse_partitioned`** — partitioned-attention fusion of k adapters
//! - **`diagnostics_report`** — orthogonality, norm, and linearity profiles
//!
//! The `lion` binary wraps the same library surface as subcommands
//! (`gen-data`, `pretrain`, `train`, `fuse`, `diagnose`, `eval`).

pub mod adapter;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod fusion;
pub mod model;
pub mod multifuse;
pub mod optim;
pub mod sampler;
pub mod scaling;
pub mod synthbench;
pub mod tape;
pub mod tensor;
pub mod weights;

pub use error::{LionError, Result};
pub use tensor::{Dtype, Scalar, Tensor};
