//! Text-conditioned hypernetworks that emit LoRA adapters for a frozen toy
//! transformer in a single forward pass.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autograd`]: dense `f64` tensors and a reverse-mode tape.
//! - [`base_lm`]: the frozen decoder-only transformer with LoRA injection points.
//! - [`lora`]: adapter data model, merging, similarity, and the `T2LA` format.
//! - [`task_embed`]: task-descriptor vectors (one-hot, hashed text, file tables).
//! - [`hypernet`]: the L/M/S hypernetworks and batched adapter generation.
//! - [`train`]: LoRA SFT, reconstruction training, and hypernet SFT.
//! - [`taskgen`]: synthetic token-level tasks with templated descriptions.
//! - [`eval`]: accuracy, metrics, similarity studies, and FLOPs accounting.
//! - [`experiment`]: end-to-end drivers for the toy-suite studies.
//! - [`gradcheck`]: finite-difference gradient checks.

pub mod autograd;
pub mod base_lm;
pub mod binio;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod hypernet;
mod kernels;
pub mod lora;
pub mod params;
pub mod task_embed;
pub mod taskgen;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use base_lm::{BaseLm, BaseLmConfig, TargetModule};
pub use error::{Error, Result};
pub use hypernet::{Arch, Hypernet, HypernetConfig};
pub use lora::{AdapterLibrary, AdapterSet, LoraLayout, LoraPair};
pub use task_embed::{TaskEmbedding, TaskInput};
pub use taskgen::{TaskKind, TaskSuite, ToyTask};
pub use tensor::Tensor;
