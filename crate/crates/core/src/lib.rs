//! Cross-attention teachers over three modalities (video, audio, language),
//! self-attention students that infer from video alone, and the losses that
//! move attention structure from one to the other.
//!
//! Layout mirrors the data flow:
//!
//! - [`scalar`], [`tensor`], [`graph`]: reverse-mode autodiff on a flat tape.
//! - [`gradcheck`]: central finite differences against the tape.
//! - [`nn`]: attention primitives and transformer stacks with traced maps.
//! - [`network`]: teacher/student assemblies and parameter accounting.
//! - [`distill`]: CRD and EDAM losses, pairing and alignment plans.
//! - [`data`]: synthetic multimodal corpus, on-disk format, splits.
//! - [`train`]: Adam, plateau schedule, the training loop, metrics.

pub mod data;
pub mod distill;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use graph::{Graph, NodeId};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};
