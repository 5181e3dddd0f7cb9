//! Core library for context-aware self-supervised learning on anatomy-anchored
//! patch graphs.
//!
//! Volumes are carved into a fixed atlas grid of overlapping 3D patches; an
//! invertible spatial transform per subject maps the grid into subject space so
//! that patch index `j` names the same anatomical region everywhere. A
//! conditional patch encoder and a graph convolutional network are trained with
//! two InfoNCE objectives under an interleaving schedule, and a linear probe on
//! the frozen pooled features can be decomposed back into per-node activation
//! scores.
//!
//! The crate is `no_std` (alloc required). Everything here is deterministic
//! given a root seed: randomness flows through named [`rng::Stream`]s, and all
//! file formats are defined as byte codecs in [`formats`] so the std layer only
//! touches the filesystem.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod augment;
pub mod contrastive;
pub mod encoders;
pub mod error;
pub mod explain;
pub mod formats;
pub mod patch_graph;
pub mod probe;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
