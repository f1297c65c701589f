//! Few-shot promptable segmentation lab.
//!
//! A self-contained, desk-scale pipeline: a tape-based autodiff tensor
//! engine, LoRA-adapted attention blocks, a frozen toy image encoder,
//! automated box prompting, a two-way transformer mask decoder with
//! Hadamard-product mask calibration, and a bi-level trainer that alternates
//! lower-level weight updates with upper-level prompt-embedding updates on a
//! split few-shot dataset. No pretrained weights anywhere; everything is
//! verifiable with finite differences and loop oracles.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod prompt;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{backward, concat_axis, concat_axis0, tensor_checksum, GradTape, Tensor};
