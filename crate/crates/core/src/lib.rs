//! Monte-Carlo dropout segmentation with per-pixel uncertainty and
//! threshold-based case referral.
//!
//! The crate is `no_std` and only needs an allocator. Everything here is a
//! pure function of its inputs plus an explicit [`rng::RngStream`]; file
//! formats, the event store, the HTTP service and the command line live in
//! the `mcunet-triage` companion crate.
//!
//! Module map:
//!
//! * [`tensor`] / [`ops`]: dense tensors and the layer primitives
//!   (convolution, pooling, upsampling, softmax, entropy, dropout masks).
//! * [`rng`]: counter-based Philox streams keyed by `(seed, stream-id)`.
//! * [`unet`]: the two-level encoder/decoder, hand-written backprop,
//!   Adam/SGD training and MC-dropout sampling.
//! * [`uncertainty`]: aleatoric, epistemic, entropy, mutual information and
//!   their aleatoric + epistemic sum, case reductions and the sample-count
//!   sweep.
//! * [`referral`]: score normalisation, refer/retain decisions, pooled pixel
//!   metrics, AUROC, and the threshold sweep.
//! * [`data`]: synthetic vessel images and random patch extraction.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod ops;
pub mod referral;
pub mod rng;
pub mod tensor;
pub mod uncertainty;
pub mod unet;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Scalar, Tensor};
