//! Boundary-interior decoding (BID): unsupervised pre-training for
//! skeleton-based temporal action localization.
//!
//! The pipeline encodes motion with a dilated temporal convolutional
//! encoder, quantizes per-frame features with a two-codebook residual
//! vector quantizer, and trains two decoders from the quantized codes: an
//! interior decoder that inpaints randomly masked spans, and a boundary
//! decoder that predicts the final pose of each discovered segment. The
//! base-layer code indices define unsupervised *pre-action* segments. A
//! frame classifier is then fine-tuned on a small labeled subset and
//! scored with detection mAP over temporal IoU thresholds.
//!
//! Modules, bottom up:
//!
//! - [`data`]: synthetic annotated motion, on-disk formats, dataset splits
//! - [`diff`]: differentiable ops, parameters, Adam, gradient checks
//! - [`quantizer`]: nearest-code search, residual VQ, EMA codebooks
//! - [`model`]: encoder, decoders, masks, boundary targets, losses
//! - [`trainer`]: pre-training, fine-tuning, checkpoints
//! - [`eval`]: detections, temporal IoU, AP/mAP, confusion, purity
//! - [`cli`]: configuration and the `bid` command-line front end

pub mod cli;
mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod model;
pub mod quantizer;
pub mod trainer;

pub use error::{Error, Result};
