//! Body-part interactiveness learning for human-object interaction (HOI)
//! detection, at desk scale.
//!
//! The pipeline detects candidate human-object pairs with a small
//! set-prediction transformer, classifies whether each pair actually
//! interacts by attending over body-part saliency masks built on the token
//! grid, and scores verbs for the pairs that survive non-interaction
//! suppression. Everything runs in double precision on the CPU with
//! deterministic seeding so results are reproducible bit-for-bit.
//!
//! Module map:
//! - [`geometry`]: pixel boxes, token-grid specs, IoU/GIoU.
//! - [`mask`]: token masks, body-part saliency maps, the progressive
//!   per-layer mask schedule, and filter-and-merge mask union.
//! - [`tape`]: a small reverse-mode autodiff tape over `f64` matrices.
//! - [`nn`]: parameter store, initialization, AdamW, checkpoints.
//! - [`attention`]: positional encodings, masked cross-attention, encoder
//!   and decoder layers, prediction heads.
//! - [`interactiveness`]: the interactiveness classifier in both the
//!   per-part scheme and the filter/merge one-pass scheme.
//! - [`model`]: the assembled network (feature extractor, box decoder,
//!   verb decoder, interactiveness head).
//! - [`losses`]: bipartite matching and the set-prediction losses.
//! - [`train`]: the two-stage trainer and the sparsity-adaptive sampler.
//! - [`scene`]: synthetic scene generation, annotation schema, hard-case
//!   tags.
//! - [`eval`]: greedy matching, average precision, NIS, pairwise NMS,
//!   split reports.
//! - [`viz`]: heatmap and mask image export.

pub mod attention;
pub mod eval;
pub mod geometry;
pub mod interactiveness;
pub mod losses;
pub mod mask;
pub mod model;
pub mod nn;
pub mod scene;
pub mod tape;
pub mod train;
pub mod viz;

pub use geometry::{GridSpec, PixelBox};
pub use mask::{BodyPart, TokenMask, NUM_PARTS};
