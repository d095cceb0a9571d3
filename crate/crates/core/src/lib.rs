//! Detection-guided segmentation of small objects with ROI convolution.
//!
//! A region proposal network finds candidate boxes; a masked ("ROI")
//! convolution then restricts the segmentation stream, its loss and its
//! gradients to the union of those boxes. Everything, including the
//! backward passes, is written out by hand over a small dense tensor type.
//!
//! Module map:
//!
//! - [`tensor`]: tensors, convolution, transposed convolution, ReLU, max-pool
//! - [`roiconv`]: boxes, ROI masks, masked convolution forward and backward
//! - [`rpn`]: anchors, IoU, box coding, target assignment, proposals
//! - [`loss`]: smooth-L1, objectness cross-entropy, ROI-gated segmentation loss
//! - [`model`]: the network, SGD training step; [`checkpoint`] for persistence
//! - [`data`]: synthetic samples, PGM files, manifests
//! - [`metrics`]: precision / recall / dice and reports
//! - [`gradcheck`]: finite-difference verification
//! - [`harness`]: the operations behind the `roifcn` command-line tool

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod roiconv;
pub mod rpn;
pub mod tensor;

pub use error::{Error, Result};
pub use roiconv::{BBox, BinaryMask, RoiMask};
pub use tensor::{ConvParams, Scalar, Tensor};
