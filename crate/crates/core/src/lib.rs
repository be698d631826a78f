//! Instance mask heads built on direction pooling.
//!
//! The crate provides a small f64 tensor toolkit with hand-written gradients, the
//! direction-to-centre label encoding, bilinear ROI kernels (plain, deformable and direction
//! pooled), the class-agnostic coarse mask head with hypercolumn refinement, a synthetic scene
//! generator with oracle logits and a tiny trainable backbone, mask metrics, and the file
//! formats and commands used by the `dirmask` CLI.

pub mod backbone;
pub mod checks;
pub mod config;
pub mod conv;
pub mod dataset;
pub mod direction;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod loss;
pub mod mask;
pub mod offset_net;
pub mod optim;
pub mod params_io;
pub mod pipeline;
pub mod roi;
pub mod synth;
pub mod t4f;
pub mod tensor;
pub mod viz;

pub use direction::{CenterFrame, DirectionConfig, DirectionLabelMap};
pub use error::{Error, Result};
pub use heads::{Detection, FeatureSet, HeadConfig, HeadParams, LogitsBundle};
pub use mask::Mask;
pub use roi::{RoiBox, SubBoxOffsets};
pub use synth::{Instance, Layout, Scene, SynthConfig};
pub use tensor::Tensor4;
