//! Similarity-based region proposal network (SRPN) for dense single-class
//! object detection: an anchor-dense detector whose classifier reads an
//! embedding layer trained with pair or triplet losses.
//!
//! All numeric code is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`, which the gradient checks and
//! reference tolerances assume.

pub mod anchors;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod losses;
pub mod sampling;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use anchors::{AnchorLabel, AnchorSpec, LabeledAnchor, LabelingConfig};
pub use geometry::{BBox, Detection, OffsetTuple};
pub use head::{HeadConfig, HeadOutput, Model};
pub use losses::{EmbedMode, LossWeights, Margin};
pub use scalar::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type BBox64 = BBox<f64>;
pub type Offsets64 = OffsetTuple<f64>;
pub type Detection64 = Detection<f64>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
