//! Self-supervised feature enhancement (SFE) for convolutional classifiers.
//!
//! Feature maps of a CNN are copied `k` times with one random channel group
//! zeroed in each copy; joint heads then predict the pair (class, which group
//! was dropped). The crate contains everything needed to train and evaluate
//! that setup on CPU: a small autodiff engine, the channel transforms, the
//! joint heads and their losses, a residual backbone, data loading, the
//! training loop, and diagnostics.

pub mod autodiff;
pub mod error;
pub mod tensor;
pub mod transform;
pub mod heads;
pub mod inference;
pub mod backbone;
pub mod data;
pub mod trainer;
pub mod diagnostics;

pub use autodiff::{Graph, LrSchedule, ParamStore, SgdConfig, Var};
pub use backbone::{AttachmentMode, AttachmentPlan, BackboneConfig, NormKind, SfeModel};
pub use error::{Result, SfeError};
pub use heads::{JointHead, JointLabel, SingleHead};
pub use inference::InferenceScheme;
pub use tensor::{DType, Scalar, Tensor};
pub use transform::{ChannelPartition, TransformId};
