//! Spatio-temporal 4D convolution, mJ-Net segmentation networks, losses,
//! metrics and CT perfusion preprocessing.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod conv;
pub mod error;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod networks;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use conv::{Conv4dMode, ConvOptions, GroupSharing, KernelSpec, Padding};
pub use error::{Error, Result};
pub use losses::{ClassProbImage, LabelImage, LossKind, WeightMap};
pub use mask::{Class, MaskVolume, NUM_CLASSES, OUTSIDE};
pub use metrics::{Hausdorff, HausdorffMode};
pub use networks::{build_network, Architecture, Network, NetworkConfig, SliceSample};
pub use params::{ParamKind, ParamStore};
pub use pipeline::phantom::{make_phantom, PhantomSpec};
pub use pipeline::preprocess::{preprocess, PreprocessConfig, Preprocessed};
pub use pipeline::split::{split_dataset, Split};
pub use pipeline::{CtpStudy, Group};
pub use scalar::{DType, Scalar};
pub use tensor::{concat, AxisRole, PadMode, Tensor, VolumeMeta};
pub use train::{Dataset, Precision, TrainConfig, TrainOutcome};
