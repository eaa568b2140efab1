//! Cross-modal attention distillation for miniature vision-language models.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod probe;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vlm;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::{grad_check, GradCheckReport, Mask, Tensor};
pub use tensor::ops::{cross_entropy_masked, mse};

pub use checkpoint::Checkpoint;
pub use data::Sample;
pub use losses::{LossConfig, LossReport};
pub use probe::ProbeReport;
pub use train::{Teacher, TrainConfig, Trainer};
pub use vlm::{Vlm, VlmConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
