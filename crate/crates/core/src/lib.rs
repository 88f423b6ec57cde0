//! Weakly supervised semantic segmentation with CAM-guided adaptive
//! masking, masked cross-attention aggregation, and self-distillation from
//! an EMA teacher, on a small from-scratch f64 autodiff engine.

pub mod aggregation;
pub mod autograd;
pub mod cam;
pub mod config;
pub mod decoder;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod masking;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use cam::{compute_cam, derive_pseudo_labels, Cam, PseudoLabel, IGNORE};
pub use config::{
    AggregationKind, DatasetConfig, EvalConfig, MaskingStrategy, ModelConfig, RunConfig, Split,
    TrainConfig,
};
pub use decoder::LossBreakdown;
pub use distill::{Distribution, TeacherState};
pub use error::{FsrError, Result};
pub use evalkit::{ConfusionMatrix, EvalReport};
pub use masking::MaskPair;
pub use params::ParamStore;
pub use synthdata::{Dataset, LabeledImage, RgbImage, ViewPair};
pub use tensor::Matrix;
pub use trainer::{load_checkpoint, save_checkpoint, Checkpoint, Model, StepRecord, Trainer};
