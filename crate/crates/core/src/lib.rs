//! Multi-view brain tumor segmentation: a two-branch FCNN, a mean-field CRF
//! unrolled as a recurrent network, three-view label fusion and
//! connected-component post-processing.

pub mod components;
pub mod crf;
pub mod error;
pub mod evaluation;
pub mod fcnn;
pub mod fusion;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod volume;

pub use error::{Error, Result, StageContext};
pub use volume::{Axis, Dims, LabelSlice, LabelVolume, MultiModalVolume, SliceTensor, NUM_CLASSES};
