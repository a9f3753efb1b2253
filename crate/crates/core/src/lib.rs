//! Deep quality estimation for brain-tumor segmentations.
//!
//! A DenseNet regressor looks at 2D center-of-mass views (four MR channels
//! plus the encoded segmentation) and predicts a 1-6 star quality score.
//! The crate covers preprocessing, augmentation, training, inference,
//! curation, evaluation metrics and synthetic phantom data.

pub mod augment;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod net;
pub mod ratings;
pub mod synth;
pub mod volume;
