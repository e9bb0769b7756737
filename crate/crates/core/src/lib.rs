//! Vehicle detection with augmented confidence maps.
//!
//! The detector chains multi-resolution MSER proposals, a small CNN patch
//! classifier, per-pixel confidence stacking, rough-entropy thresholding and
//! a fuzzy blob classifier. Real-valued stages are generic over [`Scalar`]
//! (f32 or f64); the aliases below fix the types used by the detector.

pub mod augment;
pub mod confmap;
pub mod error;
pub mod evalpipe;
pub mod fuzzy;
pub mod imaging;
pub mod mser;
pub mod pipeline;
pub mod roughseg;
pub mod scalar;
pub mod tinycnn;

pub use error::{Error, Result};
pub use imaging::{GrayImage, Rect};
pub use scalar::Scalar;

/// Scalar used by the detector's CNN and confidence map.
pub type Real = f32;
pub type Cnn = tinycnn::CnnModel<Real>;
pub type ConfMap = confmap::ConfidenceMap<Real>;
pub type RoughTable = roughseg::RoughTable<f64>;
