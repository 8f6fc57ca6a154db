//! Study-level liver ultrasound classification.
//!
//! A study is a set of B-mode images of one patient taken from up to six
//! standard probe positions, each paired with a liver segmentation mask.
//! This crate provides everything needed to train and evaluate binary
//! fibrosis classifiers over such studies:
//!
//! - [`tensor`]: a small f64 tensor type with tape-based reverse-mode
//!   differentiation covering exactly the operations the models need;
//! - [`layers`]: normalization layers with per-view affine banks;
//! - [`model`]: the convolutional backbone, mask-guided region pooling,
//!   set-level feature fusion, and the five classifier variants;
//! - [`dataset`]: image/mask I/O, study manifests, and a synthetic phantom
//!   generator for pipeline validation;
//! - [`train`]: patient-level fold splitting, augmentation, combination
//!   sampling, and the SGD training loop;
//! - [`eval`]: ROC analysis (full and low-false-positive partial AUC),
//!   recall-at-precision operating points, and cross-fold aggregation.

pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;
