//! Multi-spectral segmentation transformers with spectral band attention.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`gradcheck`]: dense tensors, a reverse-mode
//!   tape and a finite-difference oracle.
//! * [`sdm`]: attention across spectral bands, computed per spatial patch and
//!   averaged.
//! * [`backbone`]: windowed / shifted-window attention encoder with the
//!   spectral module fused into its first stage, plus CNN baselines.
//! * [`data`]: synthetic multi-band scenes, map-sheet split rules, class
//!   distribution audits and the grid/patch sampler.
//! * [`train`]: Adam, gradient accumulation, accuracy and confusion metrics.
//! * [`scaling`]: scaling-efficiency coefficients across model families.
//! * [`plot`]: SVG line charts.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod plot;
pub mod scaling;
pub mod sdm;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Primitive, Reduction, Tape, Var};
pub use backbone::{build_model, param_count, Family, Model, ModelConfig};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Session};
pub use sdm::{SdmConfig, SdmOutput};
pub use tensor::{Scalar, Tensor};
