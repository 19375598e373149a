//! Weather-to-econometrics pipeline: station interpolation, sparse zonal
//! aggregation, exposure bins and degree days, basis-reduced panel
//! fixed-effects regression, spatial inference and specification curves.

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aggregate;
pub mod basis;
pub mod data;
pub mod error;
pub mod geo;
pub mod inference;
pub mod interpolate;
pub mod par;
pub mod regress;
pub mod rng;
pub mod speccurve;
pub mod synth;
pub mod thermal;

pub use error::{Error, Result};
