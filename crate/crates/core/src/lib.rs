#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod components;
pub mod error;
pub mod geoingest;
pub mod manet;
pub mod metrics;
pub mod raster;
pub mod seed;
pub mod sitemap;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
