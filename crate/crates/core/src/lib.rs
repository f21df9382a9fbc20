#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod features;
pub mod fed;
pub mod geo;
pub mod io;
pub mod labeling;
pub mod mapping;
pub mod mdfnn;
pub mod metrics;
pub mod pipeline;
pub mod plates;
pub mod scenario;

pub use error::{Error, Result};
