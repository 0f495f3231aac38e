pub mod attention;
pub mod bench;
pub mod data;
pub mod error;
pub mod explainer;
pub mod io;
pub mod metrics;
pub mod model;
pub mod recurrent;
pub mod rng;
pub mod train;

pub use error::{Result, SehmError};
