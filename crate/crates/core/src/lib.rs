//! Social conditional VAE for multi-agent trajectory prediction, with the
//! diagnostics used to detect social posterior collapse.

pub mod diagnostics;
pub mod entmax;
pub mod error;
pub mod graph_nets;
pub mod io;
pub mod map;
pub mod model;
pub mod nn;
pub mod params;
pub mod seq_encoders;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
