pub mod error;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod mesh;
pub mod metrics;
pub mod networks;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
