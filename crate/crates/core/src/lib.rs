pub mod attrloss;
pub mod baseline;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod special;
pub mod tensor;
pub mod tif;
pub mod worldgen;

pub use error::{Result, TifError};
pub use schedule::Schedule;
pub use tensor::{ImageTensor, Shape};
