pub mod error;
pub mod latent;
pub mod numerics;
pub mod render;
pub mod scene;
pub mod segmap;
pub mod siw;
pub mod sof;
pub mod trainer;

pub use error::{Error, Result};
