pub mod dataio;
pub mod deformation;
pub mod densify;
pub mod error;
pub mod evalsuite;
pub mod fixtures;
pub mod losses;
pub mod math;
pub mod raster;
pub mod scene;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
