pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod routers;
pub mod simplex;
pub mod train;

pub use error::{Error, Result};
