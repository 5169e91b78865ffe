pub mod admm;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod model;
pub mod operators;
pub mod solver;
pub mod synthetic;
pub mod timeseries;
pub mod validation;
pub mod weights;

pub use error::{Result, ScsfError};
pub use model::{FitConfig, LowRankModel};
pub use solver::{fit, FitReport};
pub use timeseries::{PowerMatrix, PowerSeries};
