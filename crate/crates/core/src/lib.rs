pub mod coes;
pub mod error;
pub mod es;
pub mod features;
pub mod linalg;
pub mod model_selection;
pub mod quantile;
pub mod simulation;
pub mod tailbound;

pub use error::{Error, Result};
