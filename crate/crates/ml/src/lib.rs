//! Federated learning algorithms and their workflow apps.

pub mod apps;
pub mod centralized;
pub mod cv;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod forest;
pub mod linalg;
pub mod linreg;
pub mod logreg;
pub mod normalize;
pub mod rng;
mod wire;

pub use apps::{register_all, registry};
pub use error::{MlError, MlResult};
