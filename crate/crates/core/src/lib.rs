pub mod benchmark;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod manifold;
pub mod ode;
pub mod oracle;
pub mod solver;
pub mod stats;

mod clock;

pub use error::{Error, Result};
