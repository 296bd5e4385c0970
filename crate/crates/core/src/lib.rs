pub mod adjoint;
pub mod boundary;
pub mod error;
pub mod forward;
pub mod grid;
pub mod inverse;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod params;
pub mod real;
pub mod scenario;

pub use error::{Error, Result};
pub use real::Real;

pub type Grid = grid::SpaceTimeGrid<f64>;
