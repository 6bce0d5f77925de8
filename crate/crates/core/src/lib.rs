pub mod adjoint;
pub mod cli;
mod error;
pub mod farm;
pub mod fem;
pub mod layout;
pub mod mesh;
pub mod optimizer;
pub mod scenario;
pub mod shallow_water;
pub mod sparse;

pub use error::Error;
