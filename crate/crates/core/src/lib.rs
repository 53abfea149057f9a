//! Cellular sheaves on hypergraphs: linear and non-linear sheaf Laplacians,
//! energies, diffusion and sheaf hypergraph networks.

pub mod diffusion;
pub mod energy;
pub mod error;
pub mod hypergraph;
pub mod laplacian;
pub mod linalg;
pub mod nn;
pub mod sheaf;
pub mod spectral;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
pub use hypergraph::Hypergraph;
pub use linalg::Mat;
pub use sheaf::{MapKind, Sheaf};
