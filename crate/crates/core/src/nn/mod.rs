//! Sheaf hypergraph networks: autodiff tape, model and training loop.

pub mod model;
pub mod tape;
pub mod train;
