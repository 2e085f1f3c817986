pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod model;
pub mod rerank;
pub mod rng;
pub mod synth;
pub mod train;
