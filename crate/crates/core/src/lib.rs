//! Event-level digital twin of a pulsed, fiber-coupled quantum-dot
//! single-photon source and the analysis chain used to characterise it.

pub mod bench;
pub mod budget;
pub mod config;
pub mod correlator;
pub mod emitter;
pub mod error;
pub mod fitting;
pub mod io;
pub mod measured;
pub mod pipeline;
pub mod rng;
pub mod tags;

pub use error::{Error, ErrorKind, Result};
pub use measured::Measured;
