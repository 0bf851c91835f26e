//! Parameter extraction: lifetime fits, Fano lineshape fits, Q and Purcell
//! factors.

pub mod cavity;
pub mod decay;
pub mod fano;
pub mod lm;

pub use cavity::{purcell_factor, q_factor};
pub use decay::{fit_decay, DecayData, DecayFitOptions, DecayFitResult, DecayModel, FitMethod};
pub use fano::{fit_fano, FanoFitOptions, FanoFitResult, FanoParams, Spectrum};
pub use lm::LmConfig;
