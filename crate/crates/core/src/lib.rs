//! Top Lyapunov exponents of Galerkin-truncated linear SPDEs with small
//! multiplicative noise near a Hopf point: simulation, Monte Carlo
//! estimation and the second-order small-noise expansion.

pub mod model;
pub mod asymptotics;
pub mod cli;
pub mod lyapunov;
pub mod oracle;
pub mod simulate;

pub use model::{Model, ModelDocument, ModelError, ModeSpec, NoiseEntry, NoiseTensor, SpectrumSpec};
