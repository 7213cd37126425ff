//! Spectral theory of spiked information-plus-noise matrices
//! `M = (σX/√N + A)(σX/√N + A)*`: deterministic equivalents, outlier and
//! eigenvector-overlap predictions, and Monte Carlo checks against finite
//! random draws.

// Negated float comparisons throughout the crate also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ensemble;
pub mod equilibrium;
pub mod error;
pub mod harness;
pub mod interval;
pub mod measure;
pub mod spectra;
pub mod spikes;

pub use ensemble::{EnsembleConfig, EntryLaw};
pub use equilibrium::{Equilibrium, ModelParams, ScanOptions, SolverOptions, Spike, SupportProfile};
pub use error::{Error, Result};
pub use harness::{predict, simulate, verify, ExperimentConfig, ExperimentReport};
pub use interval::Interval;
pub use measure::{discretize, AtomicMeasure, Family};
pub use spikes::{classify, SpikePrediction};
