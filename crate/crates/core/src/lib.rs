//! Hidden Markov models whose state-dependent densities are estimated
//! nonparametrically with tensor-product cubic B-splines.
//!
//! The crate covers model evaluation (scaled forward algorithm, Viterbi),
//! maximum-likelihood fitting with k-means starting values, covariate-driven
//! transition probabilities, cross-validated choice of the basis size, and a
//! simulation harness comparing the spline model with a Gaussian HMM.

pub mod basis;
pub mod covariate;
pub mod emission;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod gaussian;
pub mod hmm;
pub mod io;
pub mod quadrature;
pub mod simulation;
pub mod study;

pub use basis::SplineBasis;
pub use covariate::CovariateTransition;
pub use emission::{coefficients_from_beta, DensityFn, GridAxis, GridSpec, TensorEmission};
pub use error::{Error, Result};
pub use gaussian::GaussianEmission;
pub use hmm::{
    stationary_distribution, Emission, HmmModel, InitialLaw, LikelihoodDiagnostics, Sequence, SequenceSet,
    Transition, TransitionMatrix,
};
