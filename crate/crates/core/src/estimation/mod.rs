//! Parameter packing, likelihood maximization and starting values.

pub mod fit;
pub mod kmeans;
pub mod objective;
pub mod optim;
pub mod params;

pub use fit::{estimate, fit, fit_iid_spline, fit_with_restarts, refit, FitReport, OptimizerConfig};
pub use kmeans::{kmeans, kmeans_init, Clustering, InitConfig};
pub use objective::{Evaluation, IidSplineObjective, Objective};
pub use optim::{maximize, BfgsConfig, OptimResult, StopReason};
pub use params::{pack, pack_tpm, unpack, unpack_tpm, EmissionSpec, Layout, ModelSpec, ParameterVector, TransitionSpec};
