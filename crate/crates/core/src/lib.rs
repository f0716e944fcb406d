//! Linear mixed models with fixed-effect selection and post-selection inference.

pub mod data;
pub mod distributions;
pub mod error;
pub mod inference;
pub mod io;
pub mod lmm;
pub mod multiplicity;
pub mod optim;
pub mod report;
pub mod rng;
pub mod selection;
pub mod sim;

pub use data::{ClusteredDataset, Subset};
pub use error::{Error, Result};
pub use lmm::{assemble_sigma, gls_beta, reml_fit, LmmFit, MarginalCovariance, VarianceParams};
pub use report::{CoefficientEntry, Diagnostics, InferenceReport, Method, Target};
pub use selection::{CandidateSet, Criterion, LassoSolution, LassoTuning, RuleKind, SelectionRule, ThetaPolicy};
pub use inference::{ConditionalSampler, ProposalCenter, SelfmadeOptions, SigmaChoice, UvilLambda, UvilRegion};
pub use multiplicity::{Correction, MetricSummary, ReplicationTally};
