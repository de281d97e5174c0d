//! Detecting non-binomial sex allocation in offspring-group counts.
//!
//! The crate covers classical dispersion tests (Meelis, James, R and
//! McCullagh's s²), an explicit model of sex allocation followed by binomial
//! developmental mortality, MCMC posterior inference for that model, evidence
//! estimation with Bayes factors between the binomial, multiplicative binomial
//! and double binomial allocation models, and a simulation harness for power
//! and calibration studies.

pub mod analysis;
pub mod classical;
pub mod data;
pub mod distributions;
pub mod error;
pub mod evidence;
pub mod io;
pub mod likelihood;
pub mod mcmc;
pub mod rng;
pub mod simulation;
pub mod special;

pub use analysis::{run_analysis, AnalysisReport, RunConfig};
pub use data::{Clutch, DataMode, Dataset};
pub use distributions::{AllocationModel, DispersionParams};
pub use error::{Error, Result};
pub use likelihood::{BetaPrior, GammaPrior, ModelParams, PriorConfig};
pub use evidence::{EvidenceEstimate, JeffreysCategory};
pub use mcmc::{McmcConfig, PosteriorSamples, SamplerKind};
