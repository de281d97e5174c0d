//! The full analysis pipeline: classical tests, model fits, evidence and
//! Bayes factors, assembled into one serializable report.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::{classical_summary, ClassicalSummary};
use crate::data::{DataMode, Dataset};
use crate::distributions::{AllocationModel, MAX_CLUTCH_SIZE};
use crate::error::{Error, Result};
use crate::evidence::{
    binomial_primary_log_evidence, bayes_factor_report, chib_evidence_with_samples, dataset_digest,
    BayesFactorReport, EvidenceEstimate, EvidenceMethod, JeffreysCategory,
};
use crate::likelihood::{BetaPrior, GammaPrior, PriorConfig};
use crate::mcmc::{
    posterior_predictive_allocation, run_chain, summarize_posterior, BlockDiagnostics, McmcConfig, PosteriorSummary,
    SamplerKind, MIN_SUMMARY_DRAWS,
};
use crate::rng::derive_stream;

/// Version of the JSON report layout; bumped on any incompatible change.
pub const SCHEMA_VERSION: &str = "1.0.0";
pub const TOOL_NAME: &str = "sexalloc";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to re-run an analysis on the same data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub models: Vec<AllocationModel>,
    pub mode: DataMode,
    pub priors: PriorConfig,
    /// Chain settings shared by every model; `mcmc.epsilon` is the Poisson truncation tolerance.
    pub mcmc: McmcConfig,
    /// Chain used for posterior summaries. Evidence always comes from the collapsed chain.
    pub sampler: SamplerKind,
    /// Clutch size of the posterior predictive pmf.
    pub predictive_n: u32,
    /// Prior model probabilities in the order of `models`; equal when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_weights: Option<Vec<f64>>,
    /// Interval level of the posterior summaries.
    pub level: f64,
}

impl RunConfig {
    /// Primary-data defaults: all three models, ψ ~ N(0, 1), 10⁵ iterations.
    pub fn primary() -> Self {
        RunConfig {
            models: AllocationModel::ALL.to_vec(),
            mode: DataMode::Primary,
            priors: PriorConfig::primary(1.0),
            mcmc: McmcConfig::with_iterations(100_000, 1),
            sampler: SamplerKind::Collapsed,
            predictive_n: 10,
            model_weights: None,
            level: 0.95,
        }
    }

    /// Secondary-data defaults with the given clutch-size and mortality priors.
    pub fn secondary(lambda: GammaPrior, mortality: BetaPrior) -> Self {
        RunConfig {
            mode: DataMode::Secondary,
            priors: PriorConfig::secondary(1.0, lambda, mortality),
            ..Self::primary()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::InvalidConfig("no models selected".into()));
        }
        let mut seen = self.models.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.models.len() {
            return Err(Error::InvalidConfig("a model is selected more than once".into()));
        }
        self.priors.validate(self.mode)?;
        self.mcmc.validate()?;
        if self.mcmc.draw_count() < MIN_SUMMARY_DRAWS {
            return Err(Error::InvalidConfig(format!(
                "(iterations − burn-in) / thin must leave at least {MIN_SUMMARY_DRAWS} draws, got {}",
                self.mcmc.draw_count()
            )));
        }
        if self.predictive_n == 0 || self.predictive_n > MAX_CLUTCH_SIZE {
            return Err(Error::InvalidConfig(format!(
                "predictive N must lie in 1..={MAX_CLUTCH_SIZE}, got {}",
                self.predictive_n
            )));
        }
        if let Some(w) = &self.model_weights {
            if w.len() != self.models.len() {
                return Err(Error::InvalidConfig("one prior weight per selected model is required".into()));
            }
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::param("level", self.level, "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl ToolInfo {
    pub fn current() -> Self {
        ToolInfo {
            name: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub mode: DataMode,
    pub clutches: usize,
    pub total_offspring: u64,
    pub total_males: u64,
    /// Males over all offspring; absent when there are none.
    pub pooled_sex_ratio: Option<f64>,
    /// Clutch size → number of clutches.
    pub size_histogram: BTreeMap<u32, usize>,
    pub has_deaths: bool,
    pub digest: String,
}

impl DatasetSummary {
    pub fn of(dataset: &Dataset) -> Self {
        DatasetSummary {
            mode: dataset.mode(),
            clutches: dataset.len(),
            total_offspring: dataset.total_offspring(),
            total_males: dataset.total_males(),
            pooled_sex_ratio: dataset.pooled_sex_ratio(),
            size_histogram: dataset.size_histogram(),
            has_deaths: dataset.has_deaths(),
            digest: dataset_digest(dataset),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictivePmf {
    pub clutch_size: u32,
    /// P(M = k) for k = 0..=clutch_size.
    pub pmf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub model: AllocationModel,
    pub sampler: SamplerKind,
    /// Seed of this model's chains, derived from the run seed.
    pub seed: u64,
    pub posterior: PosteriorSummary,
    pub evidence: EvidenceEstimate,
    /// Per-block acceptance of the summary chain.
    pub blocks: Vec<BlockDiagnostics>,
    pub predictive: PredictivePmf,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProbability {
    pub model: AllocationModel,
    pub prior: f64,
    pub posterior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: String,
    pub tool: ToolInfo,
    /// Path of the input file as given, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub config: RunConfig,
    pub dataset: DatasetSummary,
    pub classical: ClassicalSummary,
    pub fits: Vec<ModelFit>,
    /// Alternative-over-simpler Bayes factors; empty with a single model.
    pub bayes_factors: BayesFactorReport,
    pub model_probabilities: Vec<ModelProbability>,
    pub most_probable: AllocationModel,
    /// Jeffreys category of the most probable model against each other model.
    pub strength: Vec<Strength>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strength {
    pub against: AllocationModel,
    pub bayes_factor: f64,
    pub category: JeffreysCategory,
}

impl AnalysisReport {
    pub fn fit(&self, model: AllocationModel) -> Option<&ModelFit> {
        self.fits.iter().find(|f| f.model == model)
    }
}

/// Seed of one model's chains.
pub fn model_seed(seed: u64, model: AllocationModel) -> u64 {
    derive_stream(&[seed, model as u64])
}

fn fit_model(dataset: &Dataset, model: AllocationModel, config: &RunConfig) -> Result<ModelFit> {
    let seed = model_seed(config.mcmc.seed, model);
    let mcmc = McmcConfig {
        seed,
        ..config.mcmc.clone()
    };
    let (mut evidence, collapsed) = chib_evidence_with_samples(dataset, model, &config.priors, &mcmc)?;
    if model == AllocationModel::Binomial && dataset.mode() == DataMode::Primary {
        evidence.log_evidence = binomial_primary_log_evidence(dataset)?;
        evidence.mc_se = 0.0;
        evidence.method = EvidenceMethod::ClosedForm;
        evidence.ordinates.clear();
    }
    let samples = match config.sampler {
        SamplerKind::Collapsed => collapsed,
        SamplerKind::Augmented => run_chain(dataset, model, &config.priors, &mcmc)?,
    };
    let posterior = summarize_posterior(&samples, config.level)?;
    let pmf = posterior_predictive_allocation(&samples, config.predictive_n)?;
    Ok(ModelFit {
        model,
        sampler: config.sampler,
        seed,
        posterior,
        evidence,
        blocks: samples.blocks,
        predictive: PredictivePmf {
            clutch_size: config.predictive_n,
            pmf,
        },
        notes: samples.notes,
    })
}

/// Runs the classical tests, fits every selected model and compares them.
///
/// Models are fitted in parallel; the report lists them in the order of
/// `config.models` and is identical for identical inputs.
pub fn run_analysis(dataset: &Dataset, config: &RunConfig) -> Result<AnalysisReport> {
    config.validate()?;
    if dataset.mode() != config.mode {
        return Err(Error::InvalidConfig(format!(
            "dataset is {} but the run is configured for {} data",
            dataset.mode(),
            config.mode
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classical = classical_summary(dataset)?;
    let fits = config
        .models
        .par_iter()
        .map(|&m| fit_model(dataset, m, config))
        .collect::<Result<Vec<_>>>()?;

    let evidences: Vec<EvidenceEstimate> = fits.iter().map(|f| f.evidence.clone()).collect();
    // bayes_factor_report orders models canonically; align the weights with it.
    let weights = config.model_weights.as_ref().map(|w| {
        let mut pairs: Vec<(AllocationModel, f64)> = config.models.iter().copied().zip(w.iter().copied()).collect();
        pairs.sort_by_key(|(m, _)| *m as u8);
        pairs.into_iter().map(|(_, w)| w).collect::<Vec<_>>()
    });
    let bayes_factors = bayes_factor_report(&evidences, weights.as_deref())?;
    let prior_of = |m: AllocationModel| {
        bayes_factors
            .prior_weights
            .iter()
            .find(|(x, _)| *x == m)
            .map_or(1.0, |(_, w)| *w)
    };
    let post_of = |m: AllocationModel| {
        bayes_factors
            .posterior_probabilities
            .iter()
            .find(|(x, _)| *x == m)
            .map_or(1.0, |(_, p)| *p)
    };
    let model_probabilities: Vec<ModelProbability> = config
        .models
        .iter()
        .map(|&m| ModelProbability {
            model: m,
            prior: prior_of(m),
            posterior: post_of(m),
        })
        .collect();
    let most_probable = model_probabilities
        .iter()
        .fold(None::<&ModelProbability>, |best, p| match best {
            Some(b) if b.posterior >= p.posterior => Some(b),
            _ => Some(p),
        })
        .map(|p| p.model)
        .expect("at least one model");
    let top = fits.iter().find(|f| f.model == most_probable).expect("fitted");
    let strength = fits
        .iter()
        .filter(|f| f.model != most_probable)
        .map(|f| {
            let bf = (top.evidence.log_evidence - f.evidence.log_evidence).exp();
            Strength {
                against: f.model,
                bayes_factor: bf,
                category: JeffreysCategory::from_bayes_factor(bf),
            }
        })
        .collect();

    Ok(AnalysisReport {
        schema_version: SCHEMA_VERSION.into(),
        tool: ToolInfo::current(),
        input: None,
        config: config.clone(),
        dataset: DatasetSummary::of(dataset),
        classical,
        fits,
        bayes_factors,
        model_probabilities,
        most_probable,
        strength,
    })
}
