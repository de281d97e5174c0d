//! Posterior sampling for the allocation-plus-mortality model.
//!
//! Two samplers share one configuration:
//!
//! * [`AugmentedChain`] walks the joint space of θ and the unobserved clutch
//!   counts `(Nᵢ, Mᵢ)`: conjugate Gibbs steps for λ and d (and p under the
//!   binomial model), random-walk Metropolis for p and ψ, and one joint
//!   Metropolis–Hastings move per clutch for its latent pair.
//! * [`CollapsedChain`] sums the latents out through the likelihood engine and
//!   runs one-at-a-time random-walk Metropolis on `ln λ`, `logit d`,
//!   `logit p` and `ψ`. It is the sampler used for evidence estimation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DataMode, Dataset};
use crate::distributions::{allocation_pmf, AllocationModel, AllocationTable, DispersionParams, MAX_CLUTCH_SIZE};
use crate::error::{Error, Result};
use crate::likelihood::{complete_data_loglik_with, LatentState, LikelihoodEngine, ModelParams, PriorConfig, DEFAULT_EPSILON};
use crate::special::{expit, ln_choose, ln_poisson_pmf, logit, xlogy, LogSum};

const TARGET_ACCEPTANCE: f64 = 0.44;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub seed: u64,
    /// Random-walk scale on logit p.
    pub proposal_scale_p: f64,
    pub proposal_scale_psi: f64,
    /// Random-walk scale on ln λ (collapsed chain).
    pub proposal_scale_lambda: f64,
    /// Random-walk scale on logit d (collapsed chain).
    pub proposal_scale_d: f64,
    /// Largest |N′ − N| of a latent proposal.
    pub latent_step: u32,
    /// Robbins–Monro scale adaptation during burn-in.
    pub adapt: bool,
    /// Hard cap on latent clutch sizes; restricts the target to N ≤ cap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_eggs: Option<u32>,
    /// Keep thinned latent states in the output (augmented chain only).
    #[serde(default)]
    pub keep_latents: bool,
    /// Poisson truncation tolerance of the collapsed likelihood.
    pub epsilon: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iterations: 1_000_000,
            burn_in: 100_000,
            thin: 10,
            seed: 1,
            proposal_scale_p: 0.3,
            proposal_scale_psi: 0.3,
            proposal_scale_lambda: 0.1,
            proposal_scale_d: 0.3,
            latent_step: 1,
            adapt: true,
            max_eggs: None,
            keep_latents: false,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl McmcConfig {
    /// Short-run settings with the given length; burn-in is a tenth.
    pub fn with_iterations(iterations: u64, seed: u64) -> Self {
        McmcConfig {
            iterations,
            burn_in: iterations / 10,
            thin: 1,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be positive".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::InvalidConfig(format!(
                "burn-in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig("thin must be positive".into()));
        }
        for (name, v) in [
            ("proposal_scale_p", self.proposal_scale_p),
            ("proposal_scale_psi", self.proposal_scale_psi),
            ("proposal_scale_lambda", self.proposal_scale_lambda),
            ("proposal_scale_d", self.proposal_scale_d),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, v, "proposal scales must be positive"));
            }
        }
        if self.latent_step == 0 {
            return Err(Error::InvalidConfig("latent_step must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::param("epsilon", self.epsilon, "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// ⌊(iterations − burn_in) / thin⌋
    pub fn draw_count(&self) -> usize {
        (self.iterations.saturating_sub(self.burn_in) / self.thin.max(1)) as usize
    }

    pub(crate) fn records(&self, t: u64) -> bool {
        t >= self.burn_in && (t - self.burn_in + 1) % self.thin == 0
    }
}

/// Parameter blocks in sweep order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Lambda,
    Mortality,
    P,
    Psi,
    Latents,
}

impl Block {
    const PARAMS: [Block; 4] = [Block::Lambda, Block::Mortality, Block::P, Block::Psi];

    fn index(self) -> usize {
        self as usize
    }

    pub(crate) fn get(self, p: &ModelParams) -> f64 {
        match self {
            Block::Lambda => p.lambda,
            Block::Mortality => p.d,
            Block::P => p.p,
            Block::Psi => p.psi,
            Block::Latents => unreachable!("latents are not a scalar parameter"),
        }
    }

    pub(crate) fn set(self, p: &mut ModelParams, v: f64) {
        match self {
            Block::Lambda => p.lambda = v,
            Block::Mortality => p.d = v,
            Block::P => p.p = v,
            Block::Psi => p.psi = v,
            Block::Latents => unreachable!("latents are not a scalar parameter"),
        }
    }

    /// Unconstrained coordinate of the parameter value.
    pub(crate) fn to_u(self, v: f64) -> f64 {
        match self {
            Block::Lambda => v.ln(),
            Block::Mortality | Block::P => logit(v),
            _ => v,
        }
    }

    pub(crate) fn value_of_u(self, u: f64) -> f64 {
        match self {
            Block::Lambda => u.exp(),
            Block::Mortality | Block::P => expit(u),
            _ => u,
        }
    }

    /// ln |dθ/du| at the parameter value.
    pub(crate) fn ln_jacobian(self, v: f64) -> f64 {
        match self {
            Block::Lambda => v.ln(),
            Block::Mortality | Block::P => v.ln() + (-v).ln_1p(),
            _ => 0.0,
        }
    }

    fn in_domain(self, v: f64) -> bool {
        match self {
            Block::Lambda => v > 0.0 && v.is_finite(),
            Block::Mortality | Block::P => v > 0.0 && v < 1.0,
            _ => v.is_finite(),
        }
    }
}

/// Blocks with a free parameter for this model and data mode, in sweep order.
pub fn active_blocks(model: AllocationModel, mode: DataMode) -> Vec<Block> {
    Block::PARAMS
        .into_iter()
        .filter(|b| match b {
            Block::Lambda | Block::Mortality => mode == DataMode::Secondary,
            Block::Psi => model.has_dispersion(),
            _ => true,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    Gibbs,
    Metropolis,
}

/// Post-burn-in acceptance statistics of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagnostics {
    pub block: Block,
    pub kind: UpdateKind,
    pub proposals: u64,
    pub accepted: u64,
    pub acceptance_rate: f64,
    /// Random-walk scale after adaptation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Augmented,
    Collapsed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub params: ModelParams,
    pub latents: LatentState,
    /// Complete-data log posterior of this state.
    pub log_post: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub model: AllocationModel,
    pub mode: DataMode,
    pub sampler: SamplerKind,
    /// Thinned post-burn-in draws.
    pub draws: Vec<ModelParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<Vec<LatentState>>,
    pub blocks: Vec<BlockDiagnostics>,
    /// Non-fatal notes raised while sampling.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn values(&self, block: Block) -> Vec<f64> {
        self.draws.iter().map(|d| block.get(d)).collect()
    }

    pub fn acceptance(&self, block: Block) -> Option<f64> {
        self.blocks.iter().find(|b| b.block == block).map(|b| b.acceptance_rate)
    }
}

/// Random-walk scale with optional Robbins–Monro adaptation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tuner {
    log_scale: f64,
}

impl Tuner {
    fn new(scale: f64) -> Self {
        Tuner { log_scale: scale.ln() }
    }

    pub(crate) fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    fn adapt(&mut self, accepted: bool, t: u64) {
        let gain = (t as f64 + 1.0).powf(-0.6);
        let a = if accepted { 1.0 } else { 0.0 };
        self.log_scale = (self.log_scale + gain * (a - TARGET_ACCEPTANCE)).clamp(-9.0, 5.0);
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counter {
    proposed: u64,
    accepted: u64,
}

/// Bookkeeping shared by both samplers.
#[derive(Debug, Clone)]
struct Progress {
    iteration: u64,
    burn_in: u64,
    adapt: bool,
    counters: [Counter; 5],
}

impl Progress {
    fn new(config: &McmcConfig) -> Self {
        Progress {
            iteration: 0,
            burn_in: config.burn_in,
            adapt: config.adapt,
            counters: [Counter::default(); 5],
        }
    }

    fn record(&mut self, block: Block, accepted: bool, tuner: Option<&mut Tuner>) {
        let t = self.iteration;
        if t < self.burn_in {
            if self.adapt {
                if let Some(tuner) = tuner {
                    tuner.adapt(accepted, t);
                }
            }
            return;
        }
        let c = &mut self.counters[block.index()];
        c.proposed += 1;
        c.accepted += accepted as u64;
    }

    fn diagnostics(&self, blocks: &[(Block, UpdateKind, Option<f64>)]) -> Vec<BlockDiagnostics> {
        blocks
            .iter()
            .map(|&(block, kind, final_scale)| {
                let c = self.counters[block.index()];
                BlockDiagnostics {
                    block,
                    kind,
                    proposals: c.proposed,
                    accepted: c.accepted,
                    acceptance_rate: if c.proposed == 0 {
                        0.0
                    } else {
                        c.accepted as f64 / c.proposed as f64
                    },
                    final_scale,
                }
            })
            .collect()
    }
}

fn metropolis<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    if log_ratio.is_nan() || log_ratio == f64::NEG_INFINITY {
        return false;
    }
    rng.gen::<f64>().ln() < log_ratio
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Starting state.
///
/// d₀ is the prior mean; Nᵢ⁰ = nᵢ + round(nᵢ d₀/(1−d₀)); Mᵢ⁰ = mᵢ + min(Nᵢ⁰−nᵢ,
/// round((Nᵢ⁰−nᵢ) m̂)) with m̂ = Σm/Σn; p⁰ = m̂ clamped to [0.01, 0.99]; ψ⁰ = 0;
/// λ⁰ = mean Nᵢ⁰. An empty dataset starts at the prior means.
pub fn init_chain(dataset: &Dataset, model: AllocationModel, priors: &PriorConfig) -> Result<ChainState> {
    let mode = dataset.mode();
    priors.validate(mode)?;
    let p0 = if dataset.is_empty() {
        0.5
    } else {
        let ratio = dataset.pooled_sex_ratio().ok_or_else(|| {
            Error::Degenerate("no surviving offspring (Σn = 0); cannot initialize p".into())
        })?;
        ratio.clamp(0.01, 0.99)
    };
    let (eggs, male_eggs, lambda, d) = match mode {
        DataMode::Primary => (
            dataset.clutches().iter().map(|c| c.size).collect::<Vec<_>>(),
            dataset.clutches().iter().map(|c| c.males).collect::<Vec<_>>(),
            f64::NAN,
            f64::NAN,
        ),
        DataMode::Secondary => {
            let d0 = priors.mortality.expect("validated").mean();
            let lambda_prior = priors.lambda.expect("validated");
            let mut eggs = Vec::with_capacity(dataset.len());
            let mut male_eggs = Vec::with_capacity(dataset.len());
            for c in dataset.clutches() {
                let extra = (c.size as f64 * d0 / (1.0 - d0)).round() as u32;
                let big_n = c.size + extra;
                let extra_males = extra.min(((extra as f64) * p0).round() as u32);
                eggs.push(big_n);
                male_eggs.push(c.males + extra_males);
            }
            let lambda = if eggs.is_empty() {
                lambda_prior.mean()
            } else {
                eggs.iter().map(|&e| e as f64).sum::<f64>() / eggs.len() as f64
            };
            (eggs, male_eggs, lambda, d0)
        }
    };
    let params = ModelParams::new(p0, 0.0, lambda, d);
    let latents = LatentState { eggs, male_eggs };
    latents.check_against(dataset)?;
    let mut table = AllocationTable::new(model, params.dispersion())?;
    let log_post = priors.ln_density(&params, model, mode)
        + complete_data_loglik_with(&mut table, dataset, &latents, &params);
    if !log_post.is_finite() {
        return Err(Error::Numerical("initial state has non-finite posterior density".into()));
    }
    Ok(ChainState {
        params,
        latents,
        log_post,
    })
}

/// λ | N ~ Gamma(a + ΣNᵢ, b + C) in shape–rate form.
pub fn gibbs_update_lambda<R: Rng + ?Sized>(state: &ChainState, priors: &PriorConfig, rng: &mut R) -> Result<f64> {
    let g = priors
        .lambda
        .ok_or_else(|| Error::InvalidConfig("λ update needs a Gamma prior".into()))?;
    let total: u64 = state.latents.eggs.iter().map(|&n| n as u64).sum();
    let shape = g.shape + total as f64;
    let rate = g.rate + state.latents.len() as f64;
    let dist = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Numerical(format!("gamma draw: {e}")))?;
    Ok(dist.sample(rng))
}

/// d | N, n ~ Beta(a′ + Σ(Nᵢ − nᵢ), b′ + Σnᵢ).
pub fn gibbs_update_d<R: Rng + ?Sized>(
    state: &ChainState,
    dataset: &Dataset,
    priors: &PriorConfig,
    rng: &mut R,
) -> Result<f64> {
    let b = priors
        .mortality
        .ok_or_else(|| Error::InvalidConfig("d update needs a Beta prior".into()))?;
    let survivors: u64 = dataset.clutches().iter().map(|c| c.size as u64).sum();
    let eggs: u64 = state.latents.eggs.iter().map(|&n| n as u64).sum();
    let dist = Beta::new(b.a + (eggs - survivors) as f64, b.b + survivors as f64)
        .map_err(|e| Error::Numerical(format!("beta draw: {e}")))?;
    Ok(dist.sample(rng))
}

fn reflect(x: i64, floor: i64) -> i64 {
    if x < floor {
        2 * floor - x
    } else {
        x
    }
}

/// ln q(from → to) for the reflected ±step proposal.
fn ln_step_proposal(from: u32, to: u32, floor: u32, step: u32) -> f64 {
    let hits = (1..=step as i64)
        .flat_map(|s| [s, -s])
        .filter(|&delta| reflect(from as i64 + delta, floor as i64) == to as i64)
        .count();
    (hits as f64 / (2 * step) as f64).ln()
}

/// Data augmentation sampler over (θ, N, M).
#[derive(Debug, Clone)]
pub struct AugmentedChain<'a> {
    dataset: &'a Dataset,
    model: AllocationModel,
    priors: PriorConfig,
    state: ChainState,
    /// Allocation pmf rows at the current (p, ψ).
    table: AllocationTable,
    /// Σᵢ ln P(Mᵢ | Nᵢ, p, ψ)
    alloc_ll: f64,
    tune_p: Tuner,
    tune_psi: Tuner,
    latent_step: u32,
    max_eggs: u32,
    progress: Progress,
    notes: Vec<String>,
}

impl<'a> AugmentedChain<'a> {
    pub fn new(dataset: &'a Dataset, model: AllocationModel, priors: &PriorConfig, config: &McmcConfig) -> Result<Self> {
        config.validate()?;
        let init = init_chain(dataset, model, priors)?;
        Self::from_state(dataset, model, priors, config, init.params, init.latents)
    }

    /// Starts from a given state, which must be feasible.
    pub fn from_state(
        dataset: &'a Dataset,
        model: AllocationModel,
        priors: &PriorConfig,
        config: &McmcConfig,
        params: ModelParams,
        latents: LatentState,
    ) -> Result<Self> {
        config.validate()?;
        priors.validate(dataset.mode())?;
        params.validate(dataset.mode())?;
        latents.check_against(dataset)?;
        let max_eggs = config.max_eggs.unwrap_or(MAX_CLUTCH_SIZE).min(MAX_CLUTCH_SIZE);
        if latents.eggs.iter().any(|&n| n > max_eggs) {
            return Err(Error::Infeasible("initial clutch size exceeds max_eggs".into()));
        }
        let table = AllocationTable::new(model, Self::dispersion_of(model, &params))?;
        let mut chain = AugmentedChain {
            dataset,
            model,
            priors: *priors,
            state: ChainState {
                params,
                latents,
                log_post: f64::NAN,
            },
            table,
            alloc_ll: 0.0,
            tune_p: Tuner::new(config.proposal_scale_p),
            tune_psi: Tuner::new(config.proposal_scale_psi),
            latent_step: config.latent_step,
            max_eggs,
            progress: Progress::new(config),
            notes: Vec::new(),
        };
        chain.alloc_ll = chain.allocation_loglik_with(&mut chain.table.clone());
        chain.refresh_log_post();
        if !chain.state.log_post.is_finite() {
            return Err(Error::Infeasible("starting state has zero posterior density".into()));
        }
        Ok(chain)
    }

    fn dispersion_of(model: AllocationModel, params: &ModelParams) -> DispersionParams {
        DispersionParams {
            p: params.p,
            psi: if model.has_dispersion() { params.psi } else { 0.0 },
        }
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    fn allocation_loglik_with(&self, table: &mut AllocationTable) -> f64 {
        self.state
            .latents
            .eggs
            .iter()
            .zip(&self.state.latents.male_eggs)
            .map(|(&n, &m)| table.log_pmf(n, m))
            .sum()
    }

    fn refresh_log_post(&mut self) {
        let mode = self.dataset.mode();
        let lp = self.priors.ln_density(&self.state.params, self.model, mode);
        let ll = complete_data_loglik_with(&mut self.table, self.dataset, &self.state.latents, &self.state.params);
        self.state.log_post = lp + ll;
    }

    /// Conjugate λ step; a no-op for primary data.
    pub fn gibbs_update_lambda<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64> {
        self.lambda_step(rng)?;
        self.refresh_log_post();
        Ok(self.state.params.lambda)
    }

    fn lambda_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.dataset.mode() == DataMode::Secondary {
            self.state.params.lambda = gibbs_update_lambda(&self.state, &self.priors, rng)?;
            self.progress.record(Block::Lambda, true, None);
        }
        Ok(())
    }

    /// Conjugate d step; a no-op for primary data.
    pub fn gibbs_update_d<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64> {
        self.d_step(rng)?;
        self.refresh_log_post();
        Ok(self.state.params.d)
    }

    fn d_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.dataset.mode() == DataMode::Secondary {
            self.state.params.d = gibbs_update_d(&self.state, self.dataset, &self.priors, rng)?;
            self.progress.record(Block::Mortality, true, None);
        }
        Ok(())
    }

    /// Gibbs draw under the binomial model, random-walk Metropolis on logit p otherwise.
    pub fn update_p<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64> {
        self.p_step(rng)?;
        self.refresh_log_post();
        Ok(self.state.params.p)
    }

    fn p_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let cur = self.state.params.p;
        if self.model == AllocationModel::Binomial {
            let males: u64 = self.state.latents.male_eggs.iter().map(|&m| m as u64).sum();
            let eggs: u64 = self.state.latents.eggs.iter().map(|&n| n as u64).sum();
            let dist = Beta::new(1.0 + males as f64, 1.0 + (eggs - males) as f64)
                .map_err(|e| Error::Numerical(format!("beta draw: {e}")))?;
            let p: f64 = dist.sample(rng);
            if p > 0.0 && p < 1.0 {
                self.set_dispersion(p, self.state.params.psi)?;
            }
            self.progress.record(Block::P, true, None);
            return Ok(());
        }
        let proposal = expit(logit(cur) + self.tune_p.scale() * normal(rng));
        let accepted = if proposal > 0.0 && proposal < 1.0 {
            let mut table = AllocationTable::new(self.model, DispersionParams::new(proposal, self.state.params.psi)?)?;
            let ll = self.allocation_loglik_with(&mut table);
            let log_ratio = ll - self.alloc_ll + Block::P.ln_jacobian(proposal) - Block::P.ln_jacobian(cur);
            let ok = metropolis(log_ratio, rng);
            if ok {
                self.state.params.p = proposal;
                self.table = table;
                self.alloc_ll = ll;
            }
            ok
        } else {
            false
        };
        self.progress.record(Block::P, accepted, Some(&mut self.tune_p));
        Ok(())
    }

    fn set_dispersion(&mut self, p: f64, psi: f64) -> Result<()> {
        self.state.params.p = p;
        self.state.params.psi = psi;
        let mut table = AllocationTable::new(self.model, Self::dispersion_of(self.model, &self.state.params))?;
        self.alloc_ll = self.allocation_loglik_with(&mut table);
        self.table = table;
        Ok(())
    }

    /// Random-walk Metropolis on ψ. Under the binomial model ψ stays at 0 and
    /// the call is noted in the diagnostics.
    pub fn update_psi<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64> {
        self.psi_step(rng)?;
        self.refresh_log_post();
        Ok(self.state.params.psi)
    }

    fn psi_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if !self.model.has_dispersion() {
            if self.notes.is_empty() {
                self.notes.push("ψ update skipped: the binomial model has no dispersion parameter".into());
            }
            return Ok(());
        }
        let cur = self.state.params.psi;
        let proposal = cur + self.tune_psi.scale() * normal(rng);
        let mut table = AllocationTable::new(self.model, DispersionParams::new(self.state.params.p, proposal)?)?;
        let ll = self.allocation_loglik_with(&mut table);
        let log_ratio = ll - self.alloc_ll + self.priors.ln_psi(proposal) - self.priors.ln_psi(cur);
        let accepted = metropolis(log_ratio, rng);
        if accepted {
            self.state.params.psi = proposal;
            self.table = table;
            self.alloc_ll = ll;
        }
        self.progress.record(Block::Psi, accepted, Some(&mut self.tune_psi));
        Ok(())
    }

    /// ln Σ_{M ∈ [m, m+N−n]} P(M | N); the table must cover `big_n`.
    fn window_log_mass(&self, big_n: u32, n: u32, m: u32) -> f64 {
        let row = self.table.row_cached(big_n);
        let mut acc = LogSum::new();
        for big_m in m..=(m + big_n - n) {
            acc.add(row[big_m as usize]);
        }
        acc.value()
    }

    /// One joint (N, M) move per clutch; a no-op for primary data.
    pub fn update_latents<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.latent_step_all(rng);
        self.refresh_log_post();
    }

    fn latent_step_all<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if self.dataset.mode() == DataMode::Primary {
            return;
        }
        let ModelParams { lambda, d, .. } = self.state.params;
        let step = self.latent_step;
        for (i, c) in self.dataset.clutches().iter().enumerate() {
            let (n, m) = (c.size, c.males);
            let big_n = self.state.latents.eggs[i];
            let big_m = self.state.latents.male_eggs[i];
            let delta = rng.gen_range(1..=step as i64) * if rng.gen::<bool>() { 1 } else { -1 };
            let target = reflect(big_n as i64 + delta, n as i64) as u32;
            if target > self.max_eggs {
                self.progress.record(Block::Latents, false, None);
                continue;
            }
            self.table.ensure(target.max(big_n));
            let w_new = self.window_log_mass(target, n, m);
            let w_old = self.window_log_mass(big_n, n, m);

            let row = self.table.row_cached(target);
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut new_m = m + target - n;
            for cand in m..=(m + target - n) {
                cum += (row[cand as usize] - w_new).exp();
                if u < cum {
                    new_m = cand;
                    break;
                }
            }

            let females = n - m;
            let log_ratio = ln_poisson_pmf(target, lambda) - ln_poisson_pmf(big_n, lambda)
                + xlogy((target - n) as f64, d)
                - xlogy((big_n - n) as f64, d)
                + ln_choose(new_m, m)
                + ln_choose(target - new_m, females)
                - ln_choose(big_m, m)
                - ln_choose(big_n - big_m, females)
                + w_new
                - w_old
                + ln_step_proposal(target, big_n, n, step)
                - ln_step_proposal(big_n, target, n, step);
            let accepted = metropolis(log_ratio, rng);
            if accepted {
                let row = self.table.row_cached(target);
                let old = self.table.row_cached(big_n);
                self.alloc_ll += row[new_m as usize] - old[big_m as usize];
                self.state.latents.eggs[i] = target;
                self.state.latents.male_eggs[i] = new_m;
            }
            self.progress.record(Block::Latents, accepted, None);
        }
    }

    /// One sweep: λ, d, p, ψ, then the latents.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.lambda_step(rng)?;
        self.d_step(rng)?;
        self.p_step(rng)?;
        self.psi_step(rng)?;
        self.latent_step_all(rng);
        self.refresh_log_post();
        self.progress.iteration += 1;
        Ok(())
    }

    pub fn diagnostics(&self) -> Vec<BlockDiagnostics> {
        let mode = self.dataset.mode();
        let mut blocks = Vec::new();
        for b in active_blocks(self.model, mode) {
            let (kind, scale) = match b {
                Block::Lambda | Block::Mortality => (UpdateKind::Gibbs, None),
                Block::P if self.model == AllocationModel::Binomial => (UpdateKind::Gibbs, None),
                Block::P => (UpdateKind::Metropolis, Some(self.tune_p.scale())),
                _ => (UpdateKind::Metropolis, Some(self.tune_psi.scale())),
            };
            blocks.push((b, kind, scale));
        }
        if mode == DataMode::Secondary {
            blocks.push((Block::Latents, UpdateKind::Metropolis, None));
        }
        self.progress.diagnostics(&blocks)
    }
}

/// Metropolis sampler on θ with the latents summed out.
#[derive(Debug, Clone)]
pub struct CollapsedChain {
    model: AllocationModel,
    mode: DataMode,
    priors: PriorConfig,
    engine: LikelihoodEngine,
    params: ModelParams,
    log_lik: f64,
    blocks: Vec<Block>,
    free: [bool; 4],
    tuners: [Tuner; 4],
    /// (Σ males, Σ females) of the observed clutches, for the binomial p step.
    counts: (u64, u64),
    progress: Progress,
}

impl CollapsedChain {
    pub fn new(dataset: &Dataset, model: AllocationModel, priors: &PriorConfig, config: &McmcConfig) -> Result<Self> {
        let init = init_chain(dataset, model, priors)?;
        Self::from_params(dataset, model, priors, config, init.params)
    }

    pub fn from_params(
        dataset: &Dataset,
        model: AllocationModel,
        priors: &PriorConfig,
        config: &McmcConfig,
        params: ModelParams,
    ) -> Result<Self> {
        config.validate()?;
        let mode = dataset.mode();
        priors.validate(mode)?;
        let mut params = params;
        if !model.has_dispersion() {
            params.psi = 0.0;
        }
        params.validate(mode)?;
        let mut engine = LikelihoodEngine::new(dataset, model, config.epsilon)?;
        let log_lik = engine.log_likelihood(&params)?;
        if !log_lik.is_finite() {
            return Err(Error::Numerical("starting parameters have zero likelihood".into()));
        }
        let males = dataset.total_males();
        let total = dataset.total_offspring();
        Ok(CollapsedChain {
            model,
            mode,
            priors: *priors,
            engine,
            params,
            log_lik,
            blocks: active_blocks(model, mode),
            free: [true; 4],
            tuners: [
                Tuner::new(config.proposal_scale_lambda),
                Tuner::new(config.proposal_scale_d),
                Tuner::new(config.proposal_scale_p),
                Tuner::new(config.proposal_scale_psi),
            ],
            counts: (males, total - males),
            progress: Progress::new(config),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_lik
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub(crate) fn is_gibbs(&self, block: Block) -> bool {
        block == Block::P && self.model == AllocationModel::Binomial
    }

    pub(crate) fn scale(&self, block: Block) -> f64 {
        self.tuners[block.index()].scale()
    }

    /// Holds `block` at `value` from now on.
    pub(crate) fn fix(&mut self, block: Block, value: f64) -> Result<()> {
        let mut params = self.params;
        block.set(&mut params, value);
        self.log_lik = self.engine.log_likelihood(&params)?;
        self.params = params;
        self.free[block.index()] = false;
        Ok(())
    }

    pub(crate) fn set_adapt(&mut self, adapt: bool, burn_in: u64) {
        self.progress = Progress {
            iteration: 0,
            burn_in,
            adapt,
            counters: [Counter::default(); 5],
        };
    }

    pub(crate) fn log_prior(&self, params: &ModelParams) -> f64 {
        self.priors.ln_density(params, self.model, self.mode)
    }

    /// ℓ(θ) + ln π(θ) + ln J_b(θ_b); −∞ outside the parameter domain.
    pub(crate) fn log_target_at(&mut self, params: &ModelParams, block: Block) -> Result<f64> {
        let v = block.get(params);
        if !block.in_domain(v) {
            return Ok(f64::NEG_INFINITY);
        }
        let ll = self.engine.log_likelihood(params)?;
        Ok(ll + self.log_prior(params) + block.ln_jacobian(v))
    }

    pub(crate) fn exact_loglik(&mut self, params: &ModelParams) -> Result<f64> {
        self.engine.log_likelihood(params)
    }

    /// Log full-conditional density of a Gibbs block at `value`.
    pub(crate) fn gibbs_log_density(&self, block: Block, value: f64) -> f64 {
        debug_assert!(self.is_gibbs(block));
        let (males, females) = self.counts;
        let a = 1.0 + males as f64;
        let b = 1.0 + females as f64;
        statrs::function::beta::ln_beta(a, b).mul_add(-1.0, xlogy(a - 1.0, value) + xlogy(b - 1.0, 1.0 - value))
    }

    fn step_block<R: Rng + ?Sized>(&mut self, block: Block, rng: &mut R) -> Result<()> {
        if self.is_gibbs(block) {
            let (males, females) = self.counts;
            let dist = Beta::new(1.0 + males as f64, 1.0 + females as f64)
                .map_err(|e| Error::Numerical(format!("beta draw: {e}")))?;
            let p: f64 = dist.sample(rng);
            if p > 0.0 && p < 1.0 {
                let mut params = self.params;
                params.p = p;
                self.log_lik = self.engine.log_likelihood(&params)?;
                self.params = params;
            }
            self.progress.record(block, true, None);
            return Ok(());
        }
        let cur = block.get(&self.params);
        let scale = self.tuners[block.index()].scale();
        let proposal = block.value_of_u(block.to_u(cur) + scale * normal(rng));
        let accepted = if block.in_domain(proposal) {
            let mut params = self.params;
            block.set(&mut params, proposal);
            let ll = self.engine.log_likelihood(&params)?;
            let log_ratio = ll - self.log_lik + self.priors.ln_density(&params, self.model, self.mode)
                - self.priors.ln_density(&self.params, self.model, self.mode)
                + block.ln_jacobian(proposal)
                - block.ln_jacobian(cur);
            let ok = metropolis(log_ratio, rng);
            if ok {
                self.params = params;
                self.log_lik = ll;
            }
            ok
        } else {
            false
        };
        self.progress.record(block, accepted, Some(&mut self.tuners[block.index()]));
        Ok(())
    }

    /// One sweep over the free blocks in order λ, d, p, ψ.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        for i in 0..self.blocks.len() {
            let b = self.blocks[i];
            if self.free[b.index()] {
                self.step_block(b, rng)?;
            }
        }
        self.progress.iteration += 1;
        Ok(())
    }

    pub fn diagnostics(&self) -> Vec<BlockDiagnostics> {
        let blocks: Vec<_> = self
            .blocks
            .iter()
            .filter(|b| self.free[b.index()])
            .map(|&b| {
                if self.is_gibbs(b) {
                    (b, UpdateKind::Gibbs, None)
                } else {
                    (b, UpdateKind::Metropolis, Some(self.scale(b)))
                }
            })
            .collect();
        self.progress.diagnostics(&blocks)
    }
}

/// Runs the augmented sampler.
pub fn run_chain(
    dataset: &Dataset,
    model: AllocationModel,
    priors: &PriorConfig,
    config: &McmcConfig,
) -> Result<PosteriorSamples> {
    let mut chain = AugmentedChain::new(dataset, model, priors, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draws = Vec::with_capacity(config.draw_count());
    let mut latents = config.keep_latents.then(Vec::new);
    for t in 0..config.iterations {
        chain.sweep(&mut rng)?;
        if config.records(t) {
            draws.push(chain.state.params);
            if let Some(l) = latents.as_mut() {
                l.push(chain.state.latents.clone());
            }
        }
    }
    Ok(PosteriorSamples {
        model,
        mode: dataset.mode(),
        sampler: SamplerKind::Augmented,
        draws,
        latents,
        blocks: chain.diagnostics(),
        notes: chain.notes.clone(),
    })
}

/// Runs the collapsed sampler.
pub fn run_collapsed_chain(
    dataset: &Dataset,
    model: AllocationModel,
    priors: &PriorConfig,
    config: &McmcConfig,
) -> Result<PosteriorSamples> {
    let mut chain = CollapsedChain::new(dataset, model, priors, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let draws = collect_draws(&mut chain, config, &mut rng)?;
    Ok(PosteriorSamples {
        model,
        mode: dataset.mode(),
        sampler: SamplerKind::Collapsed,
        draws,
        latents: None,
        blocks: chain.diagnostics(),
        notes: Vec::new(),
    })
}

pub(crate) fn collect_draws<R: Rng + ?Sized>(
    chain: &mut CollapsedChain,
    config: &McmcConfig,
    rng: &mut R,
) -> Result<Vec<ModelParams>> {
    let mut draws = Vec::with_capacity(config.draw_count());
    for t in 0..config.iterations {
        chain.sweep(rng)?;
        if config.records(t) {
            draws.push(chain.params);
        }
    }
    Ok(draws)
}

pub fn run_sampler(
    kind: SamplerKind,
    dataset: &Dataset,
    model: AllocationModel,
    priors: &PriorConfig,
    config: &McmcConfig,
) -> Result<PosteriorSamples> {
    match kind {
        SamplerKind::Augmented => run_chain(dataset, model, priors, config),
        SamplerKind::Collapsed => run_collapsed_chain(dataset, model, priors, config),
    }
}

/// Empirical quantile with linear interpolation between order statistics (type 7).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Variance of the sample mean by non-overlapping batch means.
pub fn batch_means_variance(xs: &[f64], batches: usize) -> f64 {
    let n = xs.len();
    let k = batches.min(n).max(1);
    let size = n / k;
    if size == 0 || k < 2 {
        return 0.0;
    }
    let means: Vec<f64> = (0..k)
        .map(|b| xs[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / k as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (k - 1) as f64;
    var / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    /// Monte Carlo standard error of the mean (batch means).
    pub mc_se: f64,
    pub ess: f64,
}

impl ParameterSummary {
    pub fn from_draws(xs: &[f64], level: f64) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let tail = (1.0 - level) / 2.0;
        let var_mean = batch_means_variance(xs, 25);
        let ess = if var_mean > 0.0 { (var / var_mean).min(n) } else { n };
        ParameterSummary {
            mean,
            sd: var.sqrt(),
            median: quantile(&sorted, 0.5),
            lower: quantile(&sorted, tail),
            upper: quantile(&sorted, 1.0 - tail),
            mc_se: var_mean.sqrt(),
            ess,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Per-parameter posterior summaries; absent parameters are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub draws: usize,
    pub level: f64,
    pub p: ParameterSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi: Option<ParameterSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<ParameterSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<ParameterSummary>,
}

pub const MIN_SUMMARY_DRAWS: usize = 100;

/// Mean, median and equi-tailed interval of each free parameter.
pub fn summarize_posterior(samples: &PosteriorSamples, level: f64) -> Result<PosteriorSummary> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::param("level", level, "must lie in (0, 1)"));
    }
    if samples.len() < MIN_SUMMARY_DRAWS {
        return Err(Error::InvalidConfig(format!(
            "posterior summaries need at least {MIN_SUMMARY_DRAWS} draws, got {}",
            samples.len()
        )));
    }
    let summary = |b: Block| ParameterSummary::from_draws(&samples.values(b), level);
    let secondary = samples.mode == DataMode::Secondary;
    Ok(PosteriorSummary {
        draws: samples.len(),
        level,
        p: summary(Block::P),
        psi: samples.model.has_dispersion().then(|| summary(Block::Psi)),
        lambda: secondary.then(|| summary(Block::Lambda)),
        d: secondary.then(|| summary(Block::Mortality)),
    })
}

/// (1/S) Σ_s P(M | N, p⁽ˢ⁾, ψ⁽ˢ⁾) over M = 0..=N.
pub fn posterior_predictive_allocation(samples: &PosteriorSamples, big_n: u32) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no posterior draws".into()));
    }
    let mut acc = vec![0.0; big_n as usize + 1];
    let mut run: Option<(DispersionParams, usize)> = None;
    let flush = |disp: DispersionParams, count: usize, acc: &mut Vec<f64>| -> Result<()> {
        for (a, w) in acc.iter_mut().zip(allocation_pmf(samples.model, big_n, disp)?) {
            *a += w * count as f64;
        }
        Ok(())
    };
    // Consecutive repeats (rejected moves) share one pmf evaluation.
    for d in &samples.draws {
        let disp = DispersionParams {
            p: d.p,
            psi: if samples.model.has_dispersion() { d.psi } else { 0.0 },
        };
        match run {
            Some((prev, count)) if prev == disp => run = Some((prev, count + 1)),
            Some((prev, count)) => {
                flush(prev, count, &mut acc)?;
                run = Some((disp, 1));
            }
            None => run = Some((disp, 1)),
        }
    }
    if let Some((prev, count)) = run {
        flush(prev, count, &mut acc)?;
    }
    let s = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= s);
    Ok(acc)
}

/// Kolmogorov–Smirnov distance between a sample and a continuous CDF.
pub fn ks_statistic(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic one-sample KS critical value at level `alpha`.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}
