//! Marginal likelihoods, Bayes factors and model probabilities.
//!
//! [`chib_evidence`] applies the Chib identity
//!
//! ```text
//! log π(D) = log π(D | θ*) + log π(θ*) − log π(θ* | D)
//! ```
//!
//! with the likelihood ordinate computed exactly and the posterior ordinate
//! factored block by block (λ, d, p, ψ) using Chib–Jeliazkov reduced runs of
//! the collapsed sampler. [`oracle_evidence`] integrates the same likelihood
//! deterministically on a tensor Gauss–Legendre grid in prior-quantile
//! coordinates and serves as an independent check.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta as BetaDist, ContinuousCDF, Gamma as GammaDist, Normal};
use statrs::function::beta::ln_beta;

use crate::data::{DataMode, Dataset};
use crate::distributions::{poisson_truncation_bound, AllocationModel, DispersionParams};
use crate::error::{Error, Result};
use crate::likelihood::{truncation_limit, LikelihoodEngine, ModelParams, PriorConfig};
use crate::mcmc::{
    active_blocks, batch_means_variance, normal, Block, CollapsedChain, McmcConfig, PosteriorSamples, SamplerKind,
};
use crate::rng::{splitmix64, stream_rng};
use crate::special::{ln_choose, ln_poisson_pmf, LogSum};

const BATCHES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceMethod {
    ChibJeliazkov,
    QuadratureOracle,
    /// Beta-function evidence of the binomial model on primary data.
    ClosedForm,
}

/// Posterior ordinate of one block at θ*.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockOrdinate {
    pub block: Block,
    pub log_density: f64,
    pub mc_se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub nodes: usize,
    pub log_evidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEstimate {
    pub model: AllocationModel,
    pub method: EvidenceMethod,
    pub log_evidence: f64,
    /// Monte Carlo standard error; for the quadrature oracle, the change at the last refinement.
    pub mc_se: f64,
    /// Posterior mean used as the Chib evaluation point.
    pub theta_star: ModelParams,
    /// Fingerprint of the data the estimate belongs to.
    pub dataset_digest: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ordinates: Vec<BlockOrdinate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refinements: Vec<Refinement>,
}

/// Order-independent fingerprint of a dataset's mode and counts.
pub fn dataset_digest(dataset: &Dataset) -> String {
    let mut h = splitmix64(match dataset.mode() {
        DataMode::Primary => 1,
        DataMode::Secondary => 2,
    });
    for ((n, m), c) in dataset.pair_counts() {
        h = splitmix64(h ^ ((n as u64) << 40 | (m as u64) << 20 | c as u64));
    }
    format!("{h:016x}")
}

/// Σ ln C(Nᵢ, Mᵢ) + ln B(1 + ΣM, 1 + Σ(N − M)): binomial evidence on primary data under p ~ U(0, 1).
pub fn binomial_primary_log_evidence(dataset: &Dataset) -> Result<f64> {
    if dataset.mode() != DataMode::Primary {
        return Err(Error::InvalidConfig("closed-form evidence needs primary data".into()));
    }
    let coef: f64 = dataset.clutches().iter().map(|c| ln_choose(c.size, c.males)).sum();
    let males = dataset.total_males() as f64;
    let females = dataset.total_offspring() as f64 - males;
    Ok(coef + ln_beta(1.0 + males, 1.0 + females))
}

fn log_mean_with_var(xs: &[f64]) -> Result<(f64, f64)> {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::Numerical(
            "Chib–Jeliazkov average is zero; the reduced run never reached θ*".into(),
        ));
    }
    Ok((mean.ln(), batch_means_variance(xs, BATCHES) / (mean * mean)))
}

fn normal_density(x: f64, scale: f64) -> f64 {
    (-0.5 * (x / scale).powi(2)).exp() / (scale * (2.0 * std::f64::consts::PI).sqrt())
}

/// Evidence by the Chib–Jeliazkov method on the collapsed chain.
pub fn chib_evidence(
    dataset: &Dataset,
    model: AllocationModel,
    priors: &PriorConfig,
    config: &McmcConfig,
) -> Result<EvidenceEstimate> {
    chib_evidence_with_samples(dataset, model, priors, config).map(|(e, _)| e)
}

/// [`chib_evidence`], also returning the pilot chain's draws.
///
/// The pilot runs `config.iterations` sweeps with adaptation during burn-in; θ*
/// is its posterior mean. Reduced run k then fixes the first k blocks at θ*
/// and runs the same number of sweeps without adaptation. Chib–Jeliazkov
/// terms are evaluated on the thinned draws.
pub fn chib_evidence_with_samples(
    dataset: &Dataset,
    model: AllocationModel,
    priors: &PriorConfig,
    config: &McmcConfig,
) -> Result<(EvidenceEstimate, PosteriorSamples)> {
    config.validate()?;
    let mode = dataset.mode();
    let blocks = active_blocks(model, mode);
    let stream = |k: u64| stream_rng(config.seed, &[model as u64, k]);

    let mut chain = CollapsedChain::new(dataset, model, priors, config)?;
    let mut rng = stream(0);
    let pilot = run_segment(&mut chain, config, &mut rng)?;
    let pilot_blocks = chain.diagnostics();
    let samples = PosteriorSamples {
        model,
        mode,
        sampler: SamplerKind::Collapsed,
        draws: pilot.iter().map(|d| d.0).collect(),
        latents: None,
        blocks: pilot_blocks.clone(),
        notes: Vec::new(),
    };
    if pilot.is_empty() {
        return Err(Error::InvalidConfig("pilot chain produced no draws".into()));
    }
    if let Some(stuck) = pilot_blocks
        .iter()
        .find(|b| b.kind == crate::mcmc::UpdateKind::Metropolis && b.accepted == 0)
    {
        return Err(Error::Numerical(format!(
            "pilot chain never moved block {:?}; evidence cannot be estimated",
            stuck.block
        )));
    }

    let mut star = pilot[0].0;
    for &b in &blocks {
        let mean = pilot.iter().map(|d| b.get(&d.0)).sum::<f64>() / pilot.len() as f64;
        b.set(&mut star, mean);
    }
    if !model.has_dispersion() {
        star.psi = 0.0;
    }
    star.validate(mode)
        .map_err(|e| Error::Numerical(format!("posterior mean lies on the parameter boundary: {e}")))?;
    for &b in &blocks {
        let v = b.get(&star);
        if b.to_u(v).is_infinite() {
            return Err(Error::Numerical(format!("posterior mean of {b:?} lies on the prior boundary")));
        }
    }

    let digest = dataset_digest(dataset);
    if dataset.is_empty() {
        return Ok((
            EvidenceEstimate {
                model,
                method: EvidenceMethod::ChibJeliazkov,
                log_evidence: 0.0,
                mc_se: 0.0,
                theta_star: star,
                dataset_digest: digest,
                ordinates: Vec::new(),
                refinements: Vec::new(),
            },
            samples,
        ));
    }

    // runs[k]: draws with blocks[..k] fixed at θ*.
    let mut runs = vec![pilot];
    for k in 1..blocks.len() {
        chain.fix(blocks[k - 1], blocks[k - 1].get(&star))?;
        chain.set_adapt(false, config.burn_in);
        let mut rng = stream(k as u64);
        runs.push(run_segment(&mut chain, config, &mut rng)?);
    }
    let ll_star = chain.exact_loglik(&star)?;
    let lp_star = chain.log_prior(&star);
    let draws_per_run = runs[0].len();
    runs.push(vec![(star, ll_star); draws_per_run]);

    let mut ordinates = Vec::with_capacity(blocks.len());
    for (k, &b) in blocks.iter().enumerate() {
        let v_star = b.get(&star);
        if chain.is_gibbs(b) {
            ordinates.push(BlockOrdinate {
                block: b,
                log_density: chain.gibbs_log_density(b, v_star),
                mc_se: 0.0,
            });
            continue;
        }
        let scale = chain.scale(b);
        let u_star = b.to_u(v_star);

        let mut num = Vec::with_capacity(runs[k].len());
        for &(theta, ll) in &runs[k] {
            let cur = ll + chain.log_prior(&theta) + b.ln_jacobian(b.get(&theta));
            let mut moved = theta;
            b.set(&mut moved, v_star);
            let to_star = chain.log_target_at(&moved, b)?;
            let alpha = (to_star - cur).min(0.0).exp();
            num.push(alpha * normal_density(u_star - b.to_u(b.get(&theta)), scale));
        }

        let mut rng = stream(1000 + k as u64);
        let mut den = Vec::with_capacity(runs[k + 1].len());
        for &(theta, ll) in &runs[k + 1] {
            let at_star = ll + chain.log_prior(&theta) + b.ln_jacobian(v_star);
            let mut moved = theta;
            b.set(&mut moved, b.value_of_u(u_star + scale * normal(&mut rng)));
            let away = chain.log_target_at(&moved, b)?;
            den.push((away - at_star).min(0.0).exp());
        }

        let (ln_num, var_num) = log_mean_with_var(&num)?;
        let (ln_den, var_den) = log_mean_with_var(&den)?;
        ordinates.push(BlockOrdinate {
            block: b,
            log_density: ln_num - ln_den - b.ln_jacobian(v_star),
            mc_se: (var_num + var_den).sqrt(),
        });
    }

    let log_post_ordinate: f64 = ordinates.iter().map(|o| o.log_density).sum();
    let log_evidence = ll_star + lp_star - log_post_ordinate;
    if !log_evidence.is_finite() {
        return Err(Error::Numerical("evidence estimate is not finite".into()));
    }
    let mc_se = ordinates.iter().map(|o| o.mc_se * o.mc_se).sum::<f64>().sqrt();
    Ok((
        EvidenceEstimate {
            model,
            method: EvidenceMethod::ChibJeliazkov,
            log_evidence,
            mc_se,
            theta_star: star,
            dataset_digest: digest,
            ordinates,
            refinements: Vec::new(),
        },
        samples,
    ))
}

fn run_segment<R: Rng + ?Sized>(
    chain: &mut CollapsedChain,
    config: &McmcConfig,
    rng: &mut R,
) -> Result<Vec<(ModelParams, f64)>> {
    let mut out = Vec::with_capacity(config.draw_count());
    for t in 0..config.iterations {
        chain.sweep(rng)?;
        if config.records(t) {
            out.push((*chain.params(), chain.log_likelihood()));
        }
    }
    Ok(out)
}

/// Resolution schedule of the quadrature oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Gauss–Legendre nodes per dimension at the first level.
    pub nodes: usize,
    /// Largest node count tried before giving up.
    pub max_nodes: usize,
    /// Accept when doubling the nodes moves log evidence by less than this.
    pub tolerance: f64,
    /// Poisson truncation tolerance.
    pub epsilon: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            nodes: 24,
            max_nodes: 96,
            tolerance: 0.02,
            epsilon: crate::likelihood::DEFAULT_EPSILON,
        }
    }
}

/// Gauss–Legendre nodes and weights on [0, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp;
        loop {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            dp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / dp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        let weight = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = (1.0 - z) / 2.0;
        x[n - 1 - i] = (1.0 + z) / 2.0;
        w[i] = weight / 2.0;
        w[n - 1 - i] = weight / 2.0;
    }
    (x, w)
}

/// Prior-quantile nodes of one parameter: values and log weights.
struct Axis {
    values: Vec<f64>,
    log_weights: Vec<f64>,
}

impl Axis {
    fn point(value: f64) -> Self {
        Axis {
            values: vec![value],
            log_weights: vec![0.0],
        }
    }

    fn quantiles(n: usize, inverse_cdf: impl Fn(f64) -> f64) -> Self {
        let (u, w) = gauss_legendre(n);
        Axis {
            values: u.iter().map(|&u| inverse_cdf(u)).collect(),
            log_weights: w.iter().map(|w| w.ln()).collect(),
        }
    }
}

/// Streaming weighted mean under log weights.
struct WeightedMean {
    max: f64,
    total: f64,
    sums: [f64; 4],
}

impl WeightedMean {
    fn new() -> Self {
        WeightedMean {
            max: f64::NEG_INFINITY,
            total: 0.0,
            sums: [0.0; 4],
        }
    }

    fn add(&mut self, log_w: f64, theta: [f64; 4]) {
        if log_w == f64::NEG_INFINITY || log_w.is_nan() {
            return;
        }
        if log_w > self.max {
            let r = (self.max - log_w).exp();
            self.total *= r;
            self.sums.iter_mut().for_each(|s| *s *= r);
            self.max = log_w;
        }
        let w = (log_w - self.max).exp();
        self.total += w;
        for (s, t) in self.sums.iter_mut().zip(theta) {
            *s += w * t;
        }
    }

    fn log_total(&self) -> f64 {
        self.max + self.total.ln()
    }

    fn mean(&self) -> [f64; 4] {
        self.sums.map(|s| s / self.total)
    }
}

fn quadrature(
    dataset: &Dataset,
    model: AllocationModel,
    priors: &PriorConfig,
    nodes: usize,
    eps: f64,
) -> Result<(f64, ModelParams)> {
    let mode = dataset.mode();
    let mut engine = LikelihoodEngine::new(dataset, model, eps)?;
    let p_axis = Axis::quantiles(nodes, |u| u);
    let psi_axis = if model.has_dispersion() {
        let norm = Normal::new(0.0, priors.sigma_psi).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Axis::quantiles(nodes, |u| norm.inverse_cdf(u))
    } else {
        Axis::point(0.0)
    };
    let mut acc = WeightedMean::new();

    if mode == DataMode::Primary {
        for (&p, &wp) in p_axis.values.iter().zip(&p_axis.log_weights) {
            for (&psi, &wpsi) in psi_axis.values.iter().zip(&psi_axis.log_weights) {
                let ll = engine.log_likelihood(&ModelParams::new(p, psi, f64::NAN, f64::NAN))?;
                acc.add(wp + wpsi + ll, [p, psi, 0.0, 0.0]);
            }
        }
        let m = acc.mean();
        return Ok((acc.log_total(), ModelParams::new(m[0], m[1], f64::NAN, f64::NAN)));
    }

    let g = priors.lambda.expect("validated");
    let b = priors.mortality.expect("validated");
    let gamma = GammaDist::new(g.shape, g.rate).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let beta = BetaDist::new(b.a, b.b).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let lambda_axis = Axis::quantiles(nodes, |u| gamma.inverse_cdf(u));
    let d_axis = Axis::quantiles(nodes, |u| beta.inverse_cdf(u));

    let pairs = engine.pairs().to_vec();
    let mut upper = 0;
    for &lambda in &lambda_axis.values {
        let bound = poisson_truncation_bound(lambda, eps)?;
        for &(n, _, _) in &pairs {
            upper = upper.max(truncation_limit(n, lambda, bound, eps));
        }
    }
    let po: Vec<Vec<f64>> = lambda_axis
        .values
        .iter()
        .map(|&l| (0..=upper).map(|k| ln_poisson_pmf(k, l).exp()).collect())
        .collect();
    let dpow: Vec<Vec<f64>> = d_axis
        .values
        .iter()
        .map(|&d| (0..=upper as i32).map(|k| d.powi(k)).collect())
        .collect();

    for (&p, &wp) in p_axis.values.iter().zip(&p_axis.log_weights) {
        for (&psi, &wpsi) in psi_axis.values.iter().zip(&psi_axis.log_weights) {
            let tables = engine.kernel_tables(DispersionParams { p, psi }, upper)?;
            let mut shifts = Vec::with_capacity(tables.len());
            let scaled: Vec<Vec<f64>> = tables
                .iter()
                .map(|t| {
                    let max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    shifts.push(max);
                    t.iter().map(|v| (v - max).exp()).collect()
                })
                .collect();
            for (k, (&lambda, &wl)) in lambda_axis.values.iter().zip(&lambda_axis.log_weights).enumerate() {
                for (l, (&d, &wd)) in d_axis.values.iter().zip(&d_axis.log_weights).enumerate() {
                    let ln_s = (-d).ln_1p();
                    let mut ll = 0.0;
                    for (j, &(n, _, count)) in pairs.iter().enumerate() {
                        let a = &scaled[j];
                        let po_k = &po[k][n as usize..];
                        let s: f64 = a
                            .iter()
                            .zip(po_k)
                            .zip(&dpow[l])
                            .map(|((a, p), q)| a * p * q)
                            .sum();
                        ll += count as f64 * (n as f64 * ln_s + shifts[j] + s.ln());
                    }
                    acc.add(wp + wpsi + wl + wd + ll, [p, psi, lambda, d]);
                }
            }
        }
    }
    let m = acc.mean();
    Ok((acc.log_total(), ModelParams::new(m[0], m[1], m[2], m[3])))
}

/// Evidence by tensor Gauss–Legendre quadrature in prior-quantile coordinates,
/// doubling the nodes until the estimate moves by less than the tolerance.
pub fn oracle_evidence(
    dataset: &Dataset,
    model: AllocationModel,
    priors: &PriorConfig,
    grid: &GridSpec,
) -> Result<EvidenceEstimate> {
    priors.validate(dataset.mode())?;
    if grid.nodes < 2 || grid.max_nodes < grid.nodes {
        return Err(Error::InvalidConfig("grid needs 2 ≤ nodes ≤ max_nodes".into()));
    }
    let mut refinements: Vec<Refinement> = Vec::new();
    let mut nodes = grid.nodes;
    let mut last: Option<(f64, ModelParams)> = None;
    while nodes <= grid.max_nodes {
        let (value, star) = quadrature(dataset, model, priors, nodes, grid.epsilon)?;
        if !value.is_finite() {
            return Err(Error::Numerical("quadrature produced a non-finite evidence".into()));
        }
        refinements.push(Refinement {
            nodes,
            log_evidence: value,
        });
        if let Some((prev, _)) = last {
            let change = (value - prev).abs();
            if change < grid.tolerance {
                return Ok(EvidenceEstimate {
                    model,
                    method: EvidenceMethod::QuadratureOracle,
                    log_evidence: value,
                    mc_se: change,
                    theta_star: star,
                    dataset_digest: dataset_digest(dataset),
                    ordinates: Vec::new(),
                    refinements,
                });
            }
        }
        last = Some((value, star));
        nodes *= 2;
    }
    Err(Error::Numerical(format!(
        "quadrature did not converge within {} nodes per dimension: {:?}",
        grid.max_nodes,
        refinements.iter().map(|r| r.log_evidence).collect::<Vec<_>>()
    )))
}

/// Jeffreys' scale for a Bayes factor of at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JeffreysCategory {
    BarelyWorthMentioning,
    Substantial,
    Strong,
    VeryStrong,
    Decisive,
}

impl JeffreysCategory {
    /// Lower bounds of the categories, in order.
    pub const THRESHOLDS: [f64; 5] = [1.0, 3.0, 10.0, 30.0, 100.0];

    /// Category of `max(bf, 1/bf)`.
    pub fn from_bayes_factor(bf: f64) -> Self {
        let b = if bf < 1.0 { 1.0 / bf } else { bf };
        match b {
            b if b >= 100.0 => JeffreysCategory::Decisive,
            b if b >= 30.0 => JeffreysCategory::VeryStrong,
            b if b >= 10.0 => JeffreysCategory::Strong,
            b if b >= 3.0 => JeffreysCategory::Substantial,
            _ => JeffreysCategory::BarelyWorthMentioning,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            JeffreysCategory::BarelyWorthMentioning => "barely worth mentioning",
            JeffreysCategory::Substantial => "substantial",
            JeffreysCategory::Strong => "strong",
            JeffreysCategory::VeryStrong => "very strong",
            JeffreysCategory::Decisive => "decisive",
        }
    }
}

impl fmt::Display for JeffreysCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// B = π(D | numerator) / π(D | denominator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesFactor {
    pub numerator: AllocationModel,
    pub denominator: AllocationModel,
    pub log_bayes_factor: f64,
    pub bayes_factor: f64,
    pub mc_se: f64,
    /// Model the evidence points to.
    pub favours: AllocationModel,
    pub category: JeffreysCategory,
}

pub fn bayes_factor(numerator: &EvidenceEstimate, denominator: &EvidenceEstimate) -> Result<BayesFactor> {
    if numerator.dataset_digest != denominator.dataset_digest {
        return Err(Error::InvalidConfig("evidence estimates come from different datasets".into()));
    }
    let log_bf = numerator.log_evidence - denominator.log_evidence;
    let bf = log_bf.exp();
    Ok(BayesFactor {
        numerator: numerator.model,
        denominator: denominator.model,
        log_bayes_factor: log_bf,
        bayes_factor: bf,
        mc_se: numerator.mc_se.hypot(denominator.mc_se),
        favours: if log_bf >= 0.0 {
            numerator.model
        } else {
            denominator.model
        },
        category: JeffreysCategory::from_bayes_factor(bf),
    })
}

/// P(Mⱼ | D) = wⱼ eⱼ / Σ wᵢ eᵢ, computed from log evidences.
pub fn model_posterior_probabilities(log_evidences: &[f64], prior_weights: &[f64]) -> Result<Vec<f64>> {
    if log_evidences.len() < 2 {
        return Err(Error::InvalidConfig("model probabilities need at least two models".into()));
    }
    if prior_weights.len() != log_evidences.len() {
        return Err(Error::InvalidConfig("one prior weight per model is required".into()));
    }
    if prior_weights.iter().any(|&w| w.is_nan() || w < 0.0) || (prior_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig("prior model weights must be non-negative and sum to 1".into()));
    }
    let logs: Vec<f64> = log_evidences
        .iter()
        .zip(prior_weights)
        .map(|(e, w)| e + w.ln())
        .collect();
    let mut acc = LogSum::new();
    logs.iter().for_each(|&x| acc.add(x));
    let z = acc.value();
    if !z.is_finite() {
        return Err(Error::Numerical("all weighted evidences are zero".into()));
    }
    Ok(logs.iter().map(|x| (x - z).exp()).collect())
}

/// Pairwise Bayes factors and model probabilities for a set of fitted models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesFactorReport {
    /// Every ordered pair listed once, alternative against simpler model.
    pub factors: Vec<BayesFactor>,
    pub prior_weights: Vec<(AllocationModel, f64)>,
    pub posterior_probabilities: Vec<(AllocationModel, f64)>,
}

/// Equal prior weights unless `weights` is given.
pub fn bayes_factor_report(evidences: &[EvidenceEstimate], weights: Option<&[f64]>) -> Result<BayesFactorReport> {
    let mut sorted: Vec<&EvidenceEstimate> = evidences.iter().collect();
    sorted.sort_by_key(|e| e.model as u8);
    let mut factors = Vec::new();
    for i in 0..sorted.len() {
        for j in (i + 1)..sorted.len() {
            factors.push(bayes_factor(sorted[j], sorted[i])?);
        }
    }
    let equal = vec![1.0 / sorted.len().max(1) as f64; sorted.len()];
    let w = weights.unwrap_or(&equal);
    let probabilities = if sorted.len() >= 2 {
        model_posterior_probabilities(&sorted.iter().map(|e| e.log_evidence).collect::<Vec<_>>(), w)?
    } else {
        vec![1.0; sorted.len()]
    };
    Ok(BayesFactorReport {
        factors,
        prior_weights: sorted.iter().zip(w).map(|(e, &w)| (e.model, w)).collect(),
        posterior_probabilities: sorted.iter().zip(probabilities).map(|(e, p)| (e.model, p)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::{BetaPrior, GammaPrior};

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(7);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        // Exact up to degree 13.
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(13)).sum();
        assert!((integral - 1.0 / 14.0).abs() < 1e-14);
        let (x, _) = gauss_legendre(8);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn jeffreys_boundaries() {
        use JeffreysCategory::*;
        assert_eq!(JeffreysCategory::from_bayes_factor(1.0), BarelyWorthMentioning);
        assert_eq!(JeffreysCategory::from_bayes_factor(2.999), BarelyWorthMentioning);
        assert_eq!(JeffreysCategory::from_bayes_factor(3.0), Substantial);
        assert_eq!(JeffreysCategory::from_bayes_factor(6.8), Substantial);
        assert_eq!(JeffreysCategory::from_bayes_factor(10.0), Strong);
        assert_eq!(JeffreysCategory::from_bayes_factor(30.0), VeryStrong);
        assert_eq!(JeffreysCategory::from_bayes_factor(100.0), Decisive);
        assert_eq!(JeffreysCategory::from_bayes_factor(213.6), Decisive);
        assert_eq!(JeffreysCategory::from_bayes_factor(1.0 / 40.0), VeryStrong);
    }

    fn estimate(model: AllocationModel, log_evidence: f64) -> EvidenceEstimate {
        EvidenceEstimate {
            model,
            method: EvidenceMethod::ChibJeliazkov,
            log_evidence,
            mc_se: 0.0,
            theta_star: ModelParams::new(0.5, 0.0, 1.0, 0.1),
            dataset_digest: "x".into(),
            ordinates: vec![],
            refinements: vec![],
        }
    }

    #[test]
    fn bayes_factor_orientation() {
        let b = estimate(AllocationModel::Binomial, -10.0);
        let d = estimate(AllocationModel::DoubleBinomial, -10.0 + 213.6f64.ln());
        let bf = bayes_factor(&d, &b).unwrap();
        assert!((bf.bayes_factor - 213.6).abs() < 1e-9);
        assert_eq!(bf.category, JeffreysCategory::Decisive);
        assert_eq!(bf.favours, AllocationModel::DoubleBinomial);
        let back = bayes_factor(&b, &d).unwrap();
        assert_eq!(back.favours, AllocationModel::DoubleBinomial);
        assert_eq!(back.category, JeffreysCategory::Decisive);
        let same = bayes_factor(&b, &b).unwrap();
        assert_eq!(same.bayes_factor, 1.0);
        assert_eq!(same.category, JeffreysCategory::BarelyWorthMentioning);
        let mut other = b.clone();
        other.dataset_digest = "y".into();
        assert!(bayes_factor(&d, &other).is_err());
    }

    #[test]
    fn model_probabilities() {
        let p = model_posterior_probabilities(&[1.0, 1.0], &[0.5, 0.5]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let logs = [213.6f64.ln(), 0.0, 31.3f64.ln()];
        let w = [1.0 / 3.0; 3];
        let p = model_posterior_probabilities(&logs, &w).unwrap();
        assert!((p[0] - 0.869).abs() < 5e-4 && (p[1] - 0.004).abs() < 5e-4 && (p[2] - 0.127).abs() < 5e-4);
        let shifted: Vec<f64> = logs.iter().map(|x| x - 5000.0).collect();
        let q = model_posterior_probabilities(&shifted, &w).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(model_posterior_probabilities(&[0.0], &[1.0]).is_err());
        assert!(model_posterior_probabilities(&[0.0, 0.0], &[0.7, 0.7]).is_err());
    }

    #[test]
    fn report_is_transitive() {
        let es = [
            estimate(AllocationModel::DoubleBinomial, -20.0),
            estimate(AllocationModel::Binomial, -25.3),
            estimate(AllocationModel::MultiplicativeBinomial, -21.7),
        ];
        let r = bayes_factor_report(&es, None).unwrap();
        let get = |a, b| {
            r.factors
                .iter()
                .find(|f| f.numerator == a && f.denominator == b)
                .unwrap()
                .log_bayes_factor
        };
        use AllocationModel::*;
        let direct = get(DoubleBinomial, Binomial);
        let chained = get(DoubleBinomial, MultiplicativeBinomial) + get(MultiplicativeBinomial, Binomial);
        assert!((direct - chained).abs() < 1e-12);
        let total: f64 = r.posterior_probabilities.iter().map(|x| x.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_matches_closed_form_binomial_evidence() {
        let d = Dataset::primary(&[(10, 3), (8, 1), (12, 4), (5, 2), (9, 2)]).unwrap();
        let exact = binomial_primary_log_evidence(&d).unwrap();
        let grid = GridSpec {
            nodes: 64,
            max_nodes: 256,
            tolerance: 1e-7,
            ..Default::default()
        };
        let q = oracle_evidence(&d, AllocationModel::Binomial, &PriorConfig::primary(1.0), &grid).unwrap();
        assert!((q.log_evidence - exact).abs() < 1e-6, "{} vs {exact}", q.log_evidence);
        let steps: Vec<f64> = q.refinements.windows(2).map(|w| (w[1].log_evidence - w[0].log_evidence).abs()).collect();
        assert!(steps.windows(2).all(|s| s[1] <= s[0]));
    }

    #[test]
    fn empty_dataset_has_zero_log_evidence() {
        let pr = PriorConfig::secondary(1.0, GammaPrior { shape: 10.0, rate: 1.0 }, BetaPrior { a: 3.0, b: 7.0 });
        let d = Dataset::secondary(&[]).unwrap();
        for model in AllocationModel::ALL {
            let q = oracle_evidence(&d, model, &pr, &GridSpec { nodes: 8, ..Default::default() }).unwrap();
            assert!(q.log_evidence.abs() < 1e-12);
            let c = chib_evidence(&d, model, &pr, &McmcConfig::with_iterations(500, 3)).unwrap();
            assert_eq!(c.log_evidence, 0.0);
        }
    }

    #[test]
    fn chib_is_exact_for_binomial_primary_data() {
        let d = Dataset::primary(&[(10, 3), (8, 1), (12, 4), (5, 2), (9, 2)]).unwrap();
        let exact = binomial_primary_log_evidence(&d).unwrap();
        let c = chib_evidence(&d, AllocationModel::Binomial, &PriorConfig::primary(1.0), &McmcConfig::with_iterations(2_000, 1))
            .unwrap();
        assert!((c.log_evidence - exact).abs() < 1e-10);
    }

    #[test]
    fn chib_matches_quadrature_on_small_primary_data() {
        let d = Dataset::primary(&[(10, 3), (8, 2), (12, 4), (5, 2), (9, 2), (7, 2)]).unwrap();
        let pr = PriorConfig::primary(1.0);
        for model in [AllocationModel::MultiplicativeBinomial, AllocationModel::DoubleBinomial] {
            let q = oracle_evidence(&d, model, &pr, &GridSpec::default()).unwrap();
            let config = McmcConfig {
                iterations: 30_000,
                burn_in: 3_000,
                thin: 2,
                seed: 5,
                ..Default::default()
            };
            let c = chib_evidence(&d, model, &pr, &config).unwrap();
            assert!((c.log_evidence - q.log_evidence).abs() < 0.05, "{model}: {} vs {}", c.log_evidence, q.log_evidence);
            assert!(c.mc_se < 0.05);
        }
    }

    #[test]
    fn chib_matches_quadrature_on_small_secondary_data() {
        let d = Dataset::secondary(&[(8, 2), (6, 1), (9, 3), (7, 2), (5, 1), (8, 1), (6, 2), (7, 1)]).unwrap();
        let pr = PriorConfig::secondary(1.0, GammaPrior { shape: 10.0, rate: 1.0 }, BetaPrior { a: 3.0, b: 7.0 });
        for model in AllocationModel::ALL {
            let grid = GridSpec {
                nodes: 12,
                max_nodes: 48,
                tolerance: 0.01,
                ..Default::default()
            };
            let q = oracle_evidence(&d, model, &pr, &grid).unwrap();
            let config = McmcConfig {
                iterations: 20_000,
                burn_in: 2_000,
                thin: 2,
                seed: 11,
                ..Default::default()
            };
            let c = chib_evidence(&d, model, &pr, &config).unwrap();
            assert!((c.log_evidence - q.log_evidence).abs() < 0.1, "{model}: {} vs {}", c.log_evidence, q.log_evidence);
        }
    }
}
