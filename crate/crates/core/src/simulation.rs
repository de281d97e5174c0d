//! Synthetic data and the power and calibration studies built on it.
//!
//! Every replicate draws from its own ChaCha8 stream keyed by
//! `(master seed, cell, replicate)`, so results do not depend on how rayon
//! schedules the work. Degenerate replicates (a test statistic that cannot be
//! computed, a sampler that cannot start) are kept and counted, never redrawn.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::{dispersion_ratio, james_test, mccullagh_dispersion, meelis_test, Tail, TestKind};
use crate::data::{Clutch, DataMode, Dataset};
use crate::distributions::{allocation_pmf, inverse_cdf, sample_mortality, AllocationModel, DispersionParams};
use crate::error::{Error, Result};
use crate::evidence::{chib_evidence, chib_evidence_with_samples, model_posterior_probabilities};
use crate::likelihood::{BetaPrior, GammaPrior, PriorConfig};
use crate::mcmc::{summarize_posterior, McmcConfig};
use crate::rng::{derive_stream, stream_rng};

/// Parameters of the clutch generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub clutches: usize,
    pub lambda: f64,
    pub model: AllocationModel,
    pub p: f64,
    pub psi: f64,
    pub d: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    /// Under-dispersed wasp-like generator used for the power surfaces.
    pub fn power_base() -> Self {
        GeneratorSpec {
            clutches: 50,
            lambda: 10.0,
            model: AllocationModel::MultiplicativeBinomial,
            p: 0.00278,
            psi: 0.445,
            d: 0.10,
            seed: 1,
        }
    }

    /// Moderate under-dispersion and 30% mortality, as in the Bayes-versus-Meelis study.
    pub fn study_base() -> Self {
        GeneratorSpec {
            clutches: 50,
            lambda: 10.0,
            model: AllocationModel::MultiplicativeBinomial,
            p: 0.1,
            psi: 0.3,
            d: 0.30,
            seed: 1,
        }
    }

    /// [`Self::study_base`] with binomial allocation.
    pub fn study_null() -> Self {
        GeneratorSpec {
            model: AllocationModel::Binomial,
            psi: 0.0,
            ..Self::study_base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clutches == 0 {
            return Err(Error::InvalidConfig("generator needs at least one clutch".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("lambda", self.lambda, "must be positive and finite"));
        }
        if !(0.0..=1.0).contains(&self.d) {
            return Err(Error::param("d", self.d, "mortality must lie in [0, 1]"));
        }
        self.dispersion()?;
        Ok(())
    }

    fn dispersion(&self) -> Result<DispersionParams> {
        let psi = if self.model.has_dispersion() { self.psi } else { 0.0 };
        DispersionParams::new(self.p, psi)
    }
}

/// A synthetic dataset together with the hidden pre-mortality truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulatedData {
    /// (Nᵢ, Mᵢ) with deaths Nᵢ − nᵢ.
    pub primary: Dataset,
    /// (nᵢ, mᵢ) with deaths Nᵢ − nᵢ.
    pub secondary: Dataset,
}

impl SimulatedData {
    pub fn view(&self, mode: DataMode) -> &Dataset {
        match mode {
            DataMode::Primary => &self.primary,
            DataMode::Secondary => &self.secondary,
        }
    }
}

/// Allocation CDF rows cached for the clutch sizes a generator will see.
struct Generator {
    spec: GeneratorSpec,
    poisson: Poisson<f64>,
    params: DispersionParams,
    pmfs: Vec<Vec<f64>>,
}

impl Generator {
    fn new(spec: &GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let params = spec.dispersion()?;
        let cached = (spec.lambda + 12.0 * spec.lambda.sqrt() + 12.0).min(2000.0) as u32;
        let pmfs = (0..=cached)
            .map(|n| allocation_pmf(spec.model, n, params))
            .collect::<Result<_>>()?;
        Ok(Generator {
            spec: *spec,
            poisson: Poisson::new(spec.lambda).map_err(|_| Error::param("lambda", spec.lambda, "must be positive and finite"))?,
            params,
            pmfs,
        })
    }

    fn draw<R: Rng + ?Sized>(&self, clutches: usize, d: f64, rng: &mut R) -> Result<SimulatedData> {
        let mut primary = Vec::with_capacity(clutches);
        let mut secondary = Vec::with_capacity(clutches);
        for _ in 0..clutches {
            let eggs = self.poisson.sample(rng) as u32;
            let male_eggs = match self.pmfs.get(eggs as usize) {
                Some(pmf) => inverse_cdf(pmf, rng.gen()),
                None => inverse_cdf(&allocation_pmf(self.spec.model, eggs, self.params)?, rng.gen()),
            };
            let (n, m) = sample_mortality(eggs, male_eggs, d, rng)?;
            primary.push(Clutch::with_deaths(eggs, male_eggs, eggs - n));
            secondary.push(Clutch::with_deaths(n, m, eggs - n));
        }
        Ok(SimulatedData {
            primary: Dataset::new(DataMode::Primary, primary)?,
            secondary: Dataset::new(DataMode::Secondary, secondary)?,
        })
    }
}

/// Nᵢ ~ Poisson(λ), Mᵢ from the allocation model, then each egg dies with probability d.
pub fn simulate_dataset(spec: &GeneratorSpec) -> Result<SimulatedData> {
    let mut rng = stream_rng(spec.seed, &[]);
    Generator::new(spec)?.draw(spec.clutches, spec.d, &mut rng)
}

/// Replicate `rep` of grid cell `cell`.
pub fn simulate_replicate(spec: &GeneratorSpec, cell: u64, rep: u64) -> Result<SimulatedData> {
    let mut rng = stream_rng(spec.seed, &[cell, rep]);
    Generator::new(spec)?.draw(spec.clutches, spec.d, &mut rng)
}

/// Grid and test settings of a classical power surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerConfig {
    pub clutch_counts: Vec<usize>,
    pub mortality: Vec<f64>,
    pub reps: usize,
    pub test: TestKind,
    pub alpha: f64,
    pub tail: Tail,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig {
            clutch_counts: vec![10, 25, 50, 100, 200, 400],
            mortality: (0..=12).map(|i| i as f64 * 0.05).collect(),
            reps: 10_000,
            test: TestKind::Meelis,
            alpha: 0.05,
            tail: Tail::TwoSided,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerCell {
    pub clutches: usize,
    pub d: f64,
    pub reps: usize,
    pub rejections: usize,
    /// Replicates where the statistic could not be computed; counted as non-rejections.
    pub indeterminate: usize,
    pub power: f64,
    pub se: f64,
    /// Mean of R over replicates where it is defined.
    pub mean_r: Option<f64>,
    /// Mean of McCullagh's s² over replicates where it is defined.
    pub mean_s2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerSurface {
    pub statistic: TestKind,
    pub tail: Tail,
    pub alpha: f64,
    pub generator: GeneratorSpec,
    /// Row-major over `clutch_counts` × `mortality`.
    pub cells: Vec<PowerCell>,
}

impl PowerSurface {
    pub fn cell(&self, clutches: usize, d: f64) -> Option<&PowerCell> {
        self.cells
            .iter()
            .find(|c| c.clutches == clutches && (c.d - d).abs() < 1e-9)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("C,d,reps,rejections,indeterminate,power,se,mean_R,mean_s2\n");
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        for c in &self.cells {
            out.push_str(&format!(
                "{},{:.4},{},{},{},{:.6},{:.6},{},{}\n",
                c.clutches,
                c.d,
                c.reps,
                c.rejections,
                c.indeterminate,
                c.power,
                c.se,
                opt(c.mean_r),
                opt(c.mean_s2)
            ));
        }
        out
    }
}

fn test_p_value(dataset: &Dataset, test: TestKind, tail: Tail) -> Option<f64> {
    let report = match test {
        TestKind::Meelis => meelis_test(dataset),
        TestKind::James => james_test(dataset),
    };
    report.ok().and_then(|r| r.p_value_for(tail))
}

fn mean_of(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Power of a classical test over a (C, d) grid, using the secondary view of each replicate.
pub fn classical_power_surface(base: &GeneratorSpec, config: &PowerConfig) -> Result<PowerSurface> {
    if config.reps < 1 {
        return Err(Error::InvalidConfig("power surface needs at least one replicate".into()));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::param("alpha", config.alpha, "must lie in (0, 1)"));
    }
    let generator = Generator::new(base)?;
    for &d in &config.mortality {
        GeneratorSpec { d, ..*base }.validate()?;
    }
    let cells: Vec<(usize, f64)> = config
        .clutch_counts
        .iter()
        .flat_map(|&c| config.mortality.iter().map(move |&d| (c, d)))
        .collect();
    if cells.iter().any(|&(c, _)| c == 0) {
        return Err(Error::InvalidConfig("clutch counts must be positive".into()));
    }
    let results: Vec<PowerCell> = cells
        .par_iter()
        .enumerate()
        .map(|(index, &(clutches, d))| -> Result<PowerCell> {
            let outcomes: Vec<(Option<f64>, Option<f64>, Option<f64>)> = (0..config.reps)
                .into_par_iter()
                .map(|rep| -> Result<_> {
                    let mut rng = stream_rng(base.seed, &[index as u64, rep as u64]);
                    let data = generator.draw(clutches, d, &mut rng)?;
                    let ds = &data.secondary;
                    Ok((
                        test_p_value(ds, config.test, config.tail),
                        dispersion_ratio(ds).ok().filter(|r| r.is_finite()),
                        mccullagh_dispersion(ds).ok().filter(|s| s.is_finite()),
                    ))
                })
                .collect::<Result<_>>()?;
            let rejections = outcomes.iter().filter(|o| o.0.is_some_and(|p| p < config.alpha)).count();
            let indeterminate = outcomes.iter().filter(|o| o.0.is_none()).count();
            let power = rejections as f64 / config.reps as f64;
            let rs: Vec<f64> = outcomes.iter().filter_map(|o| o.1).collect();
            let s2: Vec<f64> = outcomes.iter().filter_map(|o| o.2).collect();
            Ok(PowerCell {
                clutches,
                d,
                reps: config.reps,
                rejections,
                indeterminate,
                power,
                se: (power * (1.0 - power) / config.reps as f64).sqrt(),
                mean_r: mean_of(&rs),
                mean_s2: mean_of(&s2),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PowerSurface {
        statistic: config.test,
        tail: config.tail,
        alpha: config.alpha,
        generator: *base,
        cells: results,
    })
}

/// Cells that break monotonicity (power non-decreasing in C, non-increasing in d) by more than `k` SE.
pub fn monotonicity_violations(surface: &PowerSurface, k: f64) -> Vec<(PowerCell, PowerCell)> {
    let mut out = Vec::new();
    for a in &surface.cells {
        for b in &surface.cells {
            let next_c = b.d == a.d && b.clutches > a.clutches;
            let next_d = b.clutches == a.clutches && b.d > a.d;
            let tol = k * a.se.hypot(b.se);
            if next_c && b.power < a.power - tol || next_d && b.power > a.power + tol {
                out.push((*a, *b));
            }
        }
    }
    out
}

/// Settings shared by the Bayesian studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub reps: usize,
    pub generator: GeneratorSpec,
    pub priors: PriorConfig,
    /// Per-model chain settings; the seed is replaced per replicate.
    pub mcmc: McmcConfig,
    /// Tail of the Meelis p-value.
    pub tail: Tail,
}

impl StudyConfig {
    /// λ ~ Gamma(10, 1) and d ~ Beta(3, 7) centre the priors on the generator's λ = 10 and d = 0.3.
    pub fn study_priors() -> PriorConfig {
        PriorConfig::secondary(1.0, GammaPrior { shape: 10.0, rate: 1.0 }, BetaPrior { a: 3.0, b: 7.0 })
    }

    pub fn bayes_vs_meelis(reps: usize, iterations: u64) -> Self {
        StudyConfig {
            reps,
            generator: GeneratorSpec::study_base(),
            priors: Self::study_priors(),
            mcmc: McmcConfig::with_iterations(iterations, 0),
            tail: Tail::TwoSided,
        }
    }

    pub fn type_one(reps: usize, iterations: u64) -> Self {
        StudyConfig {
            generator: GeneratorSpec::study_null(),
            ..Self::bayes_vs_meelis(reps, iterations)
        }
    }

    fn replicate_mcmc(&self, rep: usize) -> McmcConfig {
        McmcConfig {
            seed: derive_stream(&[self.generator.seed, rep as u64, 1]),
            ..self.mcmc.clone()
        }
    }
}

/// One replicate of a Bayesian study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub rep: usize,
    pub meelis_statistic: Option<f64>,
    pub meelis_p: Option<f64>,
    /// log BF(multiplicative : binomial).
    pub log_bf: Option<f64>,
    pub log_bf_se: Option<f64>,
    /// P(binomial | D) with equal prior weight on the two models.
    pub prob_binomial: Option<f64>,
    /// Whether the 95% interval for ψ excludes 0.
    pub psi_excludes_zero: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReplicateOutcome {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

fn analyse_replicate(config: &StudyConfig, rep: usize, with_psi: bool) -> ReplicateOutcome {
    let mut out = ReplicateOutcome {
        rep,
        meelis_statistic: None,
        meelis_p: None,
        log_bf: None,
        log_bf_se: None,
        prob_binomial: None,
        psi_excludes_zero: None,
        error: None,
    };
    let data = match simulate_replicate(&config.generator, 0, rep as u64) {
        Ok(d) => d,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    let ds = &data.secondary;
    if let Ok(r) = meelis_test(ds) {
        out.meelis_statistic = r.statistic;
        out.meelis_p = r.p_value_for(config.tail);
    }
    let mcmc = config.replicate_mcmc(rep);
    let mut fit = || -> Result<()> {
        let null = chib_evidence(ds, AllocationModel::Binomial, &config.priors, &mcmc)?;
        let (alt, samples) =
            chib_evidence_with_samples(ds, AllocationModel::MultiplicativeBinomial, &config.priors, &mcmc)?;
        let log_bf = alt.log_evidence - null.log_evidence;
        out.log_bf = Some(log_bf);
        out.log_bf_se = Some(alt.mc_se.hypot(null.mc_se));
        out.prob_binomial = Some(model_posterior_probabilities(&[null.log_evidence, alt.log_evidence], &[0.5, 0.5])?[0]);
        if with_psi {
            let psi = summarize_posterior(&samples, 0.95)?.psi.expect("multiplicative model has ψ");
            out.psi_excludes_zero = Some(!psi.contains(0.0));
        }
        Ok(())
    };
    if let Err(e) = fit() {
        out.error = Some(e.to_string());
    }
    out
}

/// Percentages of replicates falling in each evidence band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketTable {
    pub labels: Vec<String>,
    pub percent: Vec<f64>,
    /// Replicates in the denominator.
    pub count: usize,
}

impl BucketTable {
    fn from_values(values: &[f64], edges: &[f64], labels: &[&str], descending: bool) -> Self {
        let mut counts = vec![0usize; labels.len()];
        for &v in values {
            let k = edges.iter().filter(|&&e| v >= e).count();
            counts[if descending { labels.len() - 1 - k } else { k }] += 1;
        }
        let n = values.len().max(1) as f64;
        BucketTable {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            percent: counts.iter().map(|&c| 100.0 * c as f64 / n).collect(),
            count: values.len(),
        }
    }
}

/// Meelis p-value bands, weakest evidence first.
pub const MEELIS_BANDS: [&str; 5] = [">0.1", "0.05-0.1", "0.01-0.05", "0.001-0.01", "<0.001"];
/// Bayes factor bands, weakest evidence first.
pub const BF_BANDS: [&str; 5] = ["0-3", "3-10", "10-30", "30-100", ">100"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudySummary {
    pub config: StudyConfig,
    pub replicates: Vec<ReplicateOutcome>,
    pub failures: usize,
    pub meelis_bands: BucketTable,
    pub bf_bands: BucketTable,
    /// Share of replicates with BF < 3 where Meelis also fails at α = 0.05; `None` if there are none.
    pub bayes_failures_also_meelis: Option<f64>,
    /// Replicates with BF > 10 but Meelis p ≥ 0.05.
    pub bayes_only_strong: usize,
}

impl StudySummary {
    fn from_outcomes(config: &StudyConfig, replicates: Vec<ReplicateOutcome>) -> Self {
        let ok: Vec<&ReplicateOutcome> = replicates.iter().filter(|r| !r.failed()).collect();
        let meelis: Vec<f64> = ok.iter().filter_map(|r| r.meelis_p).collect();
        let bfs: Vec<f64> = ok.iter().filter_map(|r| r.log_bf).map(f64::exp).collect();
        let meelis_fails = |r: &ReplicateOutcome| r.meelis_p.is_none_or(|p| p >= 0.05);
        let weak: Vec<&&ReplicateOutcome> = ok
            .iter()
            .filter(|r| r.log_bf.is_some_and(|l| l.exp() < 3.0))
            .collect();
        StudySummary {
            config: config.clone(),
            failures: replicates.len() - ok.len(),
            meelis_bands: BucketTable::from_values(&meelis, &[0.001, 0.01, 0.05, 0.1], &MEELIS_BANDS, true),
            bf_bands: BucketTable::from_values(&bfs, &[3.0, 10.0, 30.0, 100.0], &BF_BANDS, false),
            bayes_failures_also_meelis: (!weak.is_empty())
                .then(|| weak.iter().filter(|r| meelis_fails(r)).count() as f64 / weak.len() as f64),
            bayes_only_strong: ok
                .iter()
                .filter(|r| r.log_bf.is_some_and(|l| l.exp() > 10.0) && meelis_fails(r))
                .count(),
            replicates,
        }
    }

    /// Per-replicate scatter data: rep, Meelis p, log BF.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rep,meelis_U,meelis_p,log_bf,log_bf_se,prob_binomial,psi_excludes_zero,error\n");
        let f = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.replicates {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.rep,
                f(r.meelis_statistic),
                f(r.meelis_p),
                f(r.log_bf),
                f(r.log_bf_se),
                f(r.prob_binomial),
                r.psi_excludes_zero.map(|b| b.to_string()).unwrap_or_default(),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            ));
        }
        out
    }
}

fn run_replicates(config: &StudyConfig, with_psi: bool) -> Result<Vec<ReplicateOutcome>> {
    config.generator.validate()?;
    config.priors.validate(DataMode::Secondary)?;
    config.mcmc.validate()?;
    Ok((0..config.reps)
        .into_par_iter()
        .map(|rep| analyse_replicate(config, rep, with_psi))
        .collect())
}

/// Meelis test and BF(multiplicative : binomial) on each replicate.
pub fn bayes_vs_meelis_study(config: &StudyConfig) -> Result<StudySummary> {
    if config.reps < 1 {
        return Err(Error::InvalidConfig("study needs at least one replicate".into()));
    }
    let replicates = run_replicates(config, false)?;
    Ok(StudySummary::from_outcomes(config, replicates))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeOneSummary {
    pub study: StudySummary,
    /// Share of replicates with Meelis p < 0.05.
    pub meelis_rejection_rate: f64,
    /// Share of replicates with P(binomial | D) ≤ 0.05.
    pub bayes_rejection_rate: f64,
    /// Share of replicates whose 95% ψ interval excludes 0.
    pub psi_exclusion_rate: f64,
}

/// False-alarm rates of both procedures on binomially generated data.
pub fn type1_error_study(config: &StudyConfig) -> Result<TypeOneSummary> {
    if config.generator.model != AllocationModel::Binomial {
        return Err(Error::InvalidConfig("type-I study needs a binomial generator".into()));
    }
    if config.reps < 1 {
        return Err(Error::InvalidConfig("study needs at least one replicate".into()));
    }
    let replicates = run_replicates(config, true)?;
    let n = config.reps as f64;
    let rate = |f: &dyn Fn(&ReplicateOutcome) -> bool| replicates.iter().filter(|r| f(r)).count() as f64 / n;
    let meelis_rejection_rate = rate(&|r| r.meelis_p.is_some_and(|p| p < 0.05));
    let bayes_rejection_rate = rate(&|r| r.prob_binomial.is_some_and(|p| p <= 0.05));
    let psi_exclusion_rate = rate(&|r| r.psi_excludes_zero == Some(true));
    Ok(TypeOneSummary {
        study: StudySummary::from_outcomes(config, replicates),
        meelis_rejection_rate,
        bayes_rejection_rate,
        psi_exclusion_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_mortality_secondary_equals_primary() {
        let spec = GeneratorSpec { d: 0.0, ..GeneratorSpec::study_base() };
        let data = simulate_dataset(&spec).unwrap();
        let strip = |d: &Dataset| d.clutches().iter().map(|c| (c.size, c.males)).collect::<Vec<_>>();
        assert_eq!(strip(&data.primary), strip(&data.secondary));
        assert_eq!(data.primary.len(), 50);
    }

    #[test]
    fn records_are_consistent_with_hidden_truth() {
        let data = simulate_replicate(&GeneratorSpec::study_base(), 3, 9).unwrap();
        for (p, s) in data.primary.clutches().iter().zip(data.secondary.clutches()) {
            assert!(s.males <= s.size && s.size <= p.size && s.males <= p.males);
            assert!(p.size - s.size >= p.males - s.males);
            assert_eq!(s.deaths, Some(p.size - s.size));
        }
    }

    #[test]
    fn generator_moments() {
        let spec = GeneratorSpec {
            clutches: 10_000,
            lambda: 10.0,
            model: AllocationModel::Binomial,
            p: 0.3,
            psi: 0.0,
            d: 0.2,
            seed: 42,
        };
        let ds = simulate_dataset(&spec).unwrap().secondary;
        let ns: Vec<f64> = ds.clutches().iter().map(|c| c.size as f64).collect();
        let mean = ns.iter().sum::<f64>() / ns.len() as f64;
        let sd = (ns.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / ns.len() as f64).sqrt();
        assert!((mean - 8.0).abs() < 3.0 * sd / 100.0, "{mean}");
        let ratio = ds.pooled_sex_ratio().unwrap();
        let se = (0.3f64 * 0.7 / ds.total_offspring() as f64).sqrt();
        assert!((ratio - 0.3).abs() < 3.0 * se, "{ratio}");
    }

    #[test]
    fn replicates_are_deterministic() {
        let spec = GeneratorSpec::study_base();
        assert_eq!(simulate_replicate(&spec, 1, 2).unwrap(), simulate_replicate(&spec, 1, 2).unwrap());
        assert_ne!(simulate_replicate(&spec, 1, 2).unwrap(), simulate_replicate(&spec, 1, 3).unwrap());
        assert_eq!(simulate_dataset(&spec).unwrap(), simulate_dataset(&spec).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = GeneratorSpec::study_base();
        assert!(simulate_dataset(&GeneratorSpec { clutches: 0, ..base }).is_err());
        assert!(simulate_dataset(&GeneratorSpec { d: 1.5, ..base }).is_err());
        assert!(simulate_dataset(&GeneratorSpec { p: 1.2, ..base }).is_err());
        assert!(simulate_dataset(&GeneratorSpec { lambda: 0.0, ..base }).is_err());
    }

    #[test]
    fn null_surface_is_calibrated() {
        let base = GeneratorSpec {
            model: AllocationModel::Binomial,
            p: 0.4,
            psi: 0.0,
            ..GeneratorSpec::power_base()
        };
        let config = PowerConfig {
            clutch_counts: vec![100],
            mortality: vec![0.0, 0.3],
            reps: 2000,
            ..Default::default()
        };
        let s = classical_power_surface(&base, &config).unwrap();
        for c in &s.cells {
            assert!((c.power - 0.05).abs() < 3.0 * (0.05f64 * 0.95 / 2000.0).sqrt(), "{c:?}");
            assert!((c.mean_r.unwrap() - 1.0).abs() < 0.05);
        }
        assert!(s.to_csv().lines().count() == 3);
    }

    #[test]
    fn surface_is_reproducible_and_ordered() {
        let config = PowerConfig {
            clutch_counts: vec![10, 50],
            mortality: vec![0.0, 0.5],
            reps: 200,
            ..Default::default()
        };
        let a = classical_power_surface(&GeneratorSpec::power_base(), &config).unwrap();
        let b = classical_power_surface(&GeneratorSpec::power_base(), &config).unwrap();
        assert_eq!(a, b);
        let order: Vec<(usize, f64)> = a.cells.iter().map(|c| (c.clutches, c.d)).collect();
        assert_eq!(order, vec![(10, 0.0), (10, 0.5), (50, 0.0), (50, 0.5)]);
        assert!(monotonicity_violations(&a, 2.0).is_empty());
    }

    #[test]
    fn buckets_sum_to_one_hundred() {
        let t = BucketTable::from_values(&[0.2, 0.07, 0.03, 0.005, 0.0001, 0.5], &[0.001, 0.01, 0.05, 0.1], &MEELIS_BANDS, true);
        assert!((t.percent.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        assert!((t.percent[0] - 200.0 / 6.0).abs() < 1e-9);
        assert!((t.percent[4] - 100.0 / 6.0).abs() < 1e-9);
        let b = BucketTable::from_values(&[0.5, 3.0, 150.0], &[3.0, 10.0, 30.0, 100.0], &BF_BANDS, false);
        assert_eq!(b.percent[0], 100.0 / 3.0);
        assert_eq!(b.percent[1], 100.0 / 3.0);
        assert_eq!(b.percent[4], 100.0 / 3.0);
    }

    #[test]
    fn small_study_runs_and_records_each_replicate() {
        let mut config = StudyConfig::bayes_vs_meelis(3, 2_000);
        config.generator.clutches = 15;
        let s = bayes_vs_meelis_study(&config).unwrap();
        assert_eq!(s.replicates.len(), 3);
        assert_eq!(s.failures, 0, "{:?}", s.replicates);
        assert_eq!(s.to_csv().lines().count(), 4);
        let again = bayes_vs_meelis_study(&config).unwrap();
        assert_eq!(s.replicates, again.replicates);
        let t = type1_error_study(&StudyConfig {
            generator: GeneratorSpec { clutches: 15, ..GeneratorSpec::study_null() },
            ..config
        })
        .unwrap();
        assert!(t.study.replicates.iter().all(|r| r.psi_excludes_zero.is_some()));
    }
}
