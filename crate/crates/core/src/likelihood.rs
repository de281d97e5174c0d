//! Observed-data likelihoods, priors and the complete-data posterior.
//!
//! For secondary data a clutch contributes
//!
//! ```text
//! P(n, m) = Σ_N Po(N; λ) (1−d)^n d^(N−n) A(n, m, N)
//! A(n, m, N) = Σ_M P(M | N, p, ψ) C(M, m) C(N−M, n−m)
//! ```
//!
//! which is `Po · P(M|N) · Bin(n; N, 1−d) · P(m | N, M, n)` summed over the
//! unobserved `(N, M)`. The sum over `N` is truncated where the Poisson tail
//! drops below ε. `A` depends on `(p, ψ)` only, so it is cached and reused
//! while `λ` and `d` move.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::data::{DataMode, Dataset};
use crate::distributions::{
    ln_survivor_pmf_unchecked, log_tilt, poisson_truncation_bound, AllocationModel, AllocationTable,
    ClutchCounts, DispersionParams,
};
use crate::error::{Error, Result};
use crate::special::{ln_binomial_pmf, ln_choose, ln_poisson_pmf, LogSum};

/// Default Poisson truncation tolerance.
pub const DEFAULT_EPSILON: f64 = 1e-10;

/// θ = (p, ψ, λ, d).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub p: f64,
    pub psi: f64,
    /// Mean clutch size at laying; NaN (and omitted from JSON) for primary data.
    #[serde(default = "nan", skip_serializing_if = "is_nan")]
    pub lambda: f64,
    /// Per-egg developmental mortality; NaN for primary data.
    #[serde(default = "nan", skip_serializing_if = "is_nan")]
    pub d: f64,
}

fn nan() -> f64 {
    f64::NAN
}

fn is_nan(x: &f64) -> bool {
    x.is_nan()
}

impl ModelParams {
    pub fn new(p: f64, psi: f64, lambda: f64, d: f64) -> Self {
        ModelParams { p, psi, lambda, d }
    }

    pub fn dispersion(&self) -> DispersionParams {
        DispersionParams {
            p: self.p,
            psi: self.psi,
        }
    }

    pub fn validate(&self, mode: DataMode) -> Result<()> {
        self.dispersion().validate()?;
        if mode == DataMode::Secondary {
            if !(self.lambda > 0.0 && self.lambda.is_finite()) {
                return Err(Error::param("lambda", self.lambda, "must be positive"));
            }
            if !(0.0..1.0).contains(&self.d) {
                return Err(Error::param("d", self.d, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Gamma prior in shape–rate form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * x.ln() - self.rate * x
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub a: f64,
    pub b: f64,
}

impl BetaPrior {
    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return f64::NEG_INFINITY;
        }
        crate::special::xlogy(self.a - 1.0, x) + crate::special::xlogy(self.b - 1.0, 1.0 - x)
            - ln_beta(self.a, self.b)
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

/// p ~ U(0,1), ψ ~ N(0, σ²), λ ~ Gamma(a, b), d ~ Beta(a′, b′).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub sigma_psi: f64,
    /// Required for secondary data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<GammaPrior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mortality: Option<BetaPrior>,
}

impl PriorConfig {
    pub fn primary(sigma_psi: f64) -> Self {
        PriorConfig {
            sigma_psi,
            lambda: None,
            mortality: None,
        }
    }

    pub fn secondary(sigma_psi: f64, lambda: GammaPrior, mortality: BetaPrior) -> Self {
        PriorConfig {
            sigma_psi,
            lambda: Some(lambda),
            mortality: Some(mortality),
        }
    }

    pub fn validate(&self, mode: DataMode) -> Result<()> {
        let positive = |name, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, v, "prior hyperparameters must be positive"))
            }
        };
        positive("sigma_psi", self.sigma_psi)?;
        if mode == DataMode::Secondary {
            let g = self
                .lambda
                .ok_or_else(|| Error::InvalidConfig("secondary data needs a clutch-size (lambda) prior".into()))?;
            let b = self
                .mortality
                .ok_or_else(|| Error::InvalidConfig("secondary data needs a mortality (d) prior".into()))?;
            positive("lambda_prior.shape", g.shape)?;
            positive("lambda_prior.rate", g.rate)?;
            positive("d_prior.a", b.a)?;
            positive("d_prior.b", b.b)?;
        }
        Ok(())
    }

    pub fn ln_psi(&self, psi: f64) -> f64 {
        let s = self.sigma_psi;
        -0.5 * (2.0 * std::f64::consts::PI * s * s).ln() - psi * psi / (2.0 * s * s)
    }

    /// Joint log prior density of the parameters active for `(model, mode)`.
    pub fn ln_density(&self, params: &ModelParams, model: AllocationModel, mode: DataMode) -> f64 {
        if !(params.p > 0.0 && params.p < 1.0) {
            return f64::NEG_INFINITY;
        }
        let mut lp = 0.0;
        if model.has_dispersion() {
            lp += self.ln_psi(params.psi);
        }
        if mode == DataMode::Secondary {
            lp += self.lambda.map_or(f64::NEG_INFINITY, |g| g.ln_pdf(params.lambda));
            lp += self.mortality.map_or(f64::NEG_INFINITY, |b| b.ln_pdf(params.d));
        }
        lp
    }
}

/// Unobserved primary counts (Nᵢ, Mᵢ), one per clutch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentState {
    pub eggs: Vec<u32>,
    pub male_eggs: Vec<u32>,
}

impl LatentState {
    pub fn len(&self) -> usize {
        self.eggs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eggs.is_empty()
    }

    /// Checks the feasibility inequalities against the observed clutches.
    pub fn check_against(&self, dataset: &Dataset) -> Result<()> {
        if self.eggs.len() != dataset.len() || self.male_eggs.len() != dataset.len() {
            return Err(Error::Infeasible("latent state length differs from dataset".into()));
        }
        for (i, c) in dataset.clutches().iter().enumerate() {
            ClutchCounts::new(self.eggs[i], self.male_eggs[i], c.size, c.males)
                .check_feasible()
                .map_err(|e| Error::Infeasible(format!("clutch {}: {e}", i + 1)))?;
        }
        Ok(())
    }
}

/// Upper clutch size at which the sum over N stops for a clutch with `n` survivors.
pub(crate) fn truncation_limit(n: u32, lambda: f64, bound: u32, eps: f64) -> u32 {
    if n <= bound {
        return bound;
    }
    // Past the Poisson bound the terms decay with ratio λ/(N+1); stop once the
    // remaining geometric tail relative to the N = n term is below ε.
    let mut big = n;
    let mut rel = 1.0_f64;
    loop {
        let r = lambda / (big as f64 + 1.0);
        rel *= r;
        big += 1;
        if r < 1.0 && rel / (1.0 - r) < eps {
            return big;
        }
    }
}

/// Largest `k` for which `C(k, j)` is kept as an `f64` Pascal row.
const PASCAL_LIMIT: u32 = 1000;
const CACHE_SLOTS: usize = 4;

fn pascal_row(k: u32) -> &'static [f64] {
    static ROWS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    let rows = ROWS.get_or_init(|| {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(PASCAL_LIMIT as usize + 1);
        rows.push(vec![1.0]);
        for k in 1..=PASCAL_LIMIT as usize {
            let prev = &rows[k - 1];
            let mut row = Vec::with_capacity(k + 1);
            row.push(1.0);
            for j in 1..k {
                row.push(prev[j - 1] + prev[j]);
            }
            row.push(1.0);
            rows.push(row);
        }
        rows
    });
    &rows[k as usize]
}

/// exp(h(N, M) − h(N, top)) for the binomial and multiplicative kernels, whose
/// consecutive terms have ratio exp(ln(p/q) + ψ(N − 2M − 1)). Two exps per row.
fn geometric_row(big_n: u32, top: usize, ln_odds: f64, psi: f64) -> Option<Vec<f64>> {
    let n = big_n as usize;
    let mut row = vec![0.0; n + 1];
    row[top] = 1.0;
    let step = (-2.0 * psi).exp();
    // ratio(M) = row[M + 1] / row[M].
    let ratio_at_top = (ln_odds + psi * (big_n as f64 - 2.0 * top as f64 - 1.0)).exp();
    let mut r = ratio_at_top;
    for m in top..n {
        row[m + 1] = row[m] * r;
        r *= step;
    }
    let mut r = ratio_at_top / step;
    for m in (0..top).rev() {
        row[m] = row[m + 1] / r;
        r /= step;
    }
    row.iter().all(|v| v.is_finite() && *v <= 1.0 + 1e-9).then_some(row)
}

/// Per-(p, ψ) cache of the survivor kernel for each distinct observed pair.
///
/// Uses C(N,M) C(M,m) C(N−M,n−m) = C(N,n) C(n,m) C(N−n,M−m), so that
/// A(n, m, N) = C(N,n) E(n, m, N) with
/// E = C(n,m) Σ_j C(N−n, j) exp(h(N, m+j)) and h = ln P(M|N) − ln C(N,M).
/// E is the expected survivor probability and lies in [0, 1]; it is kept in
/// linear space. Log A is built only for pairs where E underflows.
#[derive(Debug, Clone)]
struct KernelCache {
    table: AllocationTable,
    /// h(N, M), normalized.
    h: Vec<Vec<f64>>,
    /// exp(h(N, M) − shift[N]).
    scaled: Vec<Vec<f64>>,
    shift: Vec<f64>,
    eshift: Vec<f64>,
    /// `e[j][N - n_j]` for pair j.
    e: Vec<Vec<f64>>,
    /// False once some entry of `e[j]` is not a normal positive number.
    e_ok: Vec<bool>,
    /// `log_a[j][N - n_j]`, filled on demand.
    log_a: Vec<Vec<f64>>,
    last_used: u64,
}

impl KernelCache {
    fn new(model: AllocationModel, disp: DispersionParams, pairs: usize) -> Result<Self> {
        Ok(KernelCache {
            table: AllocationTable::new(model, disp)?,
            h: Vec::new(),
            scaled: Vec::new(),
            shift: Vec::new(),
            eshift: Vec::new(),
            e: vec![Vec::new(); pairs],
            e_ok: vec![true; pairs],
            log_a: vec![Vec::new(); pairs],
            last_used: 0,
        })
    }

    fn matches(&self, disp: DispersionParams) -> bool {
        let cur = self.table.params();
        cur.p.to_bits() == disp.p.to_bits() && cur.psi.to_bits() == disp.psi.to_bits()
    }

    fn ensure_rows(&mut self, upper: u32) {
        let model = self.table.model();
        let disp = self.table.params();
        let ln_p = disp.p.ln();
        let ln_q = (-disp.p).ln_1p();
        let psi = if model.has_dispersion() { disp.psi } else { 0.0 };
        while self.scaled.len() <= upper as usize {
            let big_n = self.scaled.len() as u32;
            let mut h: Vec<f64> = match model {
                AllocationModel::DoubleBinomial => {
                    (0..=big_n).map(|m| log_tilt(model, big_n, m, ln_p, ln_q, psi)).collect()
                }
                _ => {
                    let nf = big_n as f64;
                    (0..=big_n)
                        .map(|m| {
                            let (mf, ff) = (m as f64, (big_n - m) as f64);
                            let males = if m == 0 { 0.0 } else { mf * ln_p };
                            let females = if m == big_n { 0.0 } else { ff * ln_q };
                            males + females + psi * mf * (nf - mf)
                        })
                        .collect()
                }
            };
            let (top, max) = h
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            let scaled = match model {
                AllocationModel::DoubleBinomial => None,
                _ => geometric_row(big_n, top, ln_p - ln_q, psi),
            }
            .unwrap_or_else(|| h.iter().map(|v| (v - max).exp()).collect());
            let log_z = if big_n <= PASCAL_LIMIT {
                let z: f64 = pascal_row(big_n).iter().zip(&scaled).map(|(c, e)| c * e).sum();
                max + z.ln()
            } else {
                let mut acc = LogSum::new();
                h.iter().enumerate().for_each(|(m, v)| acc.add(v + ln_choose(big_n, m as u32)));
                acc.value()
            };
            h.iter_mut().for_each(|v| *v -= log_z);
            self.scaled.push(scaled);
            self.shift.push(max - log_z);
            self.eshift.push((max - log_z).exp());
            self.h.push(h);
        }
    }

    fn log_a_direct(&self, n: u32, m: u32, big_n: u32) -> f64 {
        let h = &self.h[big_n as usize];
        let mut acc = LogSum::new();
        for big_m in m..=(m + big_n - n) {
            acc.add(h[big_m as usize] + ln_choose(big_n, big_m) + ln_choose(big_m, m) + ln_choose(big_n - big_m, n - m));
        }
        acc.value()
    }

    /// Extends `e[pair]` through N = upper.
    fn ensure(&mut self, pair: usize, n: u32, m: u32, upper: u32) {
        let have = self.e[pair].len() as u32;
        if have > upper - n {
            return;
        }
        self.ensure_rows(upper);
        let lead = if n <= PASCAL_LIMIT {
            pascal_row(n)[m as usize]
        } else {
            ln_choose(n, m).exp()
        };
        for big_n in (n + have)..=upper {
            let k = big_n - n;
            let value = if k <= PASCAL_LIMIT {
                let coef = pascal_row(k);
                let e = &self.scaled[big_n as usize][m as usize..=(m + k) as usize];
                let s: f64 = coef.iter().zip(e).map(|(c, x)| c * x).sum();
                lead * s * self.eshift[big_n as usize]
            } else {
                f64::NAN
            };
            if !(value.is_normal() && value > 0.0) {
                self.e_ok[pair] = false;
            }
            self.e[pair].push(value);
        }
    }

    /// Extends `log_a[pair]` through N = upper.
    fn ensure_log(&mut self, pair: usize, n: u32, m: u32, upper: u32) {
        let have = self.log_a[pair].len() as u32;
        if have > upper - n {
            return;
        }
        self.ensure_rows(upper);
        let lead = ln_choose(n, m);
        for big_n in (n + have)..=upper {
            let k = big_n - n;
            let mut value = None;
            if k <= PASCAL_LIMIT {
                let coef = pascal_row(k);
                let e = &self.scaled[big_n as usize][m as usize..=(m + k) as usize];
                let s: f64 = coef.iter().zip(e).map(|(c, x)| c * x).sum();
                if s > 1e-250 && s.is_finite() {
                    value = Some(ln_choose(big_n, n) + lead + self.shift[big_n as usize] + s.ln());
                }
            }
            let v = value.unwrap_or_else(|| self.log_a_direct(n, m, big_n));
            self.log_a[pair].push(v);
        }
    }
}

/// Stateful likelihood evaluator for one dataset and model.
///
/// Keeps allocation work for the few most recent `(p, ψ)` values, so moves in
/// `λ` and `d`, or alternation between two dispersion settings, are cheap.
#[derive(Debug, Clone)]
pub struct LikelihoodEngine {
    model: AllocationModel,
    mode: DataMode,
    eps: f64,
    /// Distinct (size, males) with multiplicity.
    pairs: Vec<(u32, u32, u32)>,
    caches: Vec<KernelCache>,
    tick: u64,
}

impl LikelihoodEngine {
    pub fn new(dataset: &Dataset, model: AllocationModel, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::param("epsilon", eps, "must lie in (0, 1)"));
        }
        let pairs = dataset
            .pair_counts()
            .into_iter()
            .map(|((n, m), c)| (n, m, c))
            .collect();
        Ok(LikelihoodEngine {
            model,
            mode: dataset.mode(),
            eps,
            pairs,
            caches: Vec::new(),
            tick: 0,
        })
    }

    pub fn model(&self) -> AllocationModel {
        self.model
    }

    pub fn mode(&self) -> DataMode {
        self.mode
    }

    pub fn epsilon(&self) -> f64 {
        self.eps
    }

    fn cache_for(&mut self, disp: DispersionParams, pairs: usize) -> Result<&mut KernelCache> {
        self.tick += 1;
        let slot = match self.caches.iter().position(|c| c.matches(disp)) {
            Some(i) => i,
            None => {
                let fresh = KernelCache::new(self.model, disp, pairs)?;
                if self.caches.len() < CACHE_SLOTS {
                    self.caches.push(fresh);
                    self.caches.len() - 1
                } else {
                    let oldest = (0..self.caches.len())
                        .min_by_key(|&i| self.caches[i].last_used)
                        .expect("cache slots are non-empty");
                    self.caches[oldest] = fresh;
                    oldest
                }
            }
        };
        let cache = &mut self.caches[slot];
        cache.last_used = self.tick;
        Ok(cache)
    }

    /// log π(D | θ).
    pub fn log_likelihood(&mut self, params: &ModelParams) -> Result<f64> {
        params.validate(self.mode)?;
        let mut disp = params.dispersion();
        if !self.model.has_dispersion() {
            disp.psi = 0.0;
        }
        let total = match (self.mode, self.model) {
            (DataMode::Primary, _) => self.primary_loglik(disp)?,
            (DataMode::Secondary, AllocationModel::Binomial) => {
                self.binomial_secondary_loglik(disp.p, params.lambda, params.d)
            }
            (DataMode::Secondary, _) => self.secondary_loglik(disp, params.lambda, params.d)?,
        };
        if total.is_nan() {
            return Err(Error::Numerical("likelihood evaluated to NaN".into()));
        }
        Ok(total)
    }

    fn primary_loglik(&mut self, disp: DispersionParams) -> Result<f64> {
        let pairs = std::mem::take(&mut self.pairs);
        let cache = self.cache_for(disp, pairs.len())?;
        let mut total = 0.0;
        for &(n, m, count) in &pairs {
            total += count as f64 * cache.table.log_pmf(n, m);
        }
        self.pairs = pairs;
        Ok(total)
    }

    /// Distinct `(n, m, multiplicity)` pairs of the dataset.
    pub(crate) fn pairs(&self) -> &[(u32, u32, u32)] {
        &self.pairs
    }

    /// log A(n, m, N) for N = n..=max(n, upper), one vector per distinct pair.
    pub(crate) fn kernel_tables(&mut self, disp: DispersionParams, upper: u32) -> Result<Vec<Vec<f64>>> {
        let pairs = std::mem::take(&mut self.pairs);
        let cache = self.cache_for(disp, pairs.len())?;
        let mut out = Vec::with_capacity(pairs.len());
        for (j, &(n, m, _)) in pairs.iter().enumerate() {
            let top = upper.max(n);
            cache.ensure_log(j, n, m, top);
            out.push(cache.log_a[j][..=(top - n) as usize].to_vec());
        }
        self.pairs = pairs;
        Ok(out)
    }

    /// Binomial allocation thinned by binomial survival: n ~ Po(λ(1−d)), m | n ~ Bin(n, p).
    fn binomial_secondary_loglik(&self, p: f64, lambda: f64, d: f64) -> f64 {
        let rate = lambda * (1.0 - d);
        self.pairs
            .iter()
            .map(|&(n, m, count)| count as f64 * (ln_poisson_pmf(n, rate) + ln_binomial_pmf(m, n, p)))
            .sum()
    }

    /// Σ_N Po(N; λ) s^n d^(N−n) A(n, m, N) = Po(n; λs) Σ_t Po(t; λd) E(n, m, n + t)
    /// per pair, with the Po(t; λd) weights shared by all pairs. Pairs whose E
    /// underflows use [`Self::pair_loglik_log`].
    fn secondary_loglik(&mut self, disp: DispersionParams, lambda: f64, d: f64) -> Result<f64> {
        let eps = self.eps;
        let bound = poisson_truncation_bound(lambda, eps)?;
        let ln_s = (-d).ln_1p();
        let ln_d = d.ln();
        let pairs = std::mem::take(&mut self.pairs);
        let uppers: Vec<u32> = pairs
            .iter()
            .map(|&(n, _, _)| truncation_limit(n, lambda, bound, eps))
            .collect();
        let span = pairs
            .iter()
            .zip(&uppers)
            .map(|(&(n, _, _), &u)| u - n)
            .max()
            .unwrap_or(0);
        let cache = self.cache_for(disp, pairs.len())?;

        let rate_d = lambda * d;
        let rate_s = lambda * (1.0 - d);
        let mut weights = Vec::new();
        if rate_d < 700.0 {
            weights.reserve(span as usize + 1);
            let mut w = (-rate_d).exp();
            weights.push(w);
            for t in 1..=span {
                w *= rate_d / t as f64;
                weights.push(w);
            }
        }

        let mut total = 0.0;
        for (j, &(n, m, count)) in pairs.iter().enumerate() {
            let upper = uppers[j];
            let mut value = None;
            if !weights.is_empty() {
                cache.ensure(j, n, m, upper);
                if cache.e_ok[j] {
                    let len = (upper - n + 1) as usize;
                    let s: f64 = weights[..len].iter().zip(&cache.e[j][..len]).map(|(w, e)| w * e).sum();
                    if s > 1e-280 && s.is_finite() {
                        value = Some(ln_poisson_pmf(n, rate_s) + s.ln());
                    }
                }
            }
            let v = match value {
                Some(v) => v,
                None => {
                    cache.ensure_log(j, n, m, upper);
                    let survive = if n == 0 { 0.0 } else { n as f64 * ln_s };
                    Self::pair_loglik_log(&cache.log_a[j], n, upper, lambda, ln_d) + survive
                }
            };
            total += count as f64 * v;
        }
        self.pairs = pairs;
        Ok(total)
    }

    /// log Σ_N Po(N; λ) d^(N−n) A(n, m, N), accumulated in log space.
    fn pair_loglik_log(log_a: &[f64], n: u32, upper: u32, lambda: f64, ln_d: f64) -> f64 {
        let mut acc = LogSum::new();
        for big_n in n..=upper {
            let deaths = big_n - n;
            let death_term = if deaths == 0 { 0.0 } else { deaths as f64 * ln_d };
            acc.add(ln_poisson_pmf(big_n, lambda) + death_term + log_a[(big_n - n) as usize]);
        }
        acc.value()
    }
}

/// log P(n, m | θ) for one secondary clutch, marginalizing the unobserved (N, M).
pub fn clutch_marginal_loglik(
    n: u32,
    m: u32,
    params: &ModelParams,
    model: AllocationModel,
    eps: f64,
) -> Result<f64> {
    let d = Dataset::secondary(&[(n, m)])?;
    LikelihoodEngine::new(&d, model, eps)?.log_likelihood(params)
}

/// log π(D | θ); clutches are exchangeable so this is a sum of clutch terms.
pub fn dataset_loglik(
    dataset: &Dataset,
    params: &ModelParams,
    model: AllocationModel,
    eps: f64,
) -> Result<f64> {
    LikelihoodEngine::new(dataset, model, eps)?.log_likelihood(params)
}

/// log π(θ, N, M | D) up to the evidence: complete-data likelihood plus log prior.
///
/// Infeasible latents give −∞. For primary data the latents must equal the
/// observed counts and only the allocation term enters.
pub fn complete_data_logposterior(
    dataset: &Dataset,
    latents: &LatentState,
    params: &ModelParams,
    model: AllocationModel,
    priors: &PriorConfig,
) -> Result<f64> {
    let mode = dataset.mode();
    params.validate(mode)?;
    let log_prior = priors.ln_density(params, model, mode);
    if latents.len() != dataset.len() {
        return Err(Error::Infeasible("latent state length differs from dataset".into()));
    }
    let mut disp = params.dispersion();
    if !model.has_dispersion() {
        disp.psi = 0.0;
    }
    let mut table = AllocationTable::new(model, disp)?;
    Ok(log_prior + complete_data_loglik_with(&mut table, dataset, latents, params))
}

/// Complete-data log likelihood given a table built for θ's `(p, ψ)`; −∞ when infeasible.
pub(crate) fn complete_data_loglik_with(
    table: &mut AllocationTable,
    dataset: &Dataset,
    latents: &LatentState,
    params: &ModelParams,
) -> f64 {
    let mut total = 0.0;
    for (i, c) in dataset.clutches().iter().enumerate() {
        let (big_n, big_m) = (latents.eggs[i], latents.male_eggs[i]);
        match dataset.mode() {
            DataMode::Primary => {
                if big_n != c.size || big_m != c.males {
                    return f64::NEG_INFINITY;
                }
                total += table.log_pmf(big_n, big_m);
            }
            DataMode::Secondary => {
                let counts = ClutchCounts::new(big_n, big_m, c.size, c.males);
                if !counts.is_feasible() {
                    return f64::NEG_INFINITY;
                }
                total += ln_poisson_pmf(big_n, params.lambda)
                    + table.log_pmf(big_n, big_m)
                    + ln_binomial_pmf(c.size, big_n, 1.0 - params.d)
                    + ln_survivor_pmf_unchecked(counts);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::log_pmf_allocation;

    fn priors() -> PriorConfig {
        PriorConfig::secondary(1.0, GammaPrior { shape: 4.0, rate: 1.0 }, BetaPrior { a: 2.0, b: 5.0 })
    }

    #[test]
    fn no_mortality_collapses_to_single_term() {
        let params = ModelParams::new(0.3, 0.0, 6.0, 0.0);
        let ll = clutch_marginal_loglik(7, 2, &params, AllocationModel::Binomial, 1e-12).unwrap();
        let expected = ln_poisson_pmf(7, 6.0) + ln_binomial_pmf(2, 7, 0.3);
        assert!((ll - expected).abs() < 1e-12);
    }

    /// Enumerates every egg-level death pattern for clutches up to size `cap`.
    fn brute_force_clutch(n: u32, m: u32, params: &ModelParams, model: AllocationModel, cap: u32) -> f64 {
        let mut total = 0.0;
        for big_n in n..=cap {
            let po = ln_poisson_pmf(big_n, params.lambda).exp();
            for big_m in 0..=big_n {
                let alloc = log_pmf_allocation(model, big_n, big_m, params.dispersion()).unwrap().exp();
                // Eggs 0..M are male; enumerate survival subsets as bit masks.
                let mut surv = 0.0;
                for mask in 0u32..(1 << big_n) {
                    let alive = mask.count_ones();
                    let alive_males = (mask & ((1u32 << big_m) - 1)).count_ones();
                    if alive == n && alive_males == m {
                        surv += (1.0 - params.d).powi(alive as i32) * params.d.powi((big_n - alive) as i32);
                    }
                }
                total += po * alloc * surv;
            }
        }
        total
    }

    #[test]
    fn marginal_matches_death_pattern_enumeration() {
        let params = ModelParams::new(0.5, 0.0, 2.0, 0.5);
        let ll = clutch_marginal_loglik(1, 1, &params, AllocationModel::Binomial, 1e-14).unwrap();
        // Poisson(2) mass beyond 20 is ~1e-12 relative; 2^20 subsets stays cheap.
        let bf = brute_force_clutch(1, 1, &params, AllocationModel::Binomial, 20);
        assert!((ll.exp() - bf).abs() < 1e-11, "{} vs {bf}", ll.exp());

        let params = ModelParams::new(0.3, 0.8, 3.0, 0.25);
        for model in [AllocationModel::MultiplicativeBinomial, AllocationModel::DoubleBinomial] {
            let ll = clutch_marginal_loglik(2, 1, &params, model, 1e-14).unwrap();
            let bf = brute_force_clutch(2, 1, &params, model, 20);
            assert!((ll.exp() - bf).abs() < 1e-10, "{model}");
        }
    }

    #[test]
    fn halving_epsilon_is_stable() {
        let params = ModelParams::new(0.2, 0.4, 9.0, 0.3);
        for eps in [1e-4, 1e-6, 1e-8] {
            let a = clutch_marginal_loglik(5, 1, &params, AllocationModel::MultiplicativeBinomial, eps).unwrap();
            let b = clutch_marginal_loglik(5, 1, &params, AllocationModel::MultiplicativeBinomial, eps / 2.0).unwrap();
            assert!((a.exp() - b.exp()).abs() <= eps);
        }
    }

    #[test]
    fn dataset_is_sum_of_clutches() {
        let pairs = [(5, 1), (3, 0), (8, 2), (5, 1), (0, 0)];
        let d = Dataset::secondary(&pairs).unwrap();
        let params = ModelParams::new(0.25, 0.3, 7.0, 0.2);
        for model in AllocationModel::ALL {
            let total = dataset_loglik(&d, &params, model, 1e-10).unwrap();
            let parts: f64 = pairs
                .iter()
                .map(|&(n, m)| clutch_marginal_loglik(n, m, &params, model, 1e-10).unwrap())
                .sum();
            assert!((total - parts).abs() < 1e-10);
            let doubled = d.concat(&d).unwrap();
            let twice = dataset_loglik(&doubled, &params, model, 1e-10).unwrap();
            assert!((twice - 2.0 * total).abs() < 1e-9);
        }
    }

    #[test]
    fn clutch_larger_than_poisson_bound() {
        let params = ModelParams::new(0.4, 0.0, 2.0, 0.1);
        let ll = clutch_marginal_loglik(25, 10, &params, AllocationModel::Binomial, 1e-10).unwrap();
        assert!(ll.is_finite());
        let bf: f64 = (25..80u32)
            .map(|big_n| {
                (0..=big_n)
                    .map(|big_m| {
                        let c = ClutchCounts::new(big_n, big_m, 25, 10);
                        if !c.is_feasible() {
                            return 0.0;
                        }
                        (ln_poisson_pmf(big_n, 2.0)
                            + ln_binomial_pmf(big_m, big_n, 0.4)
                            + ln_binomial_pmf(25, big_n, 0.9)
                            + ln_survivor_pmf_unchecked(c))
                        .exp()
                    })
                    .sum::<f64>()
            })
            .sum();
        assert!((ll - bf.ln()).abs() < 1e-9);
    }

    #[test]
    fn primary_likelihood_is_allocation_only() {
        let d = Dataset::primary(&[(6, 2), (4, 1)]).unwrap();
        let params = ModelParams::new(0.3, 0.5, f64::NAN, f64::NAN);
        let ll = dataset_loglik(&d, &params, AllocationModel::DoubleBinomial, 1e-10).unwrap();
        let disp = params.dispersion();
        let expected = log_pmf_allocation(AllocationModel::DoubleBinomial, 6, 2, disp).unwrap()
            + log_pmf_allocation(AllocationModel::DoubleBinomial, 4, 1, disp).unwrap();
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn complete_posterior_edge_cases() {
        let d = Dataset::secondary(&[(3, 1)]).unwrap();
        let params = ModelParams::new(0.3, 0.2, 5.0, 0.2);
        let bad = LatentState {
            eggs: vec![4],
            male_eggs: vec![0],
        };
        let lp = complete_data_logposterior(&d, &bad, &params, AllocationModel::MultiplicativeBinomial, &priors()).unwrap();
        assert_eq!(lp, f64::NEG_INFINITY);
        let empty = Dataset::secondary(&[]).unwrap();
        let none = LatentState {
            eggs: vec![],
            male_eggs: vec![],
        };
        let lp = complete_data_logposterior(&empty, &none, &params, AllocationModel::MultiplicativeBinomial, &priors()).unwrap();
        let prior = priors().ln_density(&params, AllocationModel::MultiplicativeBinomial, DataMode::Secondary);
        assert_eq!(lp, prior);
    }

    #[test]
    fn complete_posterior_marginalizes_to_likelihood() {
        // Two clutches; latents enumerated up to N = 25 where Poisson(3) mass is negligible.
        let d = Dataset::secondary(&[(2, 1), (1, 0)]).unwrap();
        let params = ModelParams::new(0.35, 0.6, 3.0, 0.3);
        for model in AllocationModel::ALL {
            let mut sum = LogSum::new();
            let cap = 25;
            let clutch = |n: u32, m: u32| -> Vec<(u32, u32)> {
                (n..=cap)
                    .flat_map(|big_n| (m..=(m + big_n - n)).map(move |big_m| (big_n, big_m)))
                    .collect()
            };
            for &(n1, m1) in &clutch(2, 1) {
                for &(n2, m2) in &clutch(1, 0) {
                    let lat = LatentState {
                        eggs: vec![n1, n2],
                        male_eggs: vec![m1, m2],
                    };
                    sum.add(complete_data_logposterior(&d, &lat, &params, model, &priors()).unwrap());
                }
            }
            let marginal = dataset_loglik(&d, &params, model, 1e-14).unwrap()
                + priors().ln_density(&params, model, DataMode::Secondary);
            assert!((sum.value() - marginal).abs() < 1e-10, "{model}");
        }
    }

    #[test]
    fn prior_validation() {
        assert!(PriorConfig::primary(1.0).validate(DataMode::Secondary).is_err());
        assert!(PriorConfig::primary(1.0).validate(DataMode::Primary).is_ok());
        assert!(PriorConfig::primary(0.0).validate(DataMode::Primary).is_err());
        assert!(priors().validate(DataMode::Secondary).is_ok());
    }

    #[test]
    fn linear_space_kernel_matches_log_space() {
        for (model, p, psi) in [
            (AllocationModel::MultiplicativeBinomial, 0.3, 0.5),
            (AllocationModel::MultiplicativeBinomial, 0.01, 4.0),
            (AllocationModel::DoubleBinomial, 0.1, 3.0),
            (AllocationModel::DoubleBinomial, 0.6, -2.0),
        ] {
            let disp = DispersionParams::new(p, psi).unwrap();
            let mut cache = KernelCache::new(model, disp, 3).unwrap();
            for (j, &(n, m)) in [(0u32, 0u32), (5, 1), (30, 29)].iter().enumerate() {
                cache.ensure_log(j, n, m, 90);
                cache.ensure(j, n, m, 90);
                for big_n in n..=90 {
                    let e = cache.e[j][(big_n - n) as usize];
                    if e.is_normal() {
                        let from_e = e.ln() + ln_choose(big_n, n);
                        let slow = cache.log_a_direct(n, m, big_n);
                        assert!((from_e - slow).abs() < 1e-9 * slow.abs().max(1.0), "E {model} {n} {m} {big_n}");
                    }
                    let fast = cache.log_a[j][(big_n - n) as usize];
                    let slow = cache.log_a_direct(n, m, big_n);
                    assert!((fast - slow).abs() < 1e-9 * slow.abs().max(1.0), "{model} {n} {m} {big_n}: {fast} {slow}");
                }
            }
        }
    }

    #[test]
    fn linear_secondary_sum_matches_log_space() {
        let pairs = [(0u32, 0u32), (3, 1), (12, 2), (40, 5), (150, 30)];
        let d = Dataset::secondary(&pairs).unwrap();
        for (lambda, dd) in [(10.0, 0.3), (2.0, 0.01), (80.0, 0.9), (0.5, 1e-6), (300.0, 0.5)] {
            let mut engine = LikelihoodEngine::new(&d, AllocationModel::MultiplicativeBinomial, 1e-12).unwrap();
            let params = ModelParams::new(0.2, 0.4, lambda, dd);
            let fast = engine.log_likelihood(&params).unwrap();
            let bound = poisson_truncation_bound(lambda, 1e-12).unwrap();
            let pairs = engine.pairs.clone();
            let cache = &mut engine.caches[0];
            let slow: f64 = pairs
                .iter()
                .enumerate()
                .map(|(j, &(n, _, c))| {
                    let upper = truncation_limit(n, lambda, bound, 1e-12);
                    cache.ensure_log(j, n, pairs[j].1, upper);
                    c as f64 * (LikelihoodEngine::pair_loglik_log(&cache.log_a[j], n, upper, lambda, dd.ln()) + n as f64 * (-dd).ln_1p())
                })
                .sum();
            assert!((fast - slow).abs() < 1e-9 * slow.abs().max(1.0), "λ={lambda} d={dd}: {fast} vs {slow}");
        }
    }

    #[test]
    fn engine_survives_cache_eviction() {
        let d = Dataset::secondary(&[(6, 1), (4, 1), (7, 2)]).unwrap();
        let mut engine = LikelihoodEngine::new(&d, AllocationModel::MultiplicativeBinomial, 1e-10).unwrap();
        let thetas: Vec<ModelParams> = (0..7)
            .map(|i| ModelParams::new(0.1 + 0.1 * i as f64, 0.2 * i as f64 - 0.5, 6.0, 0.2))
            .collect();
        let first: Vec<f64> = thetas.iter().map(|t| engine.log_likelihood(t).unwrap()).collect();
        for (t, want) in thetas.iter().zip(&first).rev() {
            assert_eq!(engine.log_likelihood(t).unwrap(), *want);
        }
    }

    #[test]
    fn engine_reuse_matches_fresh_evaluation() {
        let d = Dataset::secondary(&[(6, 1), (4, 1), (7, 2), (2, 0)]).unwrap();
        let mut engine = LikelihoodEngine::new(&d, AllocationModel::DoubleBinomial, 1e-10).unwrap();
        for (lambda, dd) in [(4.0, 0.1), (20.0, 0.5), (3.0, 0.05)] {
            let params = ModelParams::new(0.2, 0.7, lambda, dd);
            let a = engine.log_likelihood(&params).unwrap();
            let b = dataset_loglik(&d, &params, AllocationModel::DoubleBinomial, 1e-10).unwrap();
            assert!((a - b).abs() < 1e-12 * b.abs());
        }
    }
}
