//! Sex-allocation distributions (binomial, multiplicative binomial, double
//! binomial) and the binomial developmental-mortality model.
//!
//! All three allocation models are evaluated on their finite support
//! `M ∈ {0..N}`. The generalized models carry a normalizing constant that
//! depends on `N`, `p` and `ψ`; it is obtained by log-space summation of the
//! unnormalized kernel, so no approximation is involved.
//!
//! Kernels (up to the constant):
//!
//! ```text
//! binomial        C(N,M) p^M (1-p)^(N-M)
//! multiplicative  C(N,M) p^M (1-p)^(N-M) exp(ψ M (N-M))
//! double          C(N,M) N^(Nψ) p^(M(ψ+1)) (1-p)^((N-M)(ψ+1)) / (M^(Mψ) (N-M)^((N-M)ψ))
//! ```
//!
//! with `0^0 = 1` in the double binomial. `ψ > 0` gives under-dispersion,
//! `ψ < 0` over-dispersion and `ψ = 0` recovers the binomial.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{ln_choose, ln_poisson_pmf, log_sum_exp, xlogx, LogSum};

/// Largest clutch size the pmf code accepts.
pub const MAX_CLUTCH_SIZE: u32 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationModel {
    Binomial,
    MultiplicativeBinomial,
    DoubleBinomial,
}

impl AllocationModel {
    pub const ALL: [AllocationModel; 3] = [
        AllocationModel::Binomial,
        AllocationModel::MultiplicativeBinomial,
        AllocationModel::DoubleBinomial,
    ];

    /// Whether the model carries the dispersion parameter ψ.
    pub fn has_dispersion(self) -> bool {
        !matches!(self, AllocationModel::Binomial)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            AllocationModel::Binomial => "binomial",
            AllocationModel::MultiplicativeBinomial => "multiplicative",
            AllocationModel::DoubleBinomial => "double",
        }
    }
}

impl fmt::Display for AllocationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for AllocationModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binomial" | "binom" | "bin" => Ok(AllocationModel::Binomial),
            "mult" | "multiplicative" | "multiplicative_binomial" => {
                Ok(AllocationModel::MultiplicativeBinomial)
            }
            "double" | "double_binomial" => Ok(AllocationModel::DoubleBinomial),
            other => Err(Error::InvalidConfig(format!("unknown model '{other}'"))),
        }
    }
}

/// Allocation probability `p ∈ (0,1)` and dispersion `ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionParams {
    pub p: f64,
    pub psi: f64,
}

impl DispersionParams {
    pub fn new(p: f64, psi: f64) -> Result<Self> {
        let params = DispersionParams { p, psi };
        params.validate()?;
        Ok(params)
    }

    pub fn binomial(p: f64) -> Result<Self> {
        Self::new(p, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::param("p", self.p, "must lie in (0, 1)"));
        }
        if !self.psi.is_finite() {
            return Err(Error::param("psi", self.psi, "must be finite"));
        }
        Ok(())
    }
}

/// Primary and secondary counts of one clutch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClutchCounts {
    /// N: eggs laid.
    pub eggs: u32,
    /// M: male eggs.
    pub male_eggs: u32,
    /// n: offspring reaching maturity.
    pub survivors: u32,
    /// m: males reaching maturity.
    pub male_survivors: u32,
}

impl ClutchCounts {
    pub fn new(eggs: u32, male_eggs: u32, survivors: u32, male_survivors: u32) -> Self {
        ClutchCounts {
            eggs,
            male_eggs,
            survivors,
            male_survivors,
        }
    }

    /// Checks N ≥ n, M ≥ m, N − n ≥ M − m, M ≤ N and m ≤ n.
    pub fn check_feasible(&self) -> Result<()> {
        let ClutchCounts {
            eggs: big_n,
            male_eggs: big_m,
            survivors: n,
            male_survivors: m,
        } = *self;
        let fail = |what: &str| {
            Err(Error::Infeasible(format!(
                "{what} (N={big_n}, M={big_m}, n={n}, m={m})"
            )))
        };
        if big_m > big_n {
            return fail("M > N");
        }
        if m > n {
            return fail("m > n");
        }
        if n > big_n {
            return fail("n > N");
        }
        if m > big_m {
            return fail("m > M");
        }
        if big_m - m > big_n - n {
            return fail("more male deaths than deaths");
        }
        Ok(())
    }

    pub fn is_feasible(&self) -> bool {
        self.check_feasible().is_ok()
    }
}

fn check_size(n: u32) -> Result<()> {
    if n > MAX_CLUTCH_SIZE {
        return Err(Error::param(
            "N",
            n as f64,
            "clutch size exceeds the supported maximum",
        ));
    }
    Ok(())
}

/// Unnormalized log kernel including the binomial coefficient.
#[inline]
pub(crate) fn log_kernel(model: AllocationModel, n: u32, m: u32, ln_p: f64, ln_q: f64, psi: f64) -> f64 {
    let mf = m as f64;
    let ff = (n - m) as f64;
    let base = ln_choose(n, m) + xlogy_ln(mf, ln_p) + xlogy_ln(ff, ln_q);
    match model {
        AllocationModel::Binomial => base,
        AllocationModel::MultiplicativeBinomial => base + psi * mf * ff,
        AllocationModel::DoubleBinomial => {
            let tilt = xlogx(n as f64) - xlogx(mf) - xlogx(ff)
                + xlogy_ln(mf, ln_p)
                + xlogy_ln(ff, ln_q);
            base + psi * tilt
        }
    }
}

/// [`log_kernel`] without the binomial coefficient.
#[inline]
pub(crate) fn log_tilt(model: AllocationModel, n: u32, m: u32, ln_p: f64, ln_q: f64, psi: f64) -> f64 {
    log_kernel(model, n, m, ln_p, ln_q, psi) - ln_choose(n, m)
}

/// x·ln(y) given ln(y), with 0·(anything) = 0.
#[inline]
fn xlogy_ln(x: f64, ln_y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * ln_y
    }
}

/// Fills `out` with the normalized log pmf over M = 0..=n.
pub(crate) fn fill_log_pmf(model: AllocationModel, n: u32, params: DispersionParams, out: &mut Vec<f64>) {
    out.clear();
    let ln_p = params.p.ln();
    let ln_q = (-params.p).ln_1p();
    let psi = if model.has_dispersion() { params.psi } else { 0.0 };
    out.extend((0..=n).map(|m| log_kernel(model, n, m, ln_p, ln_q, psi)));
    if model == AllocationModel::Binomial {
        return;
    }
    let log_z = log_sum_exp(out);
    for v in out.iter_mut() {
        *v -= log_z;
    }
}

/// ln c(N, p, ψ): the log of the constant that normalizes the kernel at size N.
pub fn log_normalizing_constant(
    model: AllocationModel,
    n: u32,
    params: DispersionParams,
) -> Result<f64> {
    params.validate()?;
    check_size(n)?;
    let ln_p = params.p.ln();
    let ln_q = (-params.p).ln_1p();
    let psi = if model.has_dispersion() { params.psi } else { 0.0 };
    let mut acc = LogSum::new();
    for m in 0..=n {
        acc.add(log_kernel(model, n, m, ln_p, ln_q, psi));
    }
    let log_c = -acc.value();
    if !log_c.is_finite() {
        return Err(Error::Numerical(format!(
            "normalizing constant overflow at N={n}, p={}, psi={}",
            params.p, params.psi
        )));
    }
    if model == AllocationModel::Binomial {
        return Ok(0.0);
    }
    Ok(log_c)
}

/// c(N, p, ψ) such that the pmf sums to one over M ∈ {0..N}.
pub fn normalizing_constant(model: AllocationModel, n: u32, params: DispersionParams) -> Result<f64> {
    log_normalizing_constant(model, n, params).map(f64::exp)
}

/// log P(M | N, p, ψ) under `model`.
pub fn log_pmf_allocation(
    model: AllocationModel,
    n: u32,
    m: u32,
    params: DispersionParams,
) -> Result<f64> {
    if m > n {
        return Err(Error::Infeasible(format!("M = {m} exceeds N = {n}")));
    }
    let log_c = log_normalizing_constant(model, n, params)?;
    let psi = if model.has_dispersion() { params.psi } else { 0.0 };
    Ok(log_c + log_kernel(model, n, m, params.p.ln(), (-params.p).ln_1p(), psi))
}

/// The whole pmf over M = 0..=N.
pub fn allocation_pmf(model: AllocationModel, n: u32, params: DispersionParams) -> Result<Vec<f64>> {
    params.validate()?;
    check_size(n)?;
    let mut out = Vec::with_capacity(n as usize + 1);
    fill_log_pmf(model, n, params, &mut out);
    Ok(out.into_iter().map(f64::exp).collect())
}

/// Draws M by inverse CDF over the finite support.
pub fn sample_allocation<R: Rng + ?Sized>(
    model: AllocationModel,
    n: u32,
    params: DispersionParams,
    rng: &mut R,
) -> Result<u32> {
    if n == 0 {
        params.validate()?;
        return Ok(0);
    }
    let pmf = allocation_pmf(model, n, params)?;
    Ok(inverse_cdf(&pmf, rng.gen::<f64>()))
}

pub(crate) fn inverse_cdf(pmf: &[f64], u: f64) -> u32 {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (m, &w) in pmf.iter().enumerate() {
        if w > 0.0 {
            last_positive = m;
        }
        cum += w;
        if u < cum {
            return m as u32;
        }
    }
    last_positive as u32
}

/// E[M/N], computed exactly over the finite support.
pub fn expected_sex_ratio(model: AllocationModel, n: u32, params: DispersionParams) -> Result<f64> {
    if n == 0 {
        return Err(Error::Degenerate(
            "sex ratio of an empty clutch is undefined".into(),
        ));
    }
    let pmf = allocation_pmf(model, n, params)?;
    let nf = n as f64;
    Ok(pmf
        .iter()
        .enumerate()
        .map(|(m, w)| w * m as f64 / nf)
        .sum())
}

/// Mean and variance of M.
pub fn allocation_moments(model: AllocationModel, n: u32, params: DispersionParams) -> Result<(f64, f64)> {
    let pmf = allocation_pmf(model, n, params)?;
    let mean: f64 = pmf.iter().enumerate().map(|(m, w)| w * m as f64).sum();
    let var = pmf
        .iter()
        .enumerate()
        .map(|(m, w)| w * (m as f64 - mean).powi(2))
        .sum();
    Ok((mean, var))
}

/// log P(m | N, M, n): which of the N − n deaths fell on males.
///
/// Assumes feasibility has been checked.
#[inline]
pub(crate) fn ln_survivor_pmf_unchecked(c: ClutchCounts) -> f64 {
    let ClutchCounts {
        eggs: big_n,
        male_eggs: big_m,
        survivors: n,
        male_survivors: m,
    } = c;
    let male_deaths = big_m - m;
    let deaths = big_n - n;
    ln_choose(big_m, male_deaths) + ln_choose(big_n - big_m, deaths - male_deaths)
        - ln_choose(big_n, deaths)
}

/// P(m | N, M, n) = C(M, M−m) C(N−M, N−n−M+m) / C(N, N−n).
pub fn survivor_pmf(c: ClutchCounts) -> Result<f64> {
    c.check_feasible()?;
    Ok(ln_survivor_pmf_unchecked(c).exp())
}

/// Applies independent per-egg mortality with probability `d`.
///
/// Returns `(n, m)`: survivors and male survivors.
pub fn sample_mortality<R: Rng + ?Sized>(
    eggs: u32,
    male_eggs: u32,
    d: f64,
    rng: &mut R,
) -> Result<(u32, u32)> {
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::param("d", d, "mortality must lie in [0, 1]"));
    }
    if male_eggs > eggs {
        return Err(Error::Infeasible(format!("M = {male_eggs} exceeds N = {eggs}")));
    }
    let survive = 1.0 - d;
    let draw = |k: u32, rng: &mut R| -> u32 {
        if k == 0 {
            0
        } else {
            Binomial::new(k as u64, survive)
                .expect("survival probability validated")
                .sample(rng) as u32
        }
    };
    let males = draw(male_eggs, rng);
    let females = draw(eggs - male_eggs, rng);
    Ok((males + females, males))
}

/// Smallest `B` with P(X > B) < ε for X ~ Poisson(λ).
pub fn poisson_truncation_bound(lambda: f64, eps: f64) -> Result<u32> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::param("lambda", lambda, "must be positive and finite"));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::param("epsilon", eps, "must lie in (0, 1)"));
    }
    // Walk down from far in the upper tail, accumulating P(X > B) relative to
    // the pmf at the start point, until the tail reaches ε.
    let start = (lambda + 40.0 * lambda.sqrt() + 50.0).ceil();
    if start > MAX_CLUTCH_SIZE as f64 + 1.0 {
        return Err(Error::param(
            "lambda",
            lambda,
            "truncation bound exceeds the supported clutch size",
        ));
    }
    let ln_eps = eps.ln();
    let mut k = start as u32;
    let mut log_scale = ln_poisson_pmf(k, lambda);
    let mut threshold = (ln_eps - log_scale).min(700.0).exp();
    let mut pmf = 1.0;
    let mut tail = 0.0;
    while k > 0 {
        // tail = P(X > k − 1), pmf = P(X = k − 1) after this step, both / e^log_scale.
        tail += pmf;
        pmf *= k as f64 / lambda;
        k -= 1;
        if tail >= threshold && log_scale + tail.ln() >= ln_eps {
            return Ok(k + 1);
        }
        if pmf > 1e200 {
            log_scale += pmf.ln();
            tail /= pmf;
            pmf = 1.0;
            threshold = (ln_eps - log_scale).min(700.0).exp();
        }
    }
    Ok(0)
}

/// Cached normalized log pmf rows for one `(model, p, ψ)`.
#[derive(Debug, Clone)]
pub struct AllocationTable {
    model: AllocationModel,
    params: DispersionParams,
    rows: Vec<Vec<f64>>,
}

impl AllocationTable {
    pub fn new(model: AllocationModel, params: DispersionParams) -> Result<Self> {
        params.validate()?;
        Ok(AllocationTable {
            model,
            params,
            rows: Vec::new(),
        })
    }

    pub fn model(&self) -> AllocationModel {
        self.model
    }

    pub fn params(&self) -> DispersionParams {
        self.params
    }

    /// Makes rows 0..=cap available.
    pub fn ensure(&mut self, cap: u32) {
        while self.rows.len() <= cap as usize {
            let n = self.rows.len() as u32;
            let mut row = Vec::with_capacity(n as usize + 1);
            fill_log_pmf(self.model, n, self.params, &mut row);
            self.rows.push(row);
        }
    }

    /// Log pmf over M = 0..=N.
    pub fn row(&mut self, n: u32) -> &[f64] {
        self.ensure(n);
        &self.rows[n as usize]
    }

    /// Row lookup without growing; panics if `n` was never ensured.
    #[inline]
    pub fn row_cached(&self, n: u32) -> &[f64] {
        &self.rows[n as usize]
    }

    pub fn cap(&self) -> Option<u32> {
        (self.rows.len() as u32).checked_sub(1)
    }

    #[inline]
    pub fn log_pmf(&mut self, n: u32, m: u32) -> f64 {
        self.row(n)[m as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::ln_poisson_pmf;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pmf_sum(model: AllocationModel, n: u32, p: f64, psi: f64) -> f64 {
        allocation_pmf(model, n, DispersionParams::new(p, psi).unwrap())
            .unwrap()
            .iter()
            .sum()
    }

    #[test]
    fn binomial_reference_probability() {
        let p = DispersionParams::binomial(0.1).unwrap();
        let prob = log_pmf_allocation(AllocationModel::Binomial, 10, 1, p).unwrap().exp();
        // 10 · 0.1 · 0.9⁹
        assert!((prob - 10.0 * 0.1 * 0.9f64.powi(9)).abs() < 1e-14);
        assert!((prob - 0.3874).abs() < 1e-4);
    }

    #[test]
    fn double_binomial_strong_underdispersion() {
        let p = DispersionParams::new(0.1, 3.0).unwrap();
        let prob = log_pmf_allocation(AllocationModel::DoubleBinomial, 10, 1, p)
            .unwrap()
            .exp();
        assert!((prob - 0.85).abs() < 0.005, "P(M=1) = {prob}");
    }

    #[test]
    fn psi_zero_reduces_to_binomial() {
        for n in [0u32, 1, 7, 30] {
            for p in [0.05, 0.4, 0.93] {
                let par = DispersionParams::new(p, 0.0).unwrap();
                for m in 0..=n {
                    let b = log_pmf_allocation(AllocationModel::Binomial, n, m, par).unwrap();
                    for model in [AllocationModel::MultiplicativeBinomial, AllocationModel::DoubleBinomial] {
                        let g = log_pmf_allocation(model, n, m, par).unwrap();
                        assert!((g - b).abs() < 1e-12, "{model} N={n} M={m} p={p}");
                    }
                }
            }
        }
    }

    #[test]
    fn double_binomial_matches_direct_normalization() {
        // Direct evaluation of the printed kernel, then brute-force normalization.
        let (n, p, psi) = (5u32, 0.3f64, 0.7f64);
        let raw: Vec<f64> = (0..=n)
            .map(|m| {
                let nf = n as f64;
                let mf = m as f64;
                let ff = nf - mf;
                let choose = (1..=n).map(|k| k as f64).product::<f64>()
                    / ((1..=m).map(|k| k as f64).product::<f64>()
                        * (1..=(n - m)).map(|k| k as f64).product::<f64>());
                let pow0 = |x: f64, e: f64| if x == 0.0 { 1.0 } else { x.powf(e) };
                choose * nf.powf(nf * psi) * p.powf(mf * (psi + 1.0)) * (1.0 - p).powf(ff * (psi + 1.0))
                    / (pow0(mf, mf * psi) * pow0(ff, ff * psi))
            })
            .collect();
        let z: f64 = raw.iter().sum();
        let pmf = allocation_pmf(AllocationModel::DoubleBinomial, n, DispersionParams::new(p, psi).unwrap()).unwrap();
        for (a, b) in raw.iter().zip(&pmf) {
            assert!((a / z - b).abs() < 1e-13);
        }
    }

    #[test]
    fn multiplicative_hand_normalization() {
        let par = DispersionParams::new(0.5, 2f64.ln()).unwrap();
        let c = normalizing_constant(AllocationModel::MultiplicativeBinomial, 2, par).unwrap();
        assert!((c - 2.0 / 3.0).abs() < 1e-14);
        let c0 = normalizing_constant(AllocationModel::DoubleBinomial, 9, DispersionParams::new(0.3, 0.0).unwrap()).unwrap();
        assert!((c0 - 1.0).abs() < 1e-13);
    }

    #[test]
    fn normalization_sweep() {
        for model in AllocationModel::ALL {
            for n in 0..=50u32 {
                for p in [0.05, 0.25, 0.5, 0.75, 0.95] {
                    for psi in [-1.0, -0.5, 0.0, 1.0, 3.0] {
                        let s = pmf_sum(model, n, p, psi);
                        assert!((s - 1.0).abs() < 1e-12, "{model} N={n} p={p} psi={psi}: {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_and_invalid_inputs() {
        let par = DispersionParams::binomial(0.5).unwrap();
        assert!(matches!(
            log_pmf_allocation(AllocationModel::Binomial, 3, 4, par),
            Err(Error::Infeasible(_))
        ));
        assert!(DispersionParams::new(0.0, 1.0).is_err());
        assert!(DispersionParams::new(0.5, f64::NAN).is_err());
        assert!(allocation_pmf(AllocationModel::Binomial, MAX_CLUTCH_SIZE + 1, par).is_err());
        assert_eq!(log_pmf_allocation(AllocationModel::DoubleBinomial, 0, 0, par).unwrap(), 0.0);
    }

    #[test]
    fn expected_sex_ratio_cases() {
        let par = DispersionParams::new(0.3, 0.0).unwrap();
        for model in AllocationModel::ALL {
            assert!((expected_sex_ratio(model, 12, par).unwrap() - 0.3).abs() < 1e-12);
        }
        let par = DispersionParams::new(0.3, 0.8).unwrap();
        let one = expected_sex_ratio(AllocationModel::MultiplicativeBinomial, 1, par).unwrap();
        let p1 = log_pmf_allocation(AllocationModel::MultiplicativeBinomial, 1, 1, par).unwrap().exp();
        assert!((one - p1).abs() < 1e-15);
        assert!(expected_sex_ratio(AllocationModel::Binomial, 0, par).is_err());
    }

    #[test]
    fn multiplicative_sex_ratio_against_monte_carlo() {
        let par = DispersionParams::new(0.2, 0.4).unwrap();
        let model = AllocationModel::MultiplicativeBinomial;
        let exact = expected_sex_ratio(model, 10, par).unwrap();
        assert!((exact - 0.2).abs() > 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 1_000_000;
        let mut s = 0.0;
        let mut s2 = 0.0;
        for _ in 0..draws {
            let r = sample_allocation(model, 10, par, &mut rng).unwrap() as f64 / 10.0;
            s += r;
            s2 += r * r;
        }
        let mean = s / draws as f64;
        let se = ((s2 / draws as f64 - mean * mean) / draws as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn underdispersion_direction() {
        for model in [AllocationModel::DoubleBinomial, AllocationModel::MultiplicativeBinomial] {
            for p in [0.1, 0.3, 0.5, 0.8] {
                for psi in [0.2, 1.0, 2.5] {
                    for sign in [1.0, -1.0] {
                        let par = DispersionParams::new(p, sign * psi).unwrap();
                        let (mean, var) = allocation_moments(model, 10, par).unwrap();
                        let r = mean / 10.0;
                        let binom_var = 10.0 * r * (1.0 - r);
                        if sign > 0.0 {
                            assert!(var < binom_var, "{model} p={p} psi={psi}");
                        } else {
                            assert!(var > binom_var, "{model} p={p} psi=-{psi}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn survivor_pmf_cases() {
        let c = ClutchCounts::new(4, 2, 2, 1);
        assert!((survivor_pmf(c).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(survivor_pmf(ClutchCounts::new(6, 3, 6, 3)).unwrap(), 1.0);
        for n in 0..=5 {
            assert!((survivor_pmf(ClutchCounts::new(5, 0, n, 0)).unwrap() - 1.0).abs() < 1e-15);
        }
        assert!(survivor_pmf(ClutchCounts::new(4, 2, 5, 1)).is_err());
        assert!(survivor_pmf(ClutchCounts::new(4, 1, 3, 0)).unwrap() > 0.0);
        assert!(survivor_pmf(ClutchCounts::new(4, 1, 1, 0)).is_ok());
        assert!(survivor_pmf(ClutchCounts::new(4, 3, 3, 1)).is_err());
    }

    #[test]
    fn survivor_pmf_sums_to_one() {
        for big_n in 0..=12u32 {
            for big_m in 0..=big_n {
                for n in 0..=big_n {
                    let total: f64 = (0..=n)
                        .map(|m| ClutchCounts::new(big_n, big_m, n, m))
                        .filter(|c| c.is_feasible())
                        .map(|c| survivor_pmf(c).unwrap())
                        .sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mortality_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_mortality(9, 4, 0.0, &mut rng).unwrap(), (9, 4));
        assert_eq!(sample_mortality(9, 4, 1.0, &mut rng).unwrap(), (0, 0));
        assert!(sample_mortality(9, 4, 1.5, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let par = DispersionParams::new(0.3, 0.5).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample_allocation(AllocationModel::DoubleBinomial, 12, par, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_allocation(AllocationModel::Binomial, 0, par, &mut rng).unwrap(), 0);
    }

    #[test]
    fn truncation_bound_against_tail_sum() {
        let b = poisson_truncation_bound(10.0, 1e-10).unwrap();
        let tail = |b: u32| -> f64 { (b + 1..b + 200).map(|k| ln_poisson_pmf(k, 10.0).exp()).sum() };
        assert!(tail(b) < 1e-10);
        assert!(tail(b - 1) >= 1e-10);
        assert_eq!(poisson_truncation_bound(0.01, 0.5).unwrap(), 0);
        let mut prev = u32::MAX;
        for eps in [1e-12, 1e-9, 1e-6, 1e-3, 0.1] {
            let b = poisson_truncation_bound(7.0, eps).unwrap();
            assert!(b <= prev);
            prev = b;
        }
        let mut prev = 0;
        for lambda in [0.5, 2.0, 9.0, 40.0] {
            let b = poisson_truncation_bound(lambda, 1e-8).unwrap();
            assert!(b >= prev);
            prev = b;
        }
        assert!(poisson_truncation_bound(-1.0, 0.1).is_err());
        assert!(poisson_truncation_bound(1.0, 1.0).is_err());
        for lambda in [0.3, 4.0, 55.5, 1000.0] {
            for eps in [1e-14, 1e-10, 1e-4] {
                let b = poisson_truncation_bound(lambda, eps).unwrap();
                let upper = |b: u32| statrs::function::gamma::gamma_lr(b as f64 + 1.0, lambda);
                assert!(upper(b) < eps * (1.0 + 1e-9), "λ={lambda} ε={eps} B={b}");
                assert!(b == 0 || upper(b - 1) >= eps * (1.0 - 1e-9), "λ={lambda} ε={eps} B={b}");
            }
        }
    }

    #[test]
    fn table_rows_match_direct_pmf() {
        let par = DispersionParams::new(0.35, -0.4).unwrap();
        let mut t = AllocationTable::new(AllocationModel::MultiplicativeBinomial, par).unwrap();
        t.ensure(20);
        for n in [0u32, 3, 20] {
            for m in 0..=n {
                let direct = log_pmf_allocation(AllocationModel::MultiplicativeBinomial, n, m, par).unwrap();
                assert!((t.log_pmf(n, m) - direct).abs() < 1e-12);
            }
        }
        assert_eq!(t.cap(), Some(20));
    }
}
