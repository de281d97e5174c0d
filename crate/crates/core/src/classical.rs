//! Classical dispersion tests on offspring-group counts.
//!
//! The Meelis test works size group by size group. Conditional on the group
//! total `T`, binomial allocation makes the male counts of `v` clutches of
//! size `k` multivariate hypergeometric (`T` males spread over `vk` slots).
//! The statistic `S = Σ mᵢ²` is standardized with its exact conditional mean
//! and variance, obtained from the factorial moments
//!
//! ```text
//! E[X^(r)]        = k^(r) T^(r) / K^(r)
//! E[X^(r) Y^(s)]  = k^(r) k^(s) T^(r+s) / K^(r+s)      K = vk
//! ```
//!
//! and the per-group statistics are combined as `Σ U_k / √G` over the `G`
//! non-degenerate groups.
//!
//! The James statistic compares the observed number of within-clutch
//! male–female pairs `Σ mᵢ(nᵢ − mᵢ)` with its binomial expectation at the
//! pooled sex ratio. Its null variance accounts for the plug-in estimate of
//! `p` through a first-order (delta method) correction.

use serde::{Deserialize, Serialize};

use crate::data::{group_by_clutch_size, Dataset, SizeGroup};
use crate::error::{Error, Result};
use crate::special::normal_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    UnderDispersed,
    OverDispersed,
    Indeterminate,
}

/// Which tail of the standard normal a p-value is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    /// `2(1 − Φ(|U|))`
    TwoSided,
    /// `Φ(U)`: the directional test against under-dispersion.
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Meelis,
    James,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStatistic {
    pub size: u32,
    pub clutches: usize,
    pub total_males: u64,
    /// `None` when the group is degenerate (zero conditional variance).
    pub statistic: Option<f64>,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalTestReport {
    pub test: TestKind,
    pub statistic: Option<f64>,
    /// Two-sided p-value.
    pub p_value: Option<f64>,
    /// Lower-tail p-value Φ(U).
    pub p_lower: Option<f64>,
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupStatistic>,
    /// Clutches with no offspring, ignored by the test.
    #[serde(default)]
    pub dropped_empty: usize,
}

impl ClassicalTestReport {
    fn from_statistic(test: TestKind, u: Option<f64>, groups: Vec<GroupStatistic>, dropped_empty: usize) -> Self {
        let direction = match u {
            Some(u) if u < 0.0 => Direction::UnderDispersed,
            Some(u) if u > 0.0 => Direction::OverDispersed,
            _ => Direction::Indeterminate,
        };
        ClassicalTestReport {
            test,
            statistic: u,
            p_value: u.map(|u| (2.0 * normal_cdf(-u.abs())).min(1.0)),
            p_lower: u.map(normal_cdf),
            direction,
            groups,
            dropped_empty,
        }
    }

    pub fn p_value_for(&self, tail: Tail) -> Option<f64> {
        match tail {
            Tail::TwoSided => self.p_value,
            Tail::Lower => self.p_lower,
        }
    }
}

/// Falling factorial x(x−1)…(x−r+1) as f64.
fn falling(x: f64, r: u32) -> f64 {
    (0..r).map(|i| x - i as f64).product()
}

/// Ratio T^(r) / K^(r), zero when T < r.
fn falling_ratio(t: f64, k: f64, r: u32) -> f64 {
    let mut out = 1.0;
    for i in 0..r {
        let num = t - i as f64;
        if num <= 0.0 {
            return 0.0;
        }
        out *= num / (k - i as f64);
    }
    out
}

/// Exact conditional mean and variance of `Σ mᵢ²` for `v` clutches of size
/// `k` holding `t` males in total, under random allocation.
pub fn meelis_moments(v: u32, k: u32, t: u64) -> (f64, f64) {
    let vf = v as f64;
    let kf = k as f64;
    let tf = t as f64;
    let big_k = vf * kf;
    if big_k == 0.0 {
        return (0.0, 0.0);
    }
    let r = |order: u32| falling_ratio(tf, big_k, order);
    let k2 = falling(kf, 2);
    let k3 = falling(kf, 3);
    let k4 = falling(kf, 4);
    // X² = X^(2) + X ; X⁴ = X^(4) + 6X^(3) + 7X^(2) + X
    let e_x = kf * r(1);
    let e_x2 = k2 * r(2) + e_x;
    let e_x4 = k4 * r(4) + 6.0 * k3 * r(3) + 7.0 * k2 * r(2) + kf * r(1);
    let e_x2y2 = k2 * k2 * r(4) + 2.0 * k2 * kf * r(3) + kf * kf * r(2);
    let mean = vf * e_x2;
    let second = vf * e_x4 + vf * (vf - 1.0) * e_x2y2;
    let var = (second - mean * mean).max(0.0);
    (mean, var)
}

fn meelis_group(g: &SizeGroup) -> GroupStatistic {
    let v = g.clutches() as u32;
    let t = g.total_males();
    let slots = g.size as u64 * v as u64;
    let base = GroupStatistic {
        size: g.size,
        clutches: g.clutches(),
        total_males: t,
        statistic: None,
        excluded: true,
    };
    if v < 2 || g.size < 2 || t <= 1 || t + 1 >= slots {
        return base;
    }
    let (mean, var) = meelis_moments(v, g.size, t);
    if var <= 1e-9 * (1.0 + mean * mean) {
        return base;
    }
    let s: f64 = g.counts.iter().map(|&m| (m as f64).powi(2)).sum();
    GroupStatistic {
        statistic: Some((s - mean) / var.sqrt()),
        excluded: false,
        ..base
    }
}

/// Meelis test: per size group standardized `Σ m²`, combined over
/// non-degenerate groups.
pub fn meelis_test(dataset: &Dataset) -> Result<ClassicalTestReport> {
    let (data, dropped) = dataset.without_empty();
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let groups: Vec<GroupStatistic> = group_by_clutch_size(&data)?.iter().map(meelis_group).collect();
    let included: Vec<f64> = groups.iter().filter_map(|g| g.statistic).collect();
    let u = (!included.is_empty()).then(|| included.iter().sum::<f64>() / (included.len() as f64).sqrt());
    Ok(ClassicalTestReport::from_statistic(TestKind::Meelis, u, groups, dropped))
}

/// Raw moments E[m^j], j = 1..4, for m ~ Binomial(n, p).
fn binomial_raw_moments(n: u32, p: f64) -> [f64; 4] {
    let nf = n as f64;
    let (n2, n3, n4) = (falling(nf, 2), falling(nf, 3), falling(nf, 4));
    let (p2, p3, p4) = (p * p, p * p * p, p * p * p * p);
    [
        nf * p,
        n2 * p2 + nf * p,
        n3 * p3 + 3.0 * n2 * p2 + nf * p,
        n4 * p4 + 6.0 * n3 * p3 + 7.0 * n2 * p2 + nf * p,
    ]
}

/// (E t, Var t, Cov(t, m), Var m) for t = m(n − m), m ~ Binomial(n, p).
pub(crate) fn pair_count_moments(n: u32, p: f64) -> (f64, f64, f64, f64) {
    let nf = n as f64;
    let [e1, e2, e3, e4] = binomial_raw_moments(n, p);
    let et = nf * e1 - e2;
    let et2 = nf * nf * e2 - 2.0 * nf * e3 + e4;
    let var_t = et2 - et * et;
    let cov_tm = nf * e2 - e3 - et * e1;
    let var_m = nf * p * (1.0 - p);
    (et, var_t, cov_tm, var_m)
}

/// James test on within-clutch male–female pair counts.
pub fn james_test(dataset: &Dataset) -> Result<ClassicalTestReport> {
    let (data, dropped) = dataset.without_empty();
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total_n = data.total_offspring();
    let total_m = data.total_males();
    if total_n < 2 || total_m == 0 || total_m == total_n {
        return Ok(ClassicalTestReport::from_statistic(TestKind::James, None, Vec::new(), dropped));
    }
    let p = total_m as f64 / total_n as f64;
    let slope: f64 = data
        .clutches()
        .iter()
        .map(|c| {
            let n = c.size as f64;
            n * (n - 1.0) * (1.0 - 2.0 * p)
        })
        .sum::<f64>()
        / total_n as f64;
    let mut observed = 0.0;
    let mut expected = 0.0;
    let mut var = 0.0;
    for c in data.clutches() {
        observed += (c.males as f64) * (c.females() as f64);
        let (et, var_t, cov_tm, var_m) = pair_count_moments(c.size, p);
        expected += et;
        var += var_t - 2.0 * slope * cov_tm + slope * slope * var_m;
    }
    let u = (var > 1e-12).then(|| (expected - observed) / var.sqrt());
    Ok(ClassicalTestReport::from_statistic(TestKind::James, u, Vec::new(), dropped))
}

/// R = Σ v_k s_k² / Σ v_k k p̂_k (1 − p̂_k) over size groups with v_k ≥ 2.
pub fn dispersion_ratio(dataset: &Dataset) -> Result<f64> {
    let (data, _) = dataset.without_empty();
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for g in group_by_clutch_size(&data)? {
        let (Some(s2), Some(p)) = (g.sample_variance(), g.sex_ratio()) else {
            continue;
        };
        let v = g.clutches() as f64;
        num += v * s2;
        den += v * g.size as f64 * p * (1.0 - p);
    }
    if den <= 0.0 {
        return Err(Error::Degenerate(
            "dispersion ratio needs a size group with at least two clutches of mixed sex".into(),
        ));
    }
    Ok(num / den)
}

/// McCullagh–Nelder dispersion s² = Σ (mᵢ − p̂nᵢ)² / (nᵢ p̂ (1 − p̂)) / (C − 1).
pub fn mccullagh_dispersion(dataset: &Dataset) -> Result<f64> {
    let (data, _) = dataset.without_empty();
    if data.len() < 2 {
        return Err(Error::Degenerate("McCullagh dispersion needs at least two non-empty clutches".into()));
    }
    let p = data.pooled_sex_ratio().unwrap_or(0.0);
    if p <= 0.0 || p >= 1.0 {
        return Err(Error::Degenerate("pooled sex ratio is 0 or 1".into()));
    }
    let q = p * (1.0 - p);
    let total: f64 = data
        .clutches()
        .iter()
        .map(|c| {
            let n = c.size as f64;
            (c.males as f64 - p * n).powi(2) / (n * q)
        })
        .sum();
    Ok(total / (data.len() - 1) as f64)
}

/// All four classical quantities; statistics that are undefined on the data are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalSummary {
    pub meelis: ClassicalTestReport,
    pub james: ClassicalTestReport,
    pub ratio_r: Option<f64>,
    pub mccullagh_s2: Option<f64>,
}

pub fn classical_summary(dataset: &Dataset) -> Result<ClassicalSummary> {
    Ok(ClassicalSummary {
        meelis: meelis_test(dataset)?,
        james: james_test(dataset)?,
        ratio_r: dispersion_ratio(dataset).ok(),
        mccullagh_s2: mccullagh_dispersion(dataset).ok(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Enumerates all compositions of `t` males over `v` clutches of size `k`,
    /// weighting each by Π C(k, mᵢ).
    fn enumerate_moments(v: u32, k: u32, t: u32) -> (f64, f64) {
        fn choose(n: u32, r: u32) -> f64 {
            (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
        }
        fn rec(v: u32, k: u32, left: u32, w: f64, s: u32, acc: &mut (f64, f64, f64)) {
            if v == 0 {
                if left == 0 {
                    acc.0 += w;
                    acc.1 += w * s as f64;
                    acc.2 += w * (s as f64).powi(2);
                }
                return;
            }
            for m in 0..=k.min(left) {
                rec(v - 1, k, left - m, w * choose(k, m), s + m * m, acc);
            }
        }
        let mut acc = (0.0, 0.0, 0.0);
        rec(v, k, t, 1.0, 0, &mut acc);
        let mean = acc.1 / acc.0;
        (mean, acc.2 / acc.0 - mean * mean)
    }

    #[test]
    fn meelis_moments_match_enumeration() {
        for v in 1..=12u32 {
            for k in 1..=12u32 {
                if v * k > 12 {
                    continue;
                }
                for t in 0..=v * k {
                    let (e, var) = meelis_moments(v, k, t as u64);
                    let (e0, var0) = enumerate_moments(v, k, t);
                    assert!((e - e0).abs() < 1e-9, "mean v={v} k={k} t={t}");
                    assert!((var - var0).abs() < 1e-9, "var v={v} k={k} t={t}: {var} vs {var0}");
                }
            }
        }
    }

    #[test]
    fn meelis_two_balanced_pairs() {
        let (e, var) = meelis_moments(2, 2, 2);
        assert!((e - 8.0 / 3.0).abs() < 1e-14);
        // outcomes Σm² ∈ {4, 2, 4} with probabilities 1/6, 4/6, 1/6
        assert!((var - (16.0 / 3.0 + 4.0 * 4.0 / 6.0 - 64.0 / 9.0)).abs() < 1e-12);
        let d = Dataset::secondary(&[(2, 1), (2, 1)]).unwrap();
        let r = meelis_test(&d).unwrap();
        assert!(r.statistic.unwrap() < 0.0);
        assert_eq!(r.direction, Direction::UnderDispersed);
    }

    #[test]
    fn meelis_degenerate_groups_are_excluded() {
        let d = Dataset::secondary(&[(4, 1), (4, 1), (4, 2), (4, 0), (6, 2), (6, 3)]).unwrap();
        let base = meelis_test(&d).unwrap();
        let extra = Dataset::secondary(&[(9, 0), (9, 0), (3, 1)]).unwrap();
        let more = meelis_test(&d.concat(&extra).unwrap()).unwrap();
        assert_eq!(base.statistic, more.statistic);
        assert_eq!(more.groups.iter().filter(|g| g.excluded).count(), 2);

        let all_degenerate = Dataset::secondary(&[(4, 0), (4, 0), (5, 2)]).unwrap();
        let r = meelis_test(&all_degenerate).unwrap();
        assert_eq!(r.direction, Direction::Indeterminate);
        assert!(r.p_value.is_none());
    }

    #[test]
    fn james_precise_clutches_are_underdispersed() {
        let d = Dataset::secondary(&[(4, 1); 10]).unwrap();
        let r = james_test(&d).unwrap();
        assert!(r.statistic.unwrap() < 0.0);
        assert_eq!(r.direction, Direction::UnderDispersed);
        let single_sex = Dataset::secondary(&[(4, 0), (3, 0)]).unwrap();
        assert_eq!(james_test(&single_sex).unwrap().direction, Direction::Indeterminate);
    }

    #[test]
    fn pair_count_moments_match_enumeration() {
        for n in 0..=9u32 {
            for p in [0.1, 0.37, 0.5] {
                let pmf: Vec<f64> = (0..=n)
                    .map(|m| crate::special::ln_binomial_pmf(m, n, p).exp())
                    .collect();
                let t = |m: u32| (m * (n - m)) as f64;
                let et: f64 = (0..=n).map(|m| pmf[m as usize] * t(m)).sum();
                let vt: f64 = (0..=n).map(|m| pmf[m as usize] * (t(m) - et).powi(2)).sum();
                let em = n as f64 * p;
                let cov: f64 = (0..=n).map(|m| pmf[m as usize] * (t(m) - et) * (m as f64 - em)).sum();
                let (a, b, c, _) = pair_count_moments(n, p);
                assert!((a - et).abs() < 1e-10 && (b - vt).abs() < 1e-9 && (c - cov).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ratio_and_mccullagh_hand_values() {
        let d = Dataset::secondary(&[(4, 1), (4, 1), (4, 1)]).unwrap();
        assert_eq!(dispersion_ratio(&d).unwrap(), 0.0);
        let d = Dataset::secondary(&[(4, 0), (4, 1), (4, 1), (4, 2)]).unwrap();
        // Σ v s² / Σ v k p̂ q̂ = 4·(2/3) / (4·4·0.25·0.75)
        assert!((dispersion_ratio(&d).unwrap() - 8.0 / 9.0).abs() < 1e-14);
        assert!((mccullagh_dispersion(&d).unwrap() - 8.0 / 9.0).abs() < 1e-14);
        let single = Dataset::secondary(&[(4, 0), (4, 0), (3, 3)]).unwrap();
        assert!(matches!(dispersion_ratio(&single), Err(Error::Degenerate(_))));
        assert!(matches!(mccullagh_dispersion(&Dataset::secondary(&[(4, 0), (3, 0)]).unwrap()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn statistics_ignore_clutch_order() {
        let pairs = [(5, 1), (5, 2), (7, 1), (5, 0), (7, 3), (7, 2), (3, 1), (3, 2)];
        let mut rev = pairs;
        rev.reverse();
        let a = Dataset::secondary(&pairs).unwrap();
        let b = Dataset::secondary(&rev).unwrap();
        assert_eq!(meelis_test(&a).unwrap().statistic, meelis_test(&b).unwrap().statistic);
        let ja = james_test(&a).unwrap().statistic.unwrap();
        let jb = james_test(&b).unwrap().statistic.unwrap();
        assert!((ja - jb).abs() < 1e-12);
    }

    #[test]
    fn empty_clutches_are_dropped() {
        let d = Dataset::secondary(&[(0, 0), (4, 1), (4, 2), (4, 0)]).unwrap();
        assert_eq!(meelis_test(&d).unwrap().dropped_empty, 1);
    }
}
