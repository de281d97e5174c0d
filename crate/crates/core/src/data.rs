//! Offspring-group count data.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether counts were taken at laying (primary) or at maturity (secondary).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    Primary,
    Secondary,
}

impl fmt::Display for DataMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataMode::Primary => "primary",
            DataMode::Secondary => "secondary",
        })
    }
}

impl FromStr for DataMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "primary" => Ok(DataMode::Primary),
            "secondary" => Ok(DataMode::Secondary),
            other => Err(Error::InvalidConfig(format!("unknown data mode '{other}'"))),
        }
    }
}

/// One observed clutch: `size` offspring of which `males` are male.
///
/// In primary mode these are (N, M); in secondary mode (n, m).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Clutch {
    pub size: u32,
    pub males: u32,
    /// Recorded developmental deaths, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deaths: Option<u32>,
}

impl Clutch {
    pub fn new(size: u32, males: u32) -> Self {
        Clutch {
            size,
            males,
            deaths: None,
        }
    }

    pub fn with_deaths(size: u32, males: u32, deaths: u32) -> Self {
        Clutch {
            size,
            males,
            deaths: Some(deaths),
        }
    }

    pub fn females(&self) -> u32 {
        self.size - self.males
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    mode: DataMode,
    clutches: Vec<Clutch>,
}

impl Dataset {
    pub fn new(mode: DataMode, clutches: Vec<Clutch>) -> Result<Self> {
        for (i, c) in clutches.iter().enumerate() {
            if c.males > c.size {
                return Err(Error::Infeasible(format!(
                    "clutch {}: {} males exceeds size {}",
                    i + 1,
                    c.males,
                    c.size
                )));
            }
            if mode == DataMode::Primary {
                if let Some(dead) = c.deaths {
                    if dead > c.size {
                        return Err(Error::Infeasible(format!(
                            "clutch {}: {dead} deaths exceeds {} eggs",
                            i + 1,
                            c.size
                        )));
                    }
                }
            }
        }
        Ok(Dataset { mode, clutches })
    }

    /// Builds a dataset from `(size, males)` pairs.
    pub fn from_pairs(mode: DataMode, pairs: &[(u32, u32)]) -> Result<Self> {
        Self::new(mode, pairs.iter().map(|&(n, m)| Clutch::new(n, m)).collect())
    }

    pub fn secondary(pairs: &[(u32, u32)]) -> Result<Self> {
        Self::from_pairs(DataMode::Secondary, pairs)
    }

    pub fn primary(pairs: &[(u32, u32)]) -> Result<Self> {
        Self::from_pairs(DataMode::Primary, pairs)
    }

    pub fn mode(&self) -> DataMode {
        self.mode
    }

    pub fn clutches(&self) -> &[Clutch] {
        &self.clutches
    }

    pub fn len(&self) -> usize {
        self.clutches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clutches.is_empty()
    }

    pub fn total_offspring(&self) -> u64 {
        self.clutches.iter().map(|c| c.size as u64).sum()
    }

    pub fn total_males(&self) -> u64 {
        self.clutches.iter().map(|c| c.males as u64).sum()
    }

    /// Σm / Σn, or `None` when there are no offspring.
    pub fn pooled_sex_ratio(&self) -> Option<f64> {
        let n = self.total_offspring();
        (n > 0).then(|| self.total_males() as f64 / n as f64)
    }

    pub fn max_size(&self) -> u32 {
        self.clutches.iter().map(|c| c.size).max().unwrap_or(0)
    }

    /// Number of clutches of each size.
    pub fn size_histogram(&self) -> BTreeMap<u32, usize> {
        let mut h = BTreeMap::new();
        for c in &self.clutches {
            *h.entry(c.size).or_insert(0) += 1;
        }
        h
    }

    /// Distinct `(size, males)` pairs with multiplicities, in sorted order.
    pub fn pair_counts(&self) -> Vec<((u32, u32), u32)> {
        let mut h: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        for c in &self.clutches {
            *h.entry((c.size, c.males)).or_insert(0) += 1;
        }
        h.into_iter().collect()
    }

    pub fn has_deaths(&self) -> bool {
        !self.clutches.is_empty() && self.clutches.iter().all(|c| c.deaths.is_some())
    }

    /// Concatenation of two datasets with the same mode.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.mode != other.mode {
            return Err(Error::InvalidConfig("cannot concatenate datasets of different modes".into()));
        }
        let mut clutches = self.clutches.clone();
        clutches.extend_from_slice(&other.clutches);
        Ok(Dataset {
            mode: self.mode,
            clutches,
        })
    }

    /// Keeps the clutches with no recorded deaths and relabels them as primary.
    pub fn filter_zero_mortality(&self) -> Result<Dataset> {
        if !self.has_deaths() {
            return Err(Error::InvalidConfig(
                "dataset has no deaths column; cannot select mortality-free clutches".into(),
            ));
        }
        let clutches = self
            .clutches
            .iter()
            .filter(|c| c.deaths == Some(0))
            .copied()
            .collect();
        Ok(Dataset {
            mode: DataMode::Primary,
            clutches,
        })
    }

    /// Drops empty clutches; returns the filtered dataset and how many were removed.
    pub fn without_empty(&self) -> (Dataset, usize) {
        let kept: Vec<Clutch> = self.clutches.iter().filter(|c| c.size > 0).copied().collect();
        let removed = self.clutches.len() - kept.len();
        (
            Dataset {
                mode: self.mode,
                clutches: kept,
            },
            removed,
        )
    }
}

/// Clutches sharing one size `k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeGroup {
    pub size: u32,
    /// Male counts of the clutches in the group (v_k = counts.len()).
    pub counts: Vec<u32>,
}

impl SizeGroup {
    pub fn clutches(&self) -> usize {
        self.counts.len()
    }

    /// T_k
    pub fn total_males(&self) -> u64 {
        self.counts.iter().map(|&m| m as u64).sum()
    }

    /// p̂_k = T_k / (k v_k); `None` for empty clutches.
    pub fn sex_ratio(&self) -> Option<f64> {
        let eggs = self.size as u64 * self.counts.len() as u64;
        (eggs > 0).then(|| self.total_males() as f64 / eggs as f64)
    }

    /// Sample variance of male counts with divisor v_k − 1; `None` when v_k < 2.
    pub fn sample_variance(&self) -> Option<f64> {
        let v = self.counts.len();
        if v < 2 {
            return None;
        }
        let mean = self.total_males() as f64 / v as f64;
        let ss: f64 = self.counts.iter().map(|&m| (m as f64 - mean).powi(2)).sum();
        Some(ss / (v - 1) as f64)
    }
}

/// Partitions clutches by size, in increasing size order.
pub fn group_by_clutch_size(dataset: &Dataset) -> Result<Vec<SizeGroup>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut groups: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for c in dataset.clutches() {
        groups.entry(c.size).or_default().push(c.males);
    }
    Ok(groups
        .into_iter()
        .map(|(size, counts)| SizeGroup { size, counts })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouping_partitions() {
        let d = Dataset::secondary(&[(4, 1), (4, 2), (5, 0)]).unwrap();
        let g = group_by_clutch_size(&d).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!((g[0].size, g[0].clutches()), (4, 2));
        assert_eq!((g[1].size, g[1].clutches()), (5, 1));
        let same = Dataset::secondary(&[(3, 1); 7]).unwrap();
        let g = group_by_clutch_size(&same).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].clutches(), 7);
        let empty = Dataset::secondary(&[]).unwrap();
        assert_eq!(group_by_clutch_size(&empty), Err(Error::EmptyDataset));
    }

    #[test]
    fn rejects_more_males_than_offspring() {
        assert!(Dataset::secondary(&[(3, 4)]).is_err());
    }

    #[test]
    fn zero_mortality_filter() {
        let d = Dataset::new(
            DataMode::Secondary,
            vec![
                Clutch::with_deaths(5, 1, 0),
                Clutch::with_deaths(4, 1, 2),
                Clutch::with_deaths(6, 2, 0),
            ],
        )
        .unwrap();
        let f = d.filter_zero_mortality().unwrap();
        assert_eq!(f.mode(), DataMode::Primary);
        assert_eq!(f.len(), 2);
        assert!(Dataset::secondary(&[(5, 1)]).unwrap().filter_zero_mortality().is_err());

        let all_zero = Dataset::new(DataMode::Secondary, vec![Clutch::with_deaths(5, 1, 0); 3]).unwrap();
        let f = all_zero.filter_zero_mortality().unwrap();
        assert_eq!(f.clutches(), all_zero.clutches());
    }

    #[test]
    fn group_statistics() {
        let g = SizeGroup {
            size: 4,
            counts: vec![0, 1, 1, 2],
        };
        assert_eq!(g.total_males(), 4);
        assert!((g.sex_ratio().unwrap() - 0.25).abs() < 1e-15);
        assert!((g.sample_variance().unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }
}
