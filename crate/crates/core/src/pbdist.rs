//! Poisson-binomial count distributions.
//!
//! With independent region existences, the lesion count is a sum of
//! Bernoulli variables. Its pmf follows from the recursion
//! `f(k, c) = f(k-1, c) (1 - p_k) + f(k-1, c-1) p_k` with `f(0, 0) = 1`,
//! evaluated here on a single rolling row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{label, CandidateRegion, LabelingConfig, RegionSummary};
use crate::volume::ProbabilityVolume;

/// Default number of count classes: 0, 1, 2, 3, 4+.
pub const DEFAULT_BINS: usize = 5;

/// Exact pmf of the count over `0..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CountDistribution {
    probs: Vec<f64>,
}

/// Count pmf folded into `B` classes `0, 1, ..., B-2, (B-1)+`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BinnedCountDistribution {
    bin_probs: Vec<f64>,
}

pub(crate) fn check_probabilities(p: &[f64]) -> Result<()> {
    match p.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(Error::ProbabilityOutOfRange {
            index,
            value: p[index],
        }),
        None => Ok(()),
    }
}

pub(crate) fn check_bins(bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::InvalidConfig(format!(
            "bin count must be at least 2, got {bins}"
        )));
    }
    Ok(())
}

/// Class of a count among `bins` classes.
#[inline]
pub fn bin_of(count: usize, bins: usize) -> usize {
    count.min(bins - 1)
}

/// Folds one more Bernoulli(`p`) into `row`, which grows by one entry.
#[inline]
pub(crate) fn convolve_bernoulli(row: &mut Vec<f64>, p: f64) {
    let q = 1.0 - p;
    row.push(0.0);
    for c in (1..row.len()).rev() {
        row[c] = row[c] * q + row[c - 1] * p;
    }
    row[0] *= q;
}

/// Poisson-binomial pmf of the given success probabilities, in O(K²) time
/// and O(K) memory.
pub fn pb_pmf(p: &[f64]) -> Result<CountDistribution> {
    check_probabilities(p)?;
    let mut row = Vec::with_capacity(p.len() + 1);
    row.push(1.0);
    for &pk in p {
        convolve_bernoulli(&mut row, pk);
    }
    Ok(CountDistribution { probs: row })
}

impl CountDistribution {
    /// Wraps an existing pmf; entries must be non-negative and sum to one.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidConfig(
                "pmf entries must be non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("pmf sums to {total}")));
        }
        Ok(CountDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Number of Bernoulli components.
    pub fn k(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(c, &q)| c as f64 * q)
            .sum()
    }

    pub fn bin(&self, bins: usize) -> Result<BinnedCountDistribution> {
        bin_pmf(self, bins)
    }
}

pub fn bin_pmf(d: &CountDistribution, bins: usize) -> Result<BinnedCountDistribution> {
    check_bins(bins)?;
    let mut bin_probs = vec![0.0; bins];
    for (c, &q) in d.probs.iter().enumerate() {
        bin_probs[bin_of(c, bins)] += q;
    }
    Ok(BinnedCountDistribution { bin_probs })
}

impl BinnedCountDistribution {
    pub fn from_bin_probs(bin_probs: Vec<f64>) -> Result<Self> {
        check_bins(bin_probs.len())?;
        Ok(BinnedCountDistribution { bin_probs })
    }

    pub fn bin_probs(&self) -> &[f64] {
        &self.bin_probs
    }

    pub fn bins(&self) -> usize {
        self.bin_probs.len()
    }

    /// Most probable class; ties go to the smaller count.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (b, &q) in self.bin_probs.iter().enumerate() {
            if q > self.bin_probs[best] {
                best = b;
            }
        }
        best
    }

    /// Shannon entropy in nats, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .bin_probs
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|&q| q * q.ln())
            .sum::<f64>()
    }

    /// Entropy divided by `ln(B)`, in `[0, 1]`.
    pub fn normalized_entropy(&self) -> f64 {
        self.entropy() / (self.bins() as f64).ln()
    }
}

/// Output of the full segmentation-map-to-count pipeline.
#[derive(Debug, Clone)]
pub struct CountReport {
    pub regions: Vec<CandidateRegion>,
    pub pmf: CountDistribution,
    pub binned: BinnedCountDistribution,
    pub argmax_count: usize,
    pub expected_count: f64,
    pub entropy: f64,
    pub normalized_entropy: f64,
}

impl CountReport {
    pub fn from_regions(regions: Vec<CandidateRegion>, bins: usize) -> Result<Self> {
        let p: Vec<f64> = regions.iter().map(|r| r.existence_prob).collect();
        let pmf = pb_pmf(&p)?;
        let binned = pmf.bin(bins)?;
        Ok(CountReport {
            argmax_count: binned.argmax(),
            expected_count: pmf.mean(),
            entropy: binned.entropy(),
            normalized_entropy: binned.normalized_entropy(),
            regions,
            pmf,
            binned,
        })
    }

    pub fn k(&self) -> usize {
        self.regions.len()
    }

    pub fn to_json(&self, vol: &ProbabilityVolume) -> CountReportJson {
        let shape = vol.shape();
        CountReportJson {
            k: self.k(),
            pmf: self.pmf.probs.clone(),
            binned: self.binned.bin_probs.clone(),
            argmax_count: self.argmax_count,
            expected_count: self.expected_count,
            entropy: self.entropy,
            normalized_entropy: self.normalized_entropy,
            regions: self.regions.iter().map(|r| r.summary(&shape)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReportJson {
    #[serde(rename = "K")]
    pub k: usize,
    pub pmf: Vec<f64>,
    pub binned: Vec<f64>,
    pub argmax_count: usize,
    pub expected_count: f64,
    pub entropy: f64,
    pub normalized_entropy: f64,
    pub regions: Vec<RegionSummary>,
}

/// Labels `vol`, aggregates each region by its max voxel and returns the
/// count distribution with its summaries.
pub fn count_volume(
    vol: &ProbabilityVolume,
    cfg: &LabelingConfig,
    bins: usize,
) -> Result<CountReport> {
    check_bins(bins)?;
    CountReport::from_regions(label(vol, cfg)?, bins)
}

/// Relative frequencies of sampled counts, e.g. one count per Monte Carlo
/// sample of a segmentation map.
pub fn empirical_count_distribution(
    counts: &[usize],
    bins: usize,
) -> Result<BinnedCountDistribution> {
    check_bins(bins)?;
    if counts.is_empty() {
        return Err(Error::EmptyInput("no counts given".into()));
    }
    let mut tally = vec![0usize; bins];
    for &c in counts {
        tally[bin_of(c, bins)] += 1;
    }
    let n = counts.len() as f64;
    Ok(BinnedCountDistribution {
        bin_probs: tally.into_iter().map(|t| t as f64 / n).collect(),
    })
}

#[cfg(test)]
pub(crate) mod oracle {
    /// Exact pmf by enumerating all `2^K` existence outcomes.
    pub fn brute_force_pmf(p: &[f64]) -> Vec<f64> {
        let k = p.len();
        let mut out = vec![0.0; k + 1];
        for mask in 0u32..(1u32 << k) {
            let mut prob = 1.0;
            for (j, &pj) in p.iter().enumerate() {
                prob *= if mask >> j & 1 == 1 { pj } else { 1.0 - pj };
            }
            out[mask.count_ones() as usize] += prob;
        }
        out
    }
}
