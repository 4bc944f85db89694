//! Count loss and its gradient with respect to voxel probabilities.
//!
//! The loss is the cross-entropy between the binned count distribution and
//! the one-hot count label. Gradients reach region probabilities by reverse
//! accumulation through the Poisson-binomial recursion, and voxels through
//! the max aggregation, so only each region's argmax voxel receives one.
//! Region assignment itself is treated as a constant.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::labeling::{label, CandidateRegion, LabelingConfig};
use crate::pbdist::{bin_of, check_bins, check_probabilities, convolve_bernoulli, pb_pmf};
use crate::volume::ProbabilityVolume;

/// Lower bound applied to the label's probability before taking its log.
pub const LOG_FLOOR: f64 = 1e-300;

/// Ground-truth lesion count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CountLabel(pub usize);

/// Sparse gradient of the count loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CountGradient {
    pub dloss_dregion: Vec<f64>,
    /// `(linear index, derivative)` for each region's argmax voxel, sorted by
    /// index. Every other voxel has derivative zero.
    pub dloss_dvoxel: Vec<(usize, f64)>,
}

impl CountGradient {
    fn scatter(regions: &[CandidateRegion], dloss_dregion: Vec<f64>) -> Self {
        let mut dloss_dvoxel: Vec<(usize, f64)> = regions
            .iter()
            .zip(&dloss_dregion)
            .map(|(r, &g)| (r.argmax_index, g))
            .collect();
        dloss_dvoxel.sort_unstable_by_key(|&(i, _)| i);
        CountGradient {
            dloss_dregion,
            dloss_dvoxel,
        }
    }

    /// Dense gradient over all `n` voxels.
    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for &(i, g) in &self.dloss_dvoxel {
            out[i] = g;
        }
        out
    }

    /// Gradient with components zeroed where a descent step would leave
    /// `[0, 1]`. This is what a bounded optimizer can act on.
    pub fn projected(&self, vol: &ProbabilityVolume) -> Vec<(usize, f64)> {
        self.dloss_dvoxel
            .iter()
            .map(|&(i, g)| {
                let v = vol.get(i);
                let blocked = (v >= 1.0 && g < 0.0) || (v <= 0.0 && g > 0.0);
                (i, if blocked { 0.0 } else { g })
            })
            .collect()
    }
}

/// Forward recursion with every intermediate row kept; row `k` holds the
/// pmf of the first `k` components.
struct RecursionTape {
    rows: Vec<f64>,
}

impl RecursionTape {
    fn record(p: &[f64]) -> Self {
        let k = p.len();
        let mut rows = Vec::with_capacity((k + 1) * (k + 2) / 2);
        let mut row = Vec::with_capacity(k + 1);
        row.push(1.0);
        rows.extend_from_slice(&row);
        for &pk in p {
            convolve_bernoulli(&mut row, pk);
            rows.extend_from_slice(&row);
        }
        RecursionTape { rows }
    }

    fn row(&self, k: usize) -> &[f64] {
        let start = k * (k + 1) / 2;
        &self.rows[start..start + k + 1]
    }
}

/// Gradient of `sum_c seed[c] * pmf[c]` with respect to each `p_k`, where
/// `seed` has `K + 1` entries. O(K²) time.
fn pull_back(p: &[f64], tape: &RecursionTape, seed: Vec<f64>) -> Vec<f64> {
    let mut grad = vec![0.0; p.len()];
    let mut adj = seed;
    for k in (1..=p.len()).rev() {
        let pk = p[k - 1];
        let prev = tape.row(k - 1);
        // d f(k, c) / d p_k = f(k-1, c-1) - f(k-1, c), with out-of-range terms 0.
        let mut g = 0.0;
        for (c, &a) in adj.iter().enumerate() {
            let lower = if c > 0 { prev[c - 1] } else { 0.0 };
            let same = if c < k { prev[c] } else { 0.0 };
            g += a * (lower - same);
        }
        grad[k - 1] = g;
        adj = (0..k)
            .map(|c| adj[c] * (1.0 - pk) + adj[c + 1] * pk)
            .collect();
    }
    grad
}

fn label_mass(pmf: &[f64], target: usize, bins: usize) -> f64 {
    pmf.iter()
        .enumerate()
        .filter(|&(c, _)| bin_of(c, bins) == target)
        .map(|(_, &q)| q)
        .sum()
}

/// Cross-entropy of the binned count distribution against label `c`.
pub fn count_loss(p: &[f64], c: CountLabel, bins: usize) -> Result<f64> {
    check_bins(bins)?;
    let pmf = pb_pmf(p)?;
    let q = label_mass(pmf.probs(), bin_of(c.0, bins), bins);
    Ok(-q.max(LOG_FLOOR).ln())
}

/// Loss and its gradient with respect to each region probability. When the
/// label's probability sits below the log floor the loss is flat there and
/// the gradient is zero.
pub fn count_loss_grad(p: &[f64], c: CountLabel, bins: usize) -> Result<(f64, Vec<f64>)> {
    check_bins(bins)?;
    check_probabilities(p)?;
    let tape = RecursionTape::record(p);
    let pmf = tape.row(p.len());
    let target = bin_of(c.0, bins);
    let q = label_mass(pmf, target, bins);
    let loss = -q.max(LOG_FLOOR).ln();
    if q < LOG_FLOOR {
        return Ok((loss, vec![0.0; p.len()]));
    }
    let seed = (0..=p.len())
        .map(|count| {
            if bin_of(count, bins) == target {
                -1.0 / q
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, pull_back(p, &tape, seed)))
}

/// Normalized entropy of the binned count distribution and its gradient
/// with respect to each region probability.
pub fn entropy_grad(p: &[f64], bins: usize) -> Result<(f64, Vec<f64>)> {
    check_bins(bins)?;
    check_probabilities(p)?;
    let tape = RecursionTape::record(p);
    let pmf = tape.row(p.len());
    let mut binned = vec![0.0; bins];
    for (c, &q) in pmf.iter().enumerate() {
        binned[bin_of(c, bins)] += q;
    }
    let norm = (bins as f64).ln();
    let entropy = -binned
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum::<f64>()
        / norm;
    let dh_dbin: Vec<f64> = binned
        .iter()
        .map(|&q| -(q.max(LOG_FLOOR).ln() + 1.0) / norm)
        .collect();
    let seed = (0..=p.len()).map(|c| dh_dbin[bin_of(c, bins)]).collect();
    Ok((entropy, pull_back(p, &tape, seed)))
}

fn region_probs(regions: &[CandidateRegion]) -> Vec<f64> {
    regions.iter().map(|r| r.existence_prob).collect()
}

/// Count loss of a volume and its sparse voxel gradient.
pub fn volume_loss_grad(
    vol: &ProbabilityVolume,
    cfg: &LabelingConfig,
    c: CountLabel,
    bins: usize,
) -> Result<(f64, CountGradient)> {
    let regions = label(vol, cfg)?;
    let (loss, g) = count_loss_grad(&region_probs(&regions), c, bins)?;
    Ok((loss, CountGradient::scatter(&regions, g)))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckRow {
    pub region: usize,
    pub voxel: usize,
    pub analytic: f64,
    pub fd: f64,
    pub abs_err: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub regions: Vec<GradCheckRow>,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares analytic region gradients with central differences obtained by
/// nudging each region's argmax voxel and re-running aggregation, counting
/// and the loss on the frozen region assignment.
pub fn grad_check(
    vol: &ProbabilityVolume,
    cfg: &LabelingConfig,
    c: CountLabel,
    bins: usize,
    step: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "step must be positive, got {step}"
        )));
    }
    let regions = label(vol, cfg)?;
    let (_, analytic) = count_loss_grad(&region_probs(&regions), c, bins)?;

    let frozen_loss = |v: &ProbabilityVolume| -> Result<f64> {
        let p: Vec<f64> = regions
            .iter()
            .map(|r| crate::aggregate::existence_probability(v, &r.voxels).map(|(prob, _)| prob))
            .collect::<Result<_>>()?;
        count_loss(&p, c, bins)
    };

    let mut rows = Vec::with_capacity(regions.len());
    for (r, &a) in regions.iter().zip(&analytic) {
        let v = vol.get(r.argmax_index);
        let up = (v + step).min(1.0);
        let down = (v - step).max(0.0);
        let l_up = frozen_loss(&vol.with_value(r.argmax_index, up)?)?;
        let l_down = frozen_loss(&vol.with_value(r.argmax_index, down)?)?;
        let fd = (l_up - l_down) / (up - down);
        rows.push(GradCheckRow {
            region: r.id,
            voxel: r.argmax_index,
            analytic: a,
            fd,
            abs_err: (a - fd).abs(),
            rel_err: relative_error(a, fd),
        });
    }
    Ok(GradCheckReport {
        max_abs_err: rows.iter().map(|r| r.abs_err).fold(0.0, f64::max),
        max_rel_err: rows.iter().map(|r| r.rel_err).fold(0.0, f64::max),
        regions: rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Minimize the count loss against the target label.
    MatchCount,
    /// Maximize the normalized entropy of the binned count distribution.
    MaximizeEntropy,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub target: CountLabel,
    pub bins: usize,
    pub steps: usize,
    pub lr: f64,
    pub mode: FitMode,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Objective before each step, followed by the objective of the final
    /// volume (`steps + 1` entries). Count loss for `MatchCount`, normalized
    /// entropy for `MaximizeEntropy`.
    pub trajectory: Vec<f64>,
    pub final_volume: ProbabilityVolume,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Plain gradient descent on voxel logits, relabeling on every step.
/// Voxels at exactly 0 or 1 have infinite logits and stay fixed.
pub fn fit(init: &ProbabilityVolume, cfg: &LabelingConfig, opts: &FitOptions) -> Result<FitResult> {
    check_bins(opts.bins)?;
    if opts.steps == 0 {
        return Err(Error::InvalidConfig("fit needs at least one step".into()));
    }
    if !(opts.lr > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "lr must be positive, got {}",
            opts.lr
        )));
    }
    let mut values = init.data().to_vec();
    let mut logits: Vec<f64> = values.iter().map(|&v| logit(v)).collect();
    let mut trajectory = Vec::with_capacity(opts.steps + 1);

    let evaluate = |values: &[f64]| -> Result<(f64, Vec<(usize, f64)>)> {
        let vol = ProbabilityVolume::new(init.shape(), values.to_vec())?;
        let regions = label(&vol, cfg)?;
        let p = region_probs(&regions);
        // Descent direction in probability space, per region argmax.
        let (objective, dir) = match opts.mode {
            FitMode::MatchCount => count_loss_grad(&p, opts.target, opts.bins)?,
            FitMode::MaximizeEntropy => {
                let (h, g) = entropy_grad(&p, opts.bins)?;
                (h, g.into_iter().map(|x| -x).collect())
            }
        };
        let sparse = regions.iter().map(|r| r.argmax_index).zip(dir).collect();
        Ok((objective, sparse))
    };

    for _ in 0..opts.steps {
        let (objective, grad) = evaluate(&values)?;
        trajectory.push(objective);
        for (i, g) in grad {
            let v = values[i];
            let dz = g * v * (1.0 - v);
            if dz != 0.0 {
                logits[i] -= opts.lr * dz;
                values[i] = sigmoid(logits[i]);
            }
        }
    }
    let (objective, _) = evaluate(&values)?;
    trajectory.push(objective);
    Ok(FitResult {
        trajectory,
        final_volume: ProbabilityVolume::new(init.shape(), values)?,
    })
}
