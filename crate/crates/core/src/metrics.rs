//! Dataset-level evaluation: count classification metrics, threshold
//! sweeps, calibration and entropy-based uncertainty analysis.
//!
//! Every entry point first scores each sample once per labeling config
//! ([`score_corpus`]) and then derives its report from those scores, so a
//! single pass can feed several reports. Scoring fans out over samples;
//! reductions run in sample order, which keeps reports bit-identical for
//! any thread count.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::LabelingConfig;
use crate::par::{try_map_indices, Parallelism};
use crate::pbdist::{bin_of, check_bins, BinnedCountDistribution, CountReport};
use crate::volume::{load_mask, load_volume, BinaryMask, ProbabilityVolume};

pub const DEFAULT_CALIBRATION_BINS: usize = 10;
pub const ENTROPY_HISTOGRAM_BINS: usize = 20;

/// A probability map with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub volume: ProbabilityVolume,
    pub count: usize,
    pub mask: Option<BinaryMask>,
}

/// Random access to labeled samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads sample `index`; the mask is only required when `with_mask`.
    fn load(&self, index: usize, with_mask: bool) -> Result<LabeledVolume>;
}

impl SampleSource for [LabeledVolume] {
    fn len(&self) -> usize {
        <[LabeledVolume]>::len(self)
    }

    fn load(&self, index: usize, with_mask: bool) -> Result<LabeledVolume> {
        let s = &self[index];
        if with_mask && s.mask.is_none() {
            return Err(Error::EmptyInput(format!("sample {index} has no mask")));
        }
        Ok(s.clone())
    }
}

impl SampleSource for Vec<LabeledVolume> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn load(&self, index: usize, with_mask: bool) -> Result<LabeledVolume> {
        self.as_slice().load(index, with_mask)
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub volume: PathBuf,
    pub count: usize,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

/// A JSON Lines dataset listing. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone)]
pub struct Manifest {
    records: Vec<EvalRecord>,
    base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::unreadable(path, e))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<EvalRecord>(l).map_err(|e| {
                    Error::UnsupportedFormat(format!("{}:{}: {e}", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if records.is_empty() {
            return Err(Error::EmptyInput(format!(
                "{} lists no records",
                path.display()
            )));
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { records, base_dir })
    }

    pub fn from_records(records: Vec<EvalRecord>, base_dir: impl Into<PathBuf>) -> Self {
        Manifest {
            records,
            base_dir: base_dir.into(),
        }
    }

    pub fn records(&self) -> &[EvalRecord] {
        &self.records
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

impl SampleSource for Manifest {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn load(&self, index: usize, with_mask: bool) -> Result<LabeledVolume> {
        let rec = &self.records[index];
        let volume = load_volume(self.resolve(&rec.volume))?;
        let mask = if with_mask {
            let path = rec
                .mask
                .as_ref()
                .ok_or_else(|| Error::EmptyInput(format!("record {index} has no mask")))?;
            Some(load_mask(self.resolve(path))?)
        } else {
            None
        };
        Ok(LabeledVolume {
            volume,
            count: rec.count,
            mask,
        })
    }
}

/// Counting method under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Argmax of the binned Poisson-binomial distribution.
    Pb,
    /// Connected-component count.
    Cc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pb => "pb",
            Method::Cc => "cc",
        }
    }
}

/// What one labeling config yields for one sample.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub binned: BinnedCountDistribution,
    /// Predicted class of the Poisson-binomial method.
    pub pb_class: usize,
    /// Raw connected-component count.
    pub cc_count: usize,
    pub normalized_entropy: f64,
}

impl Outcome {
    pub fn predicted_class(&self, method: Method, bins: usize) -> usize {
        match method {
            Method::Pb => self.pb_class,
            Method::Cc => bin_of(self.cc_count, bins),
        }
    }

    /// Per-class confidence the method assigns.
    pub fn confidences(&self, method: Method, bins: usize) -> Vec<f64> {
        match method {
            Method::Pb => self.binned.bin_probs().to_vec(),
            Method::Cc => {
                let mut one_hot = vec![0.0; bins];
                one_hot[bin_of(self.cc_count, bins)] = 1.0;
                one_hot
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleScore {
    pub label: usize,
    /// One entry per labeling config, in the order given.
    pub outcomes: Vec<Outcome>,
}

/// Scores every sample under each config.
pub fn score_corpus<S: SampleSource + ?Sized>(
    source: &S,
    cfgs: &[LabelingConfig],
    bins: usize,
    mode: Parallelism,
) -> Result<Vec<SampleScore>> {
    check_bins(bins)?;
    for c in cfgs {
        c.validate()?;
    }
    if source.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate".into()));
    }
    try_map_indices(source.len(), mode, |i| {
        let sample = source.load(i, false)?;
        let outcomes = cfgs
            .iter()
            .map(|cfg| {
                let report = crate::pbdist::count_volume(&sample.volume, cfg, bins)?;
                Ok(outcome_of(&report))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleScore {
            label: sample.count,
            outcomes,
        })
    })
}

fn outcome_of(report: &CountReport) -> Outcome {
    Outcome {
        pb_class: report.argmax_count,
        cc_count: report.k(),
        normalized_entropy: report.normalized_entropy,
        binned: report.binned.clone(),
    }
}

/// Count classification quality over `B` classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// `confusion[label][prediction]`.
    pub confusion: Vec<Vec<usize>>,
}

impl CountMetrics {
    /// Both inputs are raw counts; they are binned into `bins` classes.
    /// A class never predicted has precision 0, a class never labeled has
    /// recall 0, and a class absent from both contributes 0 everywhere.
    pub fn from_counts(predictions: &[usize], labels: &[usize], bins: usize) -> Result<Self> {
        check_bins(bins)?;
        if predictions.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions vs {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyInput("no samples to evaluate".into()));
        }
        let mut confusion = vec![vec![0usize; bins]; bins];
        for (&p, &l) in predictions.iter().zip(labels) {
            confusion[bin_of(l, bins)][bin_of(p, bins)] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let bins = confusion.len();
        let n: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..bins).map(|b| confusion[b][b]).sum();
        let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
        for b in 0..bins {
            let tp = confusion[b][b] as f64;
            let predicted: usize = (0..bins).map(|l| confusion[l][b]).sum();
            let actual: usize = confusion[b].iter().sum();
            let precision = if predicted > 0 {
                tp / predicted as f64
            } else {
                0.0
            };
            let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            sp += precision;
            sr += recall;
            sf += f1;
        }
        let k = bins as f64;
        CountMetrics {
            n,
            accuracy: correct as f64 / n as f64,
            macro_f1: sf / k,
            macro_precision: sp / k,
            macro_recall: sr / k,
            confusion,
        }
    }
}

/// Metrics of `method` under config `cfg_index` of a scoring pass.
pub fn metrics_from_scores(
    scores: &[SampleScore],
    cfg_index: usize,
    method: Method,
    bins: usize,
) -> Result<CountMetrics> {
    let preds: Vec<usize> = scores
        .iter()
        .map(|s| s.outcomes[cfg_index].predicted_class(method, bins))
        .collect();
    let labels: Vec<usize> = scores.iter().map(|s| s.label).collect();
    CountMetrics::from_counts(&preds, &labels, bins)
}

pub fn evaluate<S: SampleSource + ?Sized>(
    source: &S,
    cfg: &LabelingConfig,
    bins: usize,
    method: Method,
) -> Result<CountMetrics> {
    let scores = score_corpus(source, &[*cfg], bins, Parallelism::default())?;
    metrics_from_scores(&scores, 0, method, bins)
}

/// Poisson-binomial predictor: argmax of the binned count distribution.
pub fn eval_counts<S: SampleSource + ?Sized>(
    source: &S,
    cfg: &LabelingConfig,
    bins: usize,
) -> Result<CountMetrics> {
    evaluate(source, cfg, bins, Method::Pb)
}

/// Connected-component baseline.
pub fn eval_cc<S: SampleSource + ?Sized>(
    source: &S,
    cfg: &LabelingConfig,
    bins: usize,
) -> Result<CountMetrics> {
    evaluate(source, cfg, bins, Method::Cc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: Method,
    pub tau: f64,
    #[serde(flatten)]
    pub metrics: CountMetrics,
}

pub fn sweep_from_scores(
    scores: &[SampleScore],
    taus: &[f64],
    bins: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(taus.len() * 2);
    for method in [Method::Cc, Method::Pb] {
        for (t, &tau) in taus.iter().enumerate() {
            rows.push(SweepRow {
                method,
                tau,
                metrics: metrics_from_scores(scores, t, method, bins)?,
            });
        }
    }
    Ok(rows)
}

/// One row per `(method, tau)`: all connected-component rows first, then
/// the Poisson-binomial rows, each in `taus` order.
pub fn sweep_threshold<S: SampleSource + ?Sized>(
    source: &S,
    taus: &[f64],
    cfg_base: &LabelingConfig,
    bins: usize,
) -> Result<Vec<SweepRow>> {
    if taus.is_empty() {
        return Err(Error::EmptyInput("no thresholds to sweep".into()));
    }
    let cfgs: Vec<LabelingConfig> = taus.iter().map(|&t| cfg_base.with_tau(t)).collect();
    let scores = score_corpus(source, &cfgs, bins, Parallelism::default())?;
    sweep_from_scores(&scores, taus, bins)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("method,tau,n,accuracy,macro_f1,macro_precision,macro_recall\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method.name(),
            r.tau,
            m.n,
            m.accuracy,
            m.macro_f1,
            m.macro_precision,
            m.macro_recall
        ));
    }
    out
}

/// Reliability statistics over equal-width confidence bins.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub bin_edges: Vec<f64>,
    /// Mean confidence per bin; `None` for empty bins.
    pub bin_confidence: Vec<Option<f64>>,
    /// Empirical frequency of the event per bin; `None` for empty bins.
    pub bin_accuracy: Vec<Option<f64>>,
    pub bin_count: Vec<usize>,
    pub ece: f64,
    pub mce: f64,
}

impl CalibrationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,confidence,accuracy\n");
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in 0..self.bin_count.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.bin_edges[b],
                self.bin_edges[b + 1],
                self.bin_count[b],
                fmt(self.bin_confidence[b]),
                fmt(self.bin_accuracy[b])
            ));
        }
        out
    }
}

/// Running per-bin sums of `(confidence, outcome)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBins {
    confidence: Vec<f64>,
    hits: Vec<f64>,
    count: Vec<usize>,
}

impl CalibrationBins {
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidConfig(format!(
                "calibration needs at least 2 bins, got {m}"
            )));
        }
        Ok(CalibrationBins {
            confidence: vec![0.0; m],
            hits: vec![0.0; m],
            count: vec![0; m],
        })
    }

    #[inline]
    pub fn add(&mut self, confidence: f64, hit: bool) {
        let m = self.count.len();
        let b = ((confidence * m as f64) as usize).min(m - 1);
        self.confidence[b] += confidence;
        self.hits[b] += f64::from(u8::from(hit));
        self.count[b] += 1;
    }

    pub fn merge(&mut self, other: &CalibrationBins) {
        for b in 0..self.count.len() {
            self.confidence[b] += other.confidence[b];
            self.hits[b] += other.hits[b];
            self.count[b] += other.count[b];
        }
    }

    pub fn finish(&self) -> CalibrationReport {
        let m = self.count.len();
        let total: usize = self.count.iter().sum();
        let mut bin_confidence = Vec::with_capacity(m);
        let mut bin_accuracy = Vec::with_capacity(m);
        let (mut ece, mut mce) = (0.0f64, 0.0f64);
        for b in 0..m {
            let n = self.count[b];
            if n == 0 {
                bin_confidence.push(None);
                bin_accuracy.push(None);
                continue;
            }
            let conf = self.confidence[b] / n as f64;
            let acc = self.hits[b] / n as f64;
            let gap = (acc - conf).abs();
            ece += n as f64 / total as f64 * gap;
            mce = mce.max(gap);
            bin_confidence.push(Some(conf));
            bin_accuracy.push(Some(acc));
        }
        CalibrationReport {
            bin_edges: (0..=m).map(|b| b as f64 / m as f64).collect(),
            bin_confidence,
            bin_accuracy,
            bin_count: self.count.clone(),
            ece,
            mce,
        }
    }
}

/// Count-level calibration: every sample contributes one
/// `(predicted probability, indicator)` pair per class.
pub fn count_calibration_from_scores(
    scores: &[SampleScore],
    cfg_index: usize,
    method: Method,
    bins: usize,
    m: usize,
) -> Result<CalibrationReport> {
    let mut acc = CalibrationBins::new(m)?;
    for s in scores {
        let truth = bin_of(s.label, bins);
        for (b, conf) in s.outcomes[cfg_index]
            .confidences(method, bins)
            .into_iter()
            .enumerate()
        {
            acc.add(conf, b == truth);
        }
    }
    Ok(acc.finish())
}

pub fn count_calibration<S: SampleSource + ?Sized>(
    source: &S,
    cfg: &LabelingConfig,
    bins: usize,
    m: usize,
    method: Method,
) -> Result<CalibrationReport> {
    CalibrationBins::new(m)?;
    let scores = score_corpus(source, &[*cfg], bins, Parallelism::default())?;
    count_calibration_from_scores(&scores, 0, method, bins, m)
}

/// Voxel-level calibration of the probability maps against their masks.
pub fn voxel_calibration<S: SampleSource + ?Sized>(
    source: &S,
    m: usize,
) -> Result<CalibrationReport> {
    voxel_calibration_with(source, m, Parallelism::default())
}

pub fn voxel_calibration_with<S: SampleSource + ?Sized>(
    source: &S,
    m: usize,
    mode: Parallelism,
) -> Result<CalibrationReport> {
    let empty = CalibrationBins::new(m)?;
    if source.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate".into()));
    }
    let parts = try_map_indices(source.len(), mode, |i| {
        let s = source.load(i, true)?;
        let mask = s.mask.expect("mask requested");
        if mask.shape() != s.volume.shape() {
            return Err(Error::ShapeMismatch(format!(
                "volume {:?} vs mask {:?}",
                s.volume.shape().dims(),
                mask.shape().dims()
            )));
        }
        let mut acc = empty.clone();
        for (&p, &hit) in s.volume.data().iter().zip(mask.data()) {
            acc.add(p, hit);
        }
        Ok(acc)
    })?;
    let mut total = empty;
    for p in &parts {
        total.merge(p);
    }
    Ok(total.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterRow {
    pub threshold: f64,
    pub retained: usize,
    pub retained_fraction: f64,
    /// `None` when no sample is retained.
    pub accuracy: Option<f64>,
}

/// Accuracy of the Poisson-binomial predictor as a function of an entropy
/// cut-off.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyCurve {
    /// Samples with normalized entropy `<= threshold`.
    pub least_uncertain: Vec<FilterRow>,
    /// Samples with normalized entropy `>= threshold`.
    pub most_uncertain: Vec<FilterRow>,
}

impl EntropyCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,threshold,retained,retained_fraction,accuracy\n");
        for (name, rows) in [
            ("least_uncertain", &self.least_uncertain),
            ("most_uncertain", &self.most_uncertain),
        ] {
            for r in rows {
                out.push_str(&format!(
                    "{name},{},{},{},{}\n",
                    r.threshold,
                    r.retained,
                    r.retained_fraction,
                    r.accuracy.map(|a| a.to_string()).unwrap_or_default()
                ));
            }
        }
        out
    }
}

fn filter_row(
    scores: &[SampleScore],
    cfg_index: usize,
    threshold: f64,
    keep: impl Fn(f64) -> bool,
) -> FilterRow {
    let (mut retained, mut correct) = (0usize, 0usize);
    for s in scores {
        let o = &s.outcomes[cfg_index];
        if keep(o.normalized_entropy) {
            retained += 1;
            correct += usize::from(o.pb_class == bin_of(s.label, o.binned.bins()));
        }
    }
    FilterRow {
        threshold,
        retained,
        retained_fraction: retained as f64 / scores.len() as f64,
        accuracy: (retained > 0).then(|| correct as f64 / retained as f64),
    }
}

pub fn entropy_curve_from_scores(
    scores: &[SampleScore],
    cfg_index: usize,
    thresholds: &[f64],
) -> EntropyCurve {
    EntropyCurve {
        least_uncertain: thresholds
            .iter()
            .map(|&t| filter_row(scores, cfg_index, t, |h| h <= t))
            .collect(),
        most_uncertain: thresholds
            .iter()
            .map(|&t| filter_row(scores, cfg_index, t, |h| h >= t))
            .collect(),
    }
}

pub fn entropy_filter_curve<S: SampleSource + ?Sized>(
    source: &S,
    cfg: &LabelingConfig,
    bins: usize,
    thresholds: &[f64],
) -> Result<EntropyCurve> {
    let scores = score_corpus(source, &[*cfg], bins, Parallelism::default())?;
    Ok(entropy_curve_from_scores(&scores, 0, thresholds))
}

/// Normalized-entropy histograms split by prediction correctness.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyHistogram {
    pub edges: Vec<f64>,
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
    pub mean_correct: Option<f64>,
    pub mean_incorrect: Option<f64>,
}

impl EntropyHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,correct,incorrect\n");
        for b in 0..self.correct.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.edges[b],
                self.edges[b + 1],
                self.correct[b],
                self.incorrect[b]
            ));
        }
        out
    }
}

pub fn entropy_histogram_from_scores(scores: &[SampleScore], cfg_index: usize) -> EntropyHistogram {
    let nb = ENTROPY_HISTOGRAM_BINS;
    let mut correct = vec![0usize; nb];
    let mut incorrect = vec![0usize; nb];
    let (mut sum_c, mut sum_i) = (0.0, 0.0);
    for s in scores {
        let o = &s.outcomes[cfg_index];
        let h = o.normalized_entropy;
        let b = ((h * nb as f64) as usize).min(nb - 1);
        if o.pb_class == bin_of(s.label, o.binned.bins()) {
            correct[b] += 1;
            sum_c += h;
        } else {
            incorrect[b] += 1;
            sum_i += h;
        }
    }
    let (nc, ni) = (
        correct.iter().sum::<usize>(),
        incorrect.iter().sum::<usize>(),
    );
    EntropyHistogram {
        edges: (0..=nb).map(|b| b as f64 / nb as f64).collect(),
        mean_correct: (nc > 0).then(|| sum_c / nc as f64),
        mean_incorrect: (ni > 0).then(|| sum_i / ni as f64),
        correct,
        incorrect,
    }
}

pub fn entropy_histogram<S: SampleSource + ?Sized>(
    source: &S,
    cfg: &LabelingConfig,
    bins: usize,
) -> Result<EntropyHistogram> {
    let scores = score_corpus(source, &[*cfg], bins, Parallelism::default())?;
    Ok(entropy_histogram_from_scores(&scores, 0))
}
