//! Command-line front end. Every command renders its report to a string
//! (stdout or `--out`) and optionally an SVG chart (`--plot`).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::countgrad::{fit, grad_check, CountLabel, FitMode, FitOptions};
use crate::error::{Error, Result};
use crate::labeling::{cc_count, Connectivity, LabelingConfig};
use crate::metrics::{
    count_calibration_from_scores, entropy_curve_from_scores, entropy_histogram_from_scores,
    metrics_from_scores, score_corpus, sweep_csv, sweep_from_scores, voxel_calibration_with,
    Manifest, Method, DEFAULT_CALIBRATION_BINS,
};
use crate::par::{with_threads, Parallelism};
use crate::pbdist::{count_volume, empirical_count_distribution};
use crate::plot;
use crate::synth::{write_corpus, GeneratorConfig, VolumeFormat};
use crate::volume::{load_volume, save_volume};

#[derive(Debug, Parser)]
#[command(
    name = "pbcount",
    version,
    about = "Probabilistic lesion counting from segmentation maps"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOptions,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOptions {
    /// Binarization threshold; voxels strictly above it are foreground.
    #[arg(long, global = true, default_value_t = 0.1)]
    pub tau: f64,
    /// Neighbourhood: 6, 18 or 26 in 3D; 4 or 8 in 2D. Defaults to full.
    #[arg(long, global = true)]
    pub connectivity: Option<u32>,
    /// Components smaller than this are discarded.
    #[arg(long, global = true, default_value_t = 1)]
    pub min_size: usize,
    /// Count classes; the last one collects all larger counts.
    #[arg(long, global = true, default_value_t = crate::pbdist::DEFAULT_BINS)]
    pub bins: usize,
    /// Worker threads, 0 for one per core. Never changes the output.
    #[arg(long, global = true, env = "PBCOUNT_THREADS", default_value_t = 0)]
    pub threads: usize,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Also render an SVG chart.
    #[arg(long, global = true)]
    pub plot: Option<PathBuf>,
}

impl GlobalOptions {
    pub fn labeling(&self) -> Result<LabelingConfig> {
        let cfg = LabelingConfig {
            tau: self.tau,
            connectivity: match self.connectivity {
                Some(n) => Connectivity::from_neighbours(n)?,
                None => Connectivity::Full,
            },
            min_size: self.min_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Pb,
    Cc,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Pb => Method::Pb,
            MethodArg::Cc => Method::Cc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Level {
    Count,
    Voxel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    MatchCount,
    MaximizeEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Npy,
    Raw,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count distribution of one probability map.
    Count { volume: PathBuf },
    /// Connected-component count of one probability map.
    CcCount { volume: PathBuf },
    /// Count classification metrics over a manifest.
    Eval {
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Pb)]
        method: MethodArg,
    },
    /// Metrics of both methods across thresholds.
    Sweep {
        manifest: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"
        )]
        taus: Vec<f64>,
    },
    /// Calibration of count distributions or voxel probabilities.
    Calibrate {
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Level::Count)]
        level: Level,
        #[arg(long, value_enum, default_value_t = MethodArg::Pb)]
        method: MethodArg,
        /// Number of equal-width confidence bins.
        #[arg(long, default_value_t = DEFAULT_CALIBRATION_BINS)]
        calibration_bins: usize,
    },
    /// Accuracy as a function of a normalized-entropy cut-off, plus the
    /// entropy distribution of correct and incorrect predictions.
    Uncertainty {
        manifest: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
        )]
        thresholds: Vec<f64>,
    },
    /// Compare analytic count-loss gradients with finite differences.
    GradCheck {
        volume: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Gradient descent on the voxel probabilities themselves.
    Fit {
        volume: PathBuf,
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::MatchCount)]
        mode: ModeArg,
        /// Where to write the optimized volume.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Write a synthetic corpus with manifest and ground-truth registry.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        /// JSON generator config; fields not given keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        shape: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = FormatArg::Npy)]
        volume_format: FormatArg,
    },
    /// Empirical count distribution of Monte Carlo samples, given either as
    /// counts or as probability maps counted with connected components.
    McEntropy {
        #[arg(long, value_delimiter = ',', conflicts_with = "volumes")]
        counts: Option<Vec<usize>>,
        volumes: Vec<PathBuf>,
    },
}

/// A rendered report and optional chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub report: String,
    pub plot: Option<String>,
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

fn csv_rows(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Serialize)]
struct CcReport {
    count: usize,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    method: Method,
    tau: f64,
    #[serde(flatten)]
    metrics: &'a crate::metrics::CountMetrics,
}

#[derive(Serialize)]
struct UncertaintyReport<'a> {
    curve: &'a crate::metrics::EntropyCurve,
    histogram: &'a crate::metrics::EntropyHistogram,
}

#[derive(Serialize)]
struct FitReport<'a> {
    mode: FitMode,
    target: usize,
    trajectory: &'a [f64],
}

#[derive(Serialize)]
struct McReport<'a> {
    n: usize,
    binned: &'a [f64],
    argmax_count: usize,
    entropy: f64,
    normalized_entropy: f64,
}

#[derive(Serialize)]
struct SynthReport {
    manifest: PathBuf,
    registry: PathBuf,
    n_samples: usize,
}

/// Computes the report of `command` without touching stdout.
pub fn render(g: &GlobalOptions, command: &Command) -> Result<Output> {
    let format = |natural: Format| g.format.unwrap_or(natural);
    let no_plot = |report: String| Output { report, plot: None };
    match command {
        Command::Count { volume } => {
            let cfg = g.labeling()?;
            let vol = load_volume(volume)?;
            let report = count_volume(&vol, &cfg, g.bins)?;
            let text = match format(Format::Json) {
                Format::Json => json(&report.to_json(&vol)),
                Format::Csv => csv_rows(
                    "bin,probability",
                    report
                        .binned
                        .bin_probs()
                        .iter()
                        .enumerate()
                        .map(|(b, p)| format!("{b},{p}")),
                ),
            };
            Ok(no_plot(text))
        }
        Command::CcCount { volume } => {
            let cfg = g.labeling()?;
            let count = cc_count(&load_volume(volume)?, &cfg)?;
            Ok(no_plot(match format(Format::Json) {
                Format::Json => json(&CcReport { count }),
                Format::Csv => format!("count\n{count}\n"),
            }))
        }
        Command::Eval { manifest, method } => {
            let cfg = g.labeling()?;
            let m = Manifest::load(manifest)?;
            let scores = score_corpus(&m, &[cfg], g.bins, Parallelism::Parallel)?;
            let method = Method::from(*method);
            let metrics = metrics_from_scores(&scores, 0, method, g.bins)?;
            Ok(no_plot(match format(Format::Json) {
                Format::Json => json(&EvalReport {
                    method,
                    tau: cfg.tau,
                    metrics: &metrics,
                }),
                Format::Csv => csv_rows(
                    "method,tau,n,accuracy,macro_f1,macro_precision,macro_recall",
                    [format!(
                        "{},{},{},{},{},{},{}",
                        method.name(),
                        cfg.tau,
                        metrics.n,
                        metrics.accuracy,
                        metrics.macro_f1,
                        metrics.macro_precision,
                        metrics.macro_recall
                    )],
                ),
            }))
        }
        Command::Sweep { manifest, taus } => {
            let base = g.labeling()?;
            let cfgs = taus
                .iter()
                .map(|&t| {
                    let c = base.with_tau(t);
                    c.validate().map(|_| c)
                })
                .collect::<Result<Vec<_>>>()?;
            let m = Manifest::load(manifest)?;
            let scores = score_corpus(&m, &cfgs, g.bins, Parallelism::Parallel)?;
            let rows = sweep_from_scores(&scores, taus, g.bins)?;
            Ok(Output {
                report: match format(Format::Csv) {
                    Format::Csv => sweep_csv(&rows),
                    Format::Json => json(&rows),
                },
                plot: Some(plot::sweep_chart(&rows)),
            })
        }
        Command::Calibrate {
            manifest,
            level,
            method,
            calibration_bins,
        } => {
            let cfg = g.labeling()?;
            let m = Manifest::load(manifest)?;
            let (report, title) = match level {
                Level::Count => {
                    let scores = score_corpus(&m, &[cfg], g.bins, Parallelism::Parallel)?;
                    let method = Method::from(*method);
                    let r = count_calibration_from_scores(
                        &scores,
                        0,
                        method,
                        g.bins,
                        *calibration_bins,
                    )?;
                    (r, format!("count calibration ({})", method.name()))
                }
                Level::Voxel => (
                    voxel_calibration_with(&m, *calibration_bins, Parallelism::Parallel)?,
                    "voxel calibration".to_string(),
                ),
            };
            Ok(Output {
                report: match format(Format::Json) {
                    Format::Json => json(&report),
                    Format::Csv => report.to_csv(),
                },
                plot: Some(plot::reliability_diagram(&title, &report)),
            })
        }
        Command::Uncertainty {
            manifest,
            thresholds,
        } => {
            let cfg = g.labeling()?;
            let m = Manifest::load(manifest)?;
            let scores = score_corpus(&m, &[cfg], g.bins, Parallelism::Parallel)?;
            let curve = entropy_curve_from_scores(&scores, 0, thresholds);
            let histogram = entropy_histogram_from_scores(&scores, 0);
            Ok(Output {
                report: match format(Format::Json) {
                    Format::Json => json(&UncertaintyReport {
                        curve: &curve,
                        histogram: &histogram,
                    }),
                    Format::Csv => curve.to_csv(),
                },
                plot: Some(plot::entropy_curve_chart(&curve)),
            })
        }
        Command::GradCheck {
            volume,
            count,
            step,
        } => {
            let cfg = g.labeling()?;
            let report = grad_check(
                &load_volume(volume)?,
                &cfg,
                CountLabel(*count),
                g.bins,
                *step,
            )?;
            Ok(no_plot(match format(Format::Json) {
                Format::Json => json(&report),
                Format::Csv => csv_rows(
                    "region,voxel,analytic,fd,abs_err,rel_err",
                    report.regions.iter().map(|r| {
                        format!(
                            "{},{},{},{},{},{}",
                            r.region, r.voxel, r.analytic, r.fd, r.abs_err, r.rel_err
                        )
                    }),
                ),
            }))
        }
        Command::Fit {
            volume,
            target,
            steps,
            lr,
            mode,
            save,
        } => {
            let cfg = g.labeling()?;
            let mode = match mode {
                ModeArg::MatchCount => FitMode::MatchCount,
                ModeArg::MaximizeEntropy => FitMode::MaximizeEntropy,
            };
            let opts = FitOptions {
                target: CountLabel(*target),
                bins: g.bins,
                steps: *steps,
                lr: *lr,
                mode,
            };
            let result = fit(&load_volume(volume)?, &cfg, &opts)?;
            if let Some(path) = save {
                save_volume(&result.final_volume, path)?;
            }
            let objective = match mode {
                FitMode::MatchCount => "count_loss",
                FitMode::MaximizeEntropy => "normalized_entropy",
            };
            Ok(Output {
                report: match format(Format::Csv) {
                    Format::Csv => csv_rows(
                        &format!("step,{objective}"),
                        result
                            .trajectory
                            .iter()
                            .enumerate()
                            .map(|(i, v)| format!("{i},{v}")),
                    ),
                    Format::Json => json(&FitReport {
                        mode,
                        target: *target,
                        trajectory: &result.trajectory,
                    }),
                },
                plot: Some(plot::trajectory_chart(objective, &result.trajectory)),
            })
        }
        Command::Synth {
            dir,
            config,
            n_samples,
            shape,
            volume_format,
        } => {
            let mut cfg = match config {
                Some(path) => load_generator_config(path)?,
                None => GeneratorConfig::default(),
            };
            if let Some(n) = n_samples {
                cfg.n_samples = *n;
            }
            if let Some(s) = shape {
                cfg.shape = s.clone();
            }
            if let Some(seed) = g.seed {
                cfg.seed = seed;
            }
            let fmt = match volume_format {
                FormatArg::Npy => VolumeFormat::Npy,
                FormatArg::Raw => VolumeFormat::Raw,
            };
            let manifest = write_corpus(&cfg, dir, fmt)?;
            Ok(no_plot(json(&SynthReport {
                registry: dir.join("registry.json"),
                manifest,
                n_samples: cfg.n_samples,
            })))
        }
        Command::McEntropy { counts, volumes } => {
            let counts = match counts {
                Some(c) => c.clone(),
                None => {
                    let cfg = g.labeling()?;
                    volumes
                        .iter()
                        .map(|p| cc_count(&load_volume(p)?, &cfg))
                        .collect::<Result<Vec<_>>>()?
                }
            };
            let d = empirical_count_distribution(&counts, g.bins)?;
            Ok(no_plot(match format(Format::Json) {
                Format::Json => json(&McReport {
                    n: counts.len(),
                    binned: d.bin_probs(),
                    argmax_count: d.argmax(),
                    entropy: d.entropy(),
                    normalized_entropy: d.normalized_entropy(),
                }),
                Format::Csv => format!(
                    "n,argmax_count,entropy,normalized_entropy,binned\n{},{},{},{},\"{}\"\n",
                    counts.len(),
                    d.argmax(),
                    d.entropy(),
                    d.normalized_entropy(),
                    join(d.bin_probs())
                ),
            }))
        }
    }
}

fn load_generator_config(path: &Path) -> Result<GeneratorConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::unreadable(path, e))?;
    let mut value: serde_json::Value =
        serde_json::to_value(GeneratorConfig::default()).expect("config serializes");
    let overrides: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?;
    let serde_json::Value::Object(fields) = overrides else {
        return Err(Error::UnsupportedFormat(format!(
            "{}: expected a JSON object",
            path.display()
        )));
    };
    for (k, v) in fields {
        value[k] = v;
    }
    serde_json::from_value(value)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::unwritable(path, e))
}

/// Runs a parsed command line: the report goes to `--out` or stdout, the
/// chart to `--plot`.
pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let output = with_threads(g.threads, || render(g, &cli.command))?;
    if let Some(path) = &g.plot {
        let svg = output
            .plot
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("this command has no chart; drop --plot".into()))?;
        write_text(path, svg)?;
    }
    match &g.out {
        Some(path) => write_text(path, &output.report),
        None => {
            print!("{}", output.report);
            Ok(())
        }
    }
}

/// Process exit code for a failed run.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_input_error() {
        2
    } else {
        3
    }
}
