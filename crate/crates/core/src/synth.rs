//! Synthetic probability maps with known lesion counts.
//!
//! Each sample places well-separated radial blobs, draws a peak probability
//! per blob and then samples the blob's existence from that same
//! probability, so the rendered map is calibrated by construction. Blobs
//! that do not exist are rendered exactly like those that do; only the
//! count label and the mask tell them apart. Low-probability single-voxel
//! specks and uniform background noise are added on top. Every sample has
//! its own RNG stream derived from `(seed, index)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{label, LabelingConfig};
use crate::metrics::{EvalRecord, LabeledVolume, SampleSource};
use crate::par::{try_map_indices, Parallelism};
use crate::volume::{save_mask, save_volume, BinaryMask, ProbabilityVolume, Shape};

/// Exponent of the radial kernel `peak * (1 - d / r)^γ`.
const KERNEL_GAMMA: i32 = 2;
/// Speck peaks are `noise_max + (distractor_peak_max - noise_max) * u^6`
/// with `u ~ U[0, 1]`: most specks are faint, a few reach the cap.
const SPECK_PEAK_EXPONENT: i32 = 6;
const PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub shape: Vec<usize>,
    pub n_samples: usize,
    /// Inclusive.
    pub blob_count_range: (usize, usize),
    pub peak_range: (f64, f64),
    pub blob_radius_range: (f64, f64),
    /// Minimum boundary-to-boundary distance between any two objects, in voxels.
    pub min_separation: f64,
    /// Inclusive.
    pub distractor_count_range: (usize, usize),
    /// Distractor peaks are drawn from `[noise_max, distractor_peak_max]`.
    pub distractor_peak_max: f64,
    pub noise_max: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            shape: vec![32, 64, 64],
            n_samples: 1000,
            blob_count_range: (0, 6),
            peak_range: (0.55, 1.0),
            blob_radius_range: (2.0, 4.0),
            min_separation: 3.0,
            distractor_count_range: (0, 8),
            distractor_peak_max: 0.3,
            noise_max: 0.05,
            seed: 5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<Shape> {
        let shape = Shape::new(&self.shape)?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let (plo, phi) = self.peak_range;
        if !(plo > 0.0 && plo <= phi && phi <= 1.0) {
            return bad(format!(
                "peak_range {:?} must lie in (0, 1]",
                self.peak_range
            ));
        }
        let (rlo, rhi) = self.blob_radius_range;
        if !(rlo >= 1.0 && rlo <= rhi) {
            return bad(format!("blob_radius_range {:?}", self.blob_radius_range));
        }
        if !(self.min_separation >= 1.0) {
            return bad(format!("min_separation {} < 1", self.min_separation));
        }
        if self.blob_count_range.0 > self.blob_count_range.1
            || self.distractor_count_range.0 > self.distractor_count_range.1
        {
            return bad("count ranges must be ordered".into());
        }
        if !(self.distractor_peak_max >= 0.0 && self.distractor_peak_max < plo) {
            return bad(format!(
                "distractor_peak_max {} must be below the smallest blob peak {plo}",
                self.distractor_peak_max
            ));
        }
        if !(self.noise_max >= 0.0 && self.noise_max <= self.distractor_peak_max) {
            return bad(format!(
                "noise_max {} must lie in [0, distractor_peak_max]",
                self.noise_max
            ));
        }
        Ok(shape)
    }

    /// Expected count label: mean blob count times mean peak.
    pub fn expected_count(&self) -> f64 {
        let (a, b) = self.blob_count_range;
        let (plo, phi) = self.peak_range;
        (a + b) as f64 / 2.0 * (plo + phi) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: Vec<usize>,
    pub radius: f64,
    pub peak: f64,
    pub exists: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speck {
    pub center: Vec<usize>,
    pub peak: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub volume: ProbabilityVolume,
    pub count_label: usize,
    pub mask: BinaryMask,
    pub blobs: Vec<Blob>,
    pub distractors: Vec<Speck>,
}

struct Placed {
    center: [usize; 3],
    radius: f64,
}

fn distance(a: &[usize; 3], b: &[usize; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn draw_center(rng: &mut ChaCha8Rng, dims: [usize; 3], radius: f64) -> [usize; 3] {
    // Keep the support inside the grid along every axis that can hold it.
    let margin = (radius.ceil() as usize).saturating_sub(1);
    let mut c = [0usize; 3];
    for a in 0..3 {
        c[a] = if dims[a] > 2 * margin {
            rng.gen_range(margin..dims[a] - margin)
        } else {
            rng.gen_range(0..dims[a])
        };
    }
    c
}

fn place(
    rng: &mut ChaCha8Rng,
    dims: [usize; 3],
    radius: f64,
    placed: &[Placed],
    min_separation: f64,
) -> Option<[usize; 3]> {
    (0..PLACEMENT_ATTEMPTS).find_map(|_| {
        let c = draw_center(rng, dims, radius);
        placed
            .iter()
            .all(|p| distance(&c, &p.center) - p.radius - radius >= min_separation)
            .then_some(c)
    })
}

fn support(shape: &Shape, center: &[usize; 3], radius: f64) -> impl Iterator<Item = (usize, f64)> {
    let dims = shape.zyx();
    let reach = radius.ceil() as usize;
    let lo: Vec<usize> = center.iter().map(|&c| c.saturating_sub(reach)).collect();
    let hi: Vec<usize> = (0..3)
        .map(|a| (center[a] + reach).min(dims[a] - 1))
        .collect();
    let shape = *shape;
    let center = *center;
    (lo[0]..=hi[0]).flat_map(move |z| {
        let (lo1, hi1, lo2, hi2) = (lo[1], hi[1], lo[2], hi[2]);
        (lo1..=hi1).flat_map(move |y| {
            (lo2..=hi2).filter_map(move |x| {
                let d = distance(&[z, y, x], &center);
                (d < radius).then(|| (shape.linear_index(z, y, x), d))
            })
        })
    })
}

fn coords(shape: &Shape, c: &[usize; 3]) -> Vec<usize> {
    c[3 - shape.rank()..].to_vec()
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates sample `index` of the corpus described by `cfg`.
pub fn generate_sample(cfg: &GeneratorConfig, index: usize) -> Result<SynthSample> {
    let shape = cfg.validate()?;
    let dims = shape.zyx();
    let mut rng = sample_rng(cfg.seed, index);
    let mut placed: Vec<Placed> = Vec::new();

    let n_blobs = rng.gen_range(cfg.blob_count_range.0..=cfg.blob_count_range.1);
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let radius = rng.gen_range(cfg.blob_radius_range.0..=cfg.blob_radius_range.1);
        let center =
            place(&mut rng, dims, radius, &placed, cfg.min_separation).ok_or_else(|| {
                Error::PlacementInfeasible(format!(
                    "sample {index}: could not place blob {} of {n_blobs} in {:?}",
                    blobs.len() + 1,
                    cfg.shape
                ))
            })?;
        placed.push(Placed { center, radius });
        let peak = rng.gen_range(cfg.peak_range.0..=cfg.peak_range.1);
        let exists = rng.gen::<f64>() < peak;
        blobs.push((center, radius, peak, exists));
    }

    let n_specks = rng.gen_range(cfg.distractor_count_range.0..=cfg.distractor_count_range.1);
    let mut specks = Vec::with_capacity(n_specks);
    for _ in 0..n_specks {
        let center = place(&mut rng, dims, 0.5, &placed, cfg.min_separation).ok_or_else(|| {
            Error::PlacementInfeasible(format!(
                "sample {index}: could not place distractor {} of {n_specks}",
                specks.len() + 1
            ))
        })?;
        placed.push(Placed {
            center,
            radius: 0.5,
        });
        let peak = cfg.noise_max
            + (cfg.distractor_peak_max - cfg.noise_max)
                * rng.gen::<f64>().powi(SPECK_PEAK_EXPONENT);
        specks.push((center, peak));
    }

    let mut data: Vec<f64> = (0..shape.len())
        .map(|_| (cfg.noise_max * rng.gen::<f64>()).min(cfg.distractor_peak_max))
        .collect();
    let mut mask = vec![false; shape.len()];
    for &(center, radius, peak, exists) in &blobs {
        for (i, d) in support(&shape, &center, radius) {
            data[i] = peak * (1.0 - d / radius).powi(KERNEL_GAMMA);
            mask[i] |= exists;
        }
    }
    for &(center, peak) in &specks {
        data[shape.linear_index(center[0], center[1], center[2])] = peak;
    }

    Ok(SynthSample {
        volume: ProbabilityVolume::new(shape, data)?,
        count_label: blobs.iter().filter(|b| b.3).count(),
        mask: BinaryMask::new(shape, mask)?,
        blobs: blobs
            .into_iter()
            .map(|(c, radius, peak, exists)| Blob {
                center: coords(&shape, &c),
                radius,
                peak,
                exists,
            })
            .collect(),
        distractors: specks
            .into_iter()
            .map(|(c, peak)| Speck {
                center: coords(&shape, &c),
                peak,
            })
            .collect(),
    })
}

/// All `cfg.n_samples` samples, in index order.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<SynthSample>> {
    generate_with(cfg, Parallelism::default())
}

pub fn generate_with(cfg: &GeneratorConfig, mode: Parallelism) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    try_map_indices(cfg.n_samples, mode, |i| generate_sample(cfg, i))
}

/// A corpus rendered lazily, one sample at a time.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    cfg: GeneratorConfig,
}

impl SynthCorpus {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SynthCorpus { cfg })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }
}

impl SampleSource for SynthCorpus {
    fn len(&self) -> usize {
        self.cfg.n_samples
    }

    fn load(&self, index: usize, with_mask: bool) -> Result<LabeledVolume> {
        let s = generate_sample(&self.cfg, index)?;
        Ok(LabeledVolume {
            volume: s.volume,
            count: s.count_label,
            mask: with_mask.then_some(s.mask),
        })
    }
}

/// Blob-to-region correspondence of a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlobRegion {
    pub blob: usize,
    pub region: usize,
}

/// Checks that every blob with peak above `tau` forms exactly one candidate
/// region and that no region reaches into two blobs.
pub fn oracle_region_truth(sample: &SynthSample, cfg: &LabelingConfig) -> Result<Vec<BlobRegion>> {
    let shape = sample.volume.shape();
    let regions = label(&sample.volume, cfg)?;
    let mut owner = vec![usize::MAX; shape.len()];
    for (b, blob) in sample.blobs.iter().enumerate() {
        let mut c = [0usize; 3];
        c[3 - shape.rank()..].copy_from_slice(&blob.center);
        for (i, _) in support(&shape, &c, blob.radius) {
            owner[i] = b;
        }
    }

    let mut region_of_blob = vec![None; sample.blobs.len()];
    for r in &regions {
        let mut hit: Option<usize> = None;
        for &v in &r.voxels {
            let b = owner[v];
            if b == usize::MAX {
                continue;
            }
            match hit {
                None => hit = Some(b),
                Some(prev) if prev != b => {
                    return Err(Error::AssumptionViolated(format!(
                        "region {} spans blobs {prev} and {b}",
                        r.id
                    )))
                }
                _ => {}
            }
        }
        if let Some(b) = hit {
            if region_of_blob[b].replace(r.id).is_some() {
                return Err(Error::AssumptionViolated(format!(
                    "blob {b} is split over several regions"
                )));
            }
        }
    }

    let mut out = Vec::new();
    for (b, blob) in sample.blobs.iter().enumerate() {
        match region_of_blob[b] {
            Some(region) if blob.peak > cfg.tau => out.push(BlobRegion { blob: b, region }),
            None if blob.peak > cfg.tau && cfg.min_size <= 1 => {
                return Err(Error::AssumptionViolated(format!(
                    "blob {b} with peak {} has no region at tau {}",
                    blob.peak, cfg.tau
                )))
            }
            _ => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Npy,
    Raw,
}

#[derive(Debug, Serialize)]
struct RegistryEntry<'a> {
    index: usize,
    volume: String,
    mask: String,
    count: usize,
    blobs: &'a [Blob],
    distractors: &'a [Speck],
}

#[derive(Debug, Serialize)]
struct Registry<'a> {
    config: &'a GeneratorConfig,
    samples: Vec<RegistryEntry<'a>>,
}

/// Writes every sample plus `manifest.jsonl` and `registry.json` into `dir`.
/// Manifest paths are relative to `dir`. Returns the manifest path.
pub fn write_corpus(cfg: &GeneratorConfig, dir: &Path, format: VolumeFormat) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::unwritable(dir, e))?;
    let ext = match format {
        VolumeFormat::Npy => "npy",
        VolumeFormat::Raw => "bin",
    };
    cfg.validate()?;
    let names: Vec<(String, String)> = (0..cfg.n_samples)
        .map(|i| {
            (
                format!("sample_{i:05}.{ext}"),
                format!("sample_{i:05}_mask.{ext}"),
            )
        })
        .collect();
    let truth = try_map_indices(cfg.n_samples, Parallelism::default(), |i| {
        let s = generate_sample(cfg, i)?;
        save_volume(&s.volume, dir.join(&names[i].0))?;
        save_mask(&s.mask, dir.join(&names[i].1))?;
        Ok((s.count_label, s.blobs, s.distractors))
    })?;

    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = Vec::new();
    for ((count, _, _), (vol, mask)) in truth.iter().zip(&names) {
        let rec = EvalRecord {
            volume: PathBuf::from(vol),
            count: *count,
            mask: Some(PathBuf::from(mask)),
        };
        serde_json::to_writer(&mut manifest, &rec).expect("record serializes");
        manifest.write_all(b"\n").expect("in-memory write");
    }
    fs::write(&manifest_path, manifest).map_err(|e| Error::unwritable(&manifest_path, e))?;

    let registry = Registry {
        config: cfg,
        samples: truth
            .iter()
            .zip(&names)
            .enumerate()
            .map(
                |(index, ((count, blobs, distractors), (vol, mask)))| RegistryEntry {
                    index,
                    volume: vol.clone(),
                    mask: mask.clone(),
                    count: *count,
                    blobs,
                    distractors,
                },
            )
            .collect(),
    };
    let registry_path = dir.join("registry.json");
    let text = serde_json::to_vec_pretty(&registry).expect("registry serializes");
    fs::write(&registry_path, text).map_err(|e| Error::unwritable(&registry_path, e))?;
    Ok(manifest_path)
}
