//! The black/white creativity experiment: a local machine trained on one
//! all-black and one all-white image produces binary patch mosaics that are
//! neither training image, and every pixel is locally consistent.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{memorization_distance, verify_local_consistency, ConsistencyReport};
use crate::dictionary::{DictionaryOptions, PatchDictionary};
use crate::error::Result;
use crate::grid::{ImageGrid, PaddingMode};
use crate::machines::{build_machine, MachineConfig, Variant};
use crate::sampler::{sample, Integrator, SampleOptions, ScaleSchedule};
use crate::schedule::{NoiseSchedule, ScheduleKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyOptions {
    pub size: usize,
    pub steps: usize,
    pub scale: usize,
    pub pad: PaddingMode,
    pub samples: usize,
    pub first_seed: u64,
    pub tau: f64,
    pub schedule: ScheduleKind,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            size: 32,
            steps: 200,
            scale: 3,
            pad: PaddingMode::Circular,
            samples: 64,
            first_seed: 0,
            tau: 0.05,
            schedule: ScheduleKind::LogSnr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySample {
    pub seed: u64,
    /// Fraction of pixels within `tau` of -1 or +1.
    pub binary_fraction: f64,
    pub pass_fraction: f64,
    /// Pixels closer to the less frequent color.
    pub minority_pixels: usize,
    pub memorization_distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyReport {
    pub options: ToyOptions,
    pub variant: Variant,
    pub samples: Vec<ToySample>,
    pub mean_pass_fraction: f64,
    pub min_pass_fraction: f64,
    pub min_binary_fraction: f64,
    /// Samples that are neither training image.
    pub novel_samples: usize,
    #[serde(skip)]
    pub images: Vec<ImageGrid>,
    #[serde(skip)]
    pub consistency: Vec<ConsistencyReport>,
}

/// The two training images: all black and all white.
pub fn toy_training_set(size: usize) -> Vec<ImageGrid> {
    vec![ImageGrid::filled(size, size, 1, -1.0), ImageGrid::filled(size, size, 1, 1.0)]
}

pub fn run_toy(opts: &ToyOptions) -> Result<ToyReport> {
    let data = toy_training_set(opts.size);
    let variant = match opts.pad {
        PaddingMode::Circular => Variant::Els,
        PaddingMode::Zero => Variant::Bels,
    };
    let dict = Arc::new(PatchDictionary::build(&data, DictionaryOptions::new(opts.scale, opts.pad))?);
    let config = MachineConfig::new(variant, data.clone())
        .with_pad(opts.pad)
        .with_scales([opts.scale])
        .with_dictionary(dict.clone())
        .with_dedup(true);
    let machine = build_machine(&config)?;
    let sched = NoiseSchedule::from_kind(opts.schedule, opts.steps)?;
    let scales = ScaleSchedule::constant(opts.scale, opts.steps)?;
    let sample_opts = SampleOptions {
        schedule: &sched,
        scales: Some(&scales),
        shape: data[0].shape(),
        label: None,
        integrator: Integrator::Ddim,
        record: false,
        config_digest: String::new(),
    };
    let results: Vec<(ToySample, ImageGrid, ConsistencyReport)> = (0..opts.samples as u64)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let seed = opts.first_seed + i;
            let img = sample(machine.as_ref(), seed, &sample_opts)?.image;
            let report = verify_local_consistency(&img, &dict, variant, opts.tau)?;
            let binary = img.data().iter().filter(|v| (v.abs() - 1.0).abs() <= opts.tau).count();
            let white = img.data().iter().filter(|&&v| v > 0.0).count();
            let n = img.len();
            let (dist, _) = memorization_distance(&img, &data)?;
            let s = ToySample {
                seed,
                binary_fraction: binary as f64 / n as f64,
                pass_fraction: report.pass_fraction,
                minority_pixels: white.min(n - white),
                memorization_distance: dist,
            };
            Ok((s, img, report))
        })
        .collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(results.len());
    let mut images = Vec::with_capacity(results.len());
    let mut consistency = Vec::with_capacity(results.len());
    for (s, img, rep) in results {
        samples.push(s);
        images.push(img);
        consistency.push(rep);
    }
    let n = samples.len().max(1) as f64;
    Ok(ToyReport {
        options: opts.clone(),
        variant,
        mean_pass_fraction: samples.iter().map(|s| s.pass_fraction).sum::<f64>() / n,
        min_pass_fraction: samples.iter().map(|s| s.pass_fraction).fold(1.0, f64::min),
        min_binary_fraction: samples.iter().map(|s| s.binary_fraction).fold(1.0, f64::min),
        novel_samples: samples.iter().filter(|s| s.minority_pixels > 0).count(),
        samples,
        images,
        consistency,
    })
}
