//! Checks on generated samples: local consistency, memorization distance,
//! pixelwise r^2 and finite-difference receptive fields.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::PatchDictionary;
use crate::error::{Error, Result};
use crate::grid::{fill_window, BorderSignature, ImageGrid, PaddingMode};
use crate::machines::{ScoreMachine, Variant};

/// Default center-pixel tolerance, in normalized pixel units.
pub const DEFAULT_TAU: f64 = 0.05;
/// Relative distance gap under which two patches count as equally near.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelConsistency {
    pub row: usize,
    pub col: usize,
    /// Dictionary index of the nearest eligible patch (lowest index on ties).
    pub nearest: usize,
    pub sq_distance: f64,
    /// Largest channel deviation `|phi(x) - center(nearest)|`.
    pub deviation: f64,
    /// Other eligible patches within the tie tolerance of the nearest.
    pub tied: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub variant: Variant,
    pub tau: f64,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<PixelConsistency>,
    pub pass_fraction: f64,
    pub max_deviation: f64,
    pub failing: Vec<(usize, usize)>,
    pub ties: Vec<(usize, usize)>,
}

impl ConsistencyReport {
    pub fn is_consistent(&self) -> bool {
        self.failing.is_empty()
    }

    /// Row-major pass mask.
    pub fn mask(&self) -> Vec<bool> {
        self.pixels.iter().map(|p| p.pass).collect()
    }
}

/// Whether every pixel of `sample` equals (within `tau`) the center of the
/// L2-nearest patch eligible for that pixel under `variant`.
pub fn verify_local_consistency(
    sample: &ImageGrid,
    dict: &PatchDictionary,
    variant: Variant,
    tau: f64,
) -> Result<ConsistencyReport> {
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("tolerance must be nonnegative, got {tau}")));
    }
    if sample.channels() != dict.channels() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", dict.channels()),
            actual: format!("{} channels", sample.channels()),
        });
    }
    match variant {
        Variant::Ls => {
            if sample.shape() != dict.image_shape() {
                return Err(Error::ShapeMismatch {
                    expected: dict.image_shape().to_string(),
                    actual: sample.shape().to_string(),
                });
            }
        }
        Variant::Els if dict.padding() != PaddingMode::Circular => {
            return Err(Error::Config("els consistency needs a circular dictionary".into()));
        }
        Variant::Bels if dict.padding() != PaddingMode::Zero => {
            return Err(Error::Config("bels consistency needs a zero-padded dictionary".into()));
        }
        Variant::Is | Variant::Es => {
            return Err(Error::Config(format!("local consistency is defined for local machines, not {variant}")));
        }
        _ => {}
    }
    let (h, w) = (sample.height(), sample.width());
    let p = dict.patch_size();
    let label = sample.label();
    let all = dict.all_indices(label);

    let pixels: Vec<PixelConsistency> = (0..h * w)
        .into_par_iter()
        .map(|px| -> Result<PixelConsistency> {
            let (row, col) = (px / w, px % w);
            let owned;
            let cands: &[usize] = match variant {
                Variant::Ls => {
                    owned = dict.location_restricted_view(row, col, label)?;
                    &owned
                }
                Variant::Bels => {
                    owned = dict.eligible_patches(BorderSignature::of(h, w, p, row, col), label)?;
                    &owned
                }
                _ => &all,
            };
            if cands.is_empty() {
                return Err(Error::NoConsistentPatches(format!("pixel ({row}, {col})")));
            }
            let mut q = vec![0.0; dict.dim()];
            fill_window(sample, p, row, col, dict.padding(), &mut q);
            let dists: Vec<f64> = cands
                .iter()
                .map(|&m| q.iter().zip(dict.patch(m)).map(|(a, &b)| (a - b as f64) * (a - b as f64)).sum())
                .collect();
            let mut best = 0;
            for (j, d) in dists.iter().enumerate() {
                if *d < dists[best] {
                    best = j;
                }
            }
            let dmin = dists[best];
            let cutoff = dmin + TIE_TOLERANCE * dmin;
            let x = sample.pixel(row, col);
            let dev = |m: usize| {
                dict.center(m).iter().zip(x).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max)
            };
            let tied: Vec<usize> = (0..cands.len()).filter(|&j| j != best && dists[j] <= cutoff).collect();
            let deviation = dev(cands[best]);
            let pass = deviation <= tau && tied.iter().all(|&j| dev(cands[j]) <= tau);
            Ok(PixelConsistency { row, col, nearest: cands[best], sq_distance: dmin, deviation, tied: tied.len(), pass })
        })
        .collect::<Result<_>>()?;

    let passed = pixels.iter().filter(|p| p.pass).count();
    Ok(ConsistencyReport {
        variant,
        tau,
        height: h,
        width: w,
        pass_fraction: passed as f64 / pixels.len() as f64,
        max_deviation: pixels.iter().map(|p| p.deviation).fold(0.0, f64::max),
        failing: pixels.iter().filter(|p| !p.pass).map(|p| (p.row, p.col)).collect(),
        ties: pixels.iter().filter(|p| p.tied > 0).map(|p| (p.row, p.col)).collect(),
        pixels,
    })
}

/// Coefficient of determination of `candidate` against `reference`, over
/// all pixels and channels. Can be negative.
pub fn pixelwise_r2(candidate: &ImageGrid, reference: &ImageGrid) -> Result<f64> {
    reference.check_same_shape(candidate)?;
    let r = reference.data();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    let ss_tot: f64 = r.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ConstantReference);
    }
    let ss_res: f64 = candidate.data().iter().zip(r).map(|(c, v)| (c - v) * (c - v)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Squared Pearson correlation; symmetric in its arguments.
pub fn pearson_r2(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.len() as f64;
    let (ma, mb) = (a.data().iter().sum::<f64>() / n, b.data().iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ConstantReference);
    }
    Ok(sab * sab / (saa * sbb))
}

/// Nearest training image by L2 distance; ties go to the lowest index.
pub fn memorization_distance(sample: &ImageGrid, data: &[ImageGrid]) -> Result<(f64, usize)> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut best = (f64::INFINITY, 0);
    for (i, img) in data.iter().enumerate() {
        sample.check_same_shape(img)?;
        let d = sample.squared_distance(img);
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok((best.0.sqrt(), best.1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Central-difference sensitivity of the score at `pixel` to every input
/// pixel: `heat(y) = sum |dM[phi](pixel) / dphi(y)|` over input and output channels.
pub fn receptive_field_probe(
    machine: &dyn ScoreMachine,
    phi: &ImageGrid,
    alpha_bar: f64,
    scale: usize,
    pixel: (usize, usize),
    epsilon: f64,
) -> Result<Heatmap> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("probe epsilon must be positive, got {epsilon}")));
    }
    let (h, w, c) = (phi.height(), phi.width(), phi.channels());
    if pixel.0 >= h || pixel.1 >= w {
        return Err(Error::OutOfBounds { row: pixel.0, col: pixel.1, height: h, width: w });
    }
    let values: Vec<f64> = (0..h * w)
        .into_par_iter()
        .map(|y| -> Result<f64> {
            let mut total = 0.0;
            for ch in 0..c {
                let idx = y * c + ch;
                let mut plus = phi.data().to_vec();
                let mut minus = plus.clone();
                plus[idx] += epsilon;
                minus[idx] -= epsilon;
                let sp = machine.score_pixel(&phi.with_data(plus)?, alpha_bar, scale, pixel)?;
                let sm = machine.score_pixel(&phi.with_data(minus)?, alpha_bar, scale, pixel)?;
                total += sp.iter().zip(&sm).map(|(a, b)| ((a - b) / (2.0 * epsilon)).abs()).sum::<f64>();
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    Ok(Heatmap { height: h, width: w, values })
}
