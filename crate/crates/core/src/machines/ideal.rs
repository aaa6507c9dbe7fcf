//! Whole-image machines: the ideal score (IS) and its translation-equivariant
//! counterpart (ES).

use rayon::prelude::*;

use super::softmax::{softmax, top_k_positions};
use super::{check_alpha_bar, training_subset, MachineConfig, PosteriorWeights, ScoreMachine, Variant};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Shape};

/// Posterior over a candidate list and the weighted mean of the candidates.
fn posterior_mean<F>(
    phi: &ImageGrid,
    alpha_bar: f64,
    n: usize,
    top_k: Option<usize>,
    sq_dist: impl Fn(usize) -> f64 + Sync,
    value: F,
) -> (PosteriorWeights, Vec<f64>)
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let logits: Vec<f64> = if alpha_bar == 0.0 {
        vec![0.0; n]
    } else {
        let scale = -0.5 / (1.0 - alpha_bar);
        (0..n).into_par_iter().map(|i| sq_dist(i) * scale).collect()
    };
    let keep: Vec<usize> = match top_k {
        Some(k) if k < n => top_k_positions(&logits, k),
        _ => (0..n).collect(),
    };
    let kept: Vec<f64> = keep.iter().map(|&i| logits[i]).collect();
    let (log_weights, weights) = softmax(&kept);
    let mean: Vec<f64> = (0..phi.len())
        .into_par_iter()
        .map(|e| {
            keep.iter().zip(&weights).filter(|(_, w)| **w > 0.0).map(|(&i, w)| w * value(i, e)).sum()
        })
        .collect();
    (PosteriorWeights { candidates: keep, log_weights, weights }, mean)
}

fn score_from_mean(phi: &ImageGrid, alpha_bar: f64, mean: &[f64]) -> Result<ImageGrid> {
    let sa = alpha_bar.sqrt();
    let inv_var = 1.0 / (1.0 - alpha_bar);
    phi.with_data(phi.data().iter().zip(mean).map(|(x, m)| (sa * m - x) * inv_var).collect())
}

fn check_shape(expected: Shape, phi: &ImageGrid) -> Result<()> {
    if phi.shape() != expected {
        return Err(Error::ShapeMismatch { expected: expected.to_string(), actual: phi.shape().to_string() });
    }
    Ok(())
}

/// Exact score of the Gaussian mixture centered on the shrunken training images.
pub struct IdealScoreMachine {
    images: Vec<ImageGrid>,
    shape: Shape,
    top_k: Option<usize>,
}

impl IdealScoreMachine {
    pub fn new(config: &MachineConfig) -> Result<Self> {
        let images = training_subset(&config.images, config.label)?;
        let shape = images[0].shape();
        Ok(Self { images, shape, top_k: config.top_k })
    }

    pub fn images(&self) -> &[ImageGrid] {
        &self.images
    }

    fn evaluate(&self, phi: &ImageGrid, alpha_bar: f64) -> Result<(PosteriorWeights, Vec<f64>)> {
        check_alpha_bar(alpha_bar)?;
        check_shape(self.shape, phi)?;
        let sa = alpha_bar.sqrt();
        let x = phi.data();
        Ok(posterior_mean(
            phi,
            alpha_bar,
            self.images.len(),
            self.top_k,
            |i| x.iter().zip(self.images[i].data()).map(|(a, b)| (a - sa * b) * (a - sa * b)).sum(),
            |i, e| self.images[i].data()[e],
        ))
    }
}

impl ScoreMachine for IdealScoreMachine {
    fn variant(&self) -> Variant {
        Variant::Is
    }

    fn data_shape(&self) -> Shape {
        self.shape
    }

    fn scales(&self) -> Vec<usize> {
        Vec::new()
    }

    fn score(&self, phi: &ImageGrid, alpha_bar: f64, _scale: usize) -> Result<ImageGrid> {
        let (_, mean) = self.evaluate(phi, alpha_bar)?;
        score_from_mean(phi, alpha_bar, &mean)
    }

    fn posterior(&self, phi: &ImageGrid, alpha_bar: f64, _scale: usize, _pixel: (usize, usize)) -> Result<PosteriorWeights> {
        Ok(self.evaluate(phi, alpha_bar)?.0)
    }
}

/// Ideal score over the orbit of the training set under circular translation.
///
/// Candidate `i * H * W + dr * W + dc` is image `i` translated by `(dr, dc)`.
/// Translates are read through index arithmetic and never materialized.
pub struct EquivariantScoreMachine {
    images: Vec<ImageGrid>,
    shape: Shape,
    top_k: Option<usize>,
}

impl EquivariantScoreMachine {
    pub fn new(config: &MachineConfig) -> Result<Self> {
        let images = training_subset(&config.images, config.label)?;
        let shape = images[0].shape();
        Ok(Self { images, shape, top_k: config.top_k })
    }

    pub fn orbit_len(&self) -> usize {
        self.images.len() * self.shape.height * self.shape.width
    }

    /// Value of orbit member `member` at flat element index `e`.
    #[inline]
    fn orbit_value(&self, member: usize, e: usize) -> f64 {
        let Shape { height: h, width: w, channels: c } = self.shape;
        let (img, shift) = (member / (h * w), member % (h * w));
        let (dr, dc) = (shift / w, shift % w);
        let (px, ch) = (e / c, e % c);
        let (r, col) = (px / w, px % w);
        let sr = (r + h - dr) % h;
        let sc = (col + w - dc) % w;
        self.images[img].data()[(sr * w + sc) * c + ch]
    }

    fn evaluate(&self, phi: &ImageGrid, alpha_bar: f64) -> Result<(PosteriorWeights, Vec<f64>)> {
        check_alpha_bar(alpha_bar)?;
        check_shape(self.shape, phi)?;
        let sa = alpha_bar.sqrt();
        let x = phi.data();
        Ok(posterior_mean(
            phi,
            alpha_bar,
            self.orbit_len(),
            self.top_k,
            |m| {
                x.iter()
                    .enumerate()
                    .map(|(e, a)| {
                        let d = a - sa * self.orbit_value(m, e);
                        d * d
                    })
                    .sum()
            },
            |m, e| self.orbit_value(m, e),
        ))
    }
}

impl ScoreMachine for EquivariantScoreMachine {
    fn variant(&self) -> Variant {
        Variant::Es
    }

    fn data_shape(&self) -> Shape {
        self.shape
    }

    fn scales(&self) -> Vec<usize> {
        Vec::new()
    }

    fn score(&self, phi: &ImageGrid, alpha_bar: f64, _scale: usize) -> Result<ImageGrid> {
        let (_, mean) = self.evaluate(phi, alpha_bar)?;
        score_from_mean(phi, alpha_bar, &mean)
    }

    fn posterior(&self, phi: &ImageGrid, alpha_bar: f64, _scale: usize, _pixel: (usize, usize)) -> Result<PosteriorWeights> {
        Ok(self.evaluate(phi, alpha_bar)?.0)
    }
}
