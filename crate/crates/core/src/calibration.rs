//! Fitting the time-dependent locality scale to reference noise predictions.
//!
//! For every step and every reference trajectory the machine's noise
//! prediction is evaluated at each candidate scale on the recorded state; the
//! scale with the highest cosine similarity to the reference prediction is
//! that trajectory's optimum. The schedule entry is the lower median of the
//! optima. Noise and score predictions differ by a positive per-step factor,
//! so comparing either gives the same optimum.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::machines::ScoreMachine;
use crate::sampler::{ScaleSchedule, Trajectory};
use crate::schedule::NoiseSchedule;

/// Cosine similarities within this distance of the best count as ties,
/// which resolve to the smallest scale. It sits just above rounding noise
/// (f32-stored references give about 1e-15): near pure noise, distinct
/// scales differ by only 1e-13..1e-12.
pub const COSINE_TIE_TOLERANCE: f64 = 1e-14;

/// One reference trajectory: states and the reference noise prediction at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub t_indices: Vec<usize>,
    pub states: Vec<ImageGrid>,
    pub predictions: Vec<ImageGrid>,
    pub label: Option<u32>,
}

impl ReferenceTrajectory {
    pub fn new(t_indices: Vec<usize>, states: Vec<ImageGrid>, predictions: Vec<ImageGrid>, label: Option<u32>) -> Result<Self> {
        if t_indices.len() != states.len() || states.len() != predictions.len() {
            return Err(Error::Config("reference trajectory needs one prediction per state".into()));
        }
        for (s, p) in states.iter().zip(&predictions) {
            s.check_same_shape(p)?;
        }
        Ok(Self { t_indices, states, predictions, label })
    }

    pub fn from_trajectory(t: &Trajectory) -> Self {
        Self {
            t_indices: t.steps.iter().map(|s| s.t_index).collect(),
            states: t.steps.iter().map(|s| s.state.clone()).collect(),
            predictions: t.steps.iter().map(|s| s.noise.clone()).collect(),
            label: t.label,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReferenceSet {
    pub trajectories: Vec<ReferenceTrajectory>,
    pub provenance: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Fit a nondecreasing-in-index schedule to the raw medians.
    pub monotone_projection: bool,
    /// Accept raw medians even if they grow as `t` decreases.
    pub allow_nonmonotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCalibration {
    pub t_index: usize,
    /// Optimal scale of each contributing trajectory.
    pub optima: Vec<usize>,
    /// Trajectories skipped at this step because a prediction had zero norm.
    pub excluded: usize,
    pub median: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub candidates: Vec<usize>,
    pub raw_medians: Vec<usize>,
    pub schedule: ScaleSchedule,
    pub steps: Vec<StepCalibration>,
    pub monotonicity_violations: Vec<usize>,
    pub projected: bool,
}

/// `<a, b> / (|a| |b|)`.
pub fn cosine_similarity(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.check_same_shape(b)?;
    cosine_of(a.data(), b.data())
}

fn cosine_of(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Lower median of a nonempty list.
pub fn lower_median(values: &[usize]) -> usize {
    let mut v = values.to_vec();
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

/// Best candidate by cosine similarity; near-ties go to the smallest scale.
fn best_scale(scored: &[(usize, f64)]) -> usize {
    let best = scored.iter().map(|(_, c)| *c).fold(f64::NEG_INFINITY, f64::max);
    scored.iter().filter(|(_, c)| *c >= best - COSINE_TIE_TOLERANCE).map(|(p, _)| *p).min().expect("nonempty")
}

pub fn calibrate_scales(
    reference: &ReferenceSet,
    machine: &dyn ScoreMachine,
    candidates: &[usize],
    sched: &NoiseSchedule,
    opts: CalibrationOptions,
) -> Result<CalibrationReport> {
    if reference.trajectories.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate scales"));
    }
    let mut candidates = candidates.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    let have = machine.scales();
    if let Some(p) = candidates.iter().find(|p| !have.contains(p)) {
        return Err(Error::Dictionary(format!("machine has no dictionary at candidate scale {p}")));
    }
    let steps = sched.steps();

    let jobs: Vec<(usize, usize, usize)> = reference
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(ti, tr)| tr.t_indices.iter().enumerate().map(move |(si, &k)| (k, ti, si)))
        .collect();
    if let Some((k, _, _)) = jobs.iter().find(|(k, _, _)| *k == 0 || *k > steps) {
        return Err(Error::Config(format!("reference step index {k} outside 1..={steps}")));
    }

    let outcomes: Vec<(usize, usize, Option<usize>)> = jobs
        .par_iter()
        .map(|&(k, ti, si)| -> Result<(usize, usize, Option<usize>)> {
            let tr = &reference.trajectories[ti];
            let (state, target) = (&tr.states[si], &tr.predictions[si]);
            let ab = sched.alpha_bar(k);
            let mut scored = Vec::with_capacity(candidates.len());
            for &p in &candidates {
                let pred = machine.predict_noise(state, ab, p)?;
                match cosine_similarity(&pred, target) {
                    Ok(c) => scored.push((p, c)),
                    Err(Error::ZeroNorm) => {
                        warn!("trajectory {ti} step {k}: zero-norm prediction at scale {p}, excluded");
                        return Ok((k, ti, None));
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok((k, ti, Some(best_scale(&scored))))
        })
        .collect::<Result<_>>()?;

    let mut per_step: Vec<StepCalibration> = (1..=steps)
        .map(|k| StepCalibration { t_index: k, optima: Vec::new(), excluded: 0, median: 0 })
        .collect();
    for (k, _, best) in outcomes {
        match best {
            Some(p) => per_step[k - 1].optima.push(p),
            None => per_step[k - 1].excluded += 1,
        }
    }
    for s in &mut per_step {
        if s.optima.is_empty() {
            return Err(Error::Config(format!("no usable reference prediction at step {}", s.t_index)));
        }
        s.median = lower_median(&s.optima);
    }
    let raw: Vec<usize> = per_step.iter().map(|s| s.median).collect();
    let raw_schedule = ScaleSchedule::unordered(raw.clone())?;
    let violations = raw_schedule.monotonicity_violations();

    let schedule = if opts.monotone_projection {
        ScaleSchedule::new(isotonic_snap(&raw, &candidates))?
    } else if violations.is_empty() {
        ScaleSchedule::new(raw.clone())?
    } else if opts.allow_nonmonotone {
        warn!("calibrated schedule grows as t decreases at indices {violations:?}");
        raw_schedule
    } else {
        return Err(Error::ScaleSchedule(format!(
            "calibrated medians {raw:?} grow as t decreases at positions {violations:?}; \
             rerun with monotone projection or allow non-monotone schedules"
        )));
    };
    Ok(CalibrationReport {
        candidates,
        raw_medians: raw,
        schedule,
        steps: per_step,
        monotonicity_violations: violations,
        projected: opts.monotone_projection,
    })
}

/// Least-squares nondecreasing fit (pool adjacent violators), each value
/// then snapped to the nearest candidate (ties to the smaller).
pub fn isotonic_snap(values: &[usize], candidates: &[usize]) -> Vec<usize> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in values {
        blocks.push((v as f64, 1));
        while blocks.len() > 1 {
            let (m1, n1) = blocks[blocks.len() - 2];
            let (m2, n2) = blocks[blocks.len() - 1];
            if m1 <= m2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push(((m1 * n1 as f64 + m2 * n2 as f64) / (n1 + n2) as f64, n1 + n2));
        }
    }
    let snap = |x: f64| {
        *candidates
            .iter()
            .min_by(|a, b| ((**a as f64 - x).abs()).total_cmp(&(**b as f64 - x).abs()).then(a.cmp(b)))
            .expect("nonempty candidates")
    };
    blocks.into_iter().flat_map(|(m, n)| std::iter::repeat_n(snap(m), n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(v: Vec<f64>) -> ImageGrid {
        let n = v.len();
        ImageGrid::new(1, n, 1, v).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = g(vec![1.0, 0.0]);
        let b = g(vec![1.0, 1.0]);
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        let neg = g(vec![-1.0, -0.0]);
        assert_eq!(cosine_similarity(&a, &neg).unwrap(), -1.0);
        assert!((cosine_similarity(&a, &b).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(cosine_similarity(&a, &g(vec![0.0, 0.0])), Err(Error::ZeroNorm)));
        assert!(cosine_similarity(&a, &g(vec![1.0])).is_err());
    }

    #[test]
    fn median_is_lower_on_even_counts() {
        assert_eq!(lower_median(&[5, 3]), 3);
        assert_eq!(lower_median(&[7, 3, 5]), 5);
        assert_eq!(lower_median(&[9, 3, 7, 5]), 5);
    }

    #[test]
    fn tie_goes_to_smaller_scale() {
        assert_eq!(best_scale(&[(3, 0.5), (5, 0.9), (7, 0.9)]), 5);
        assert_eq!(best_scale(&[(3, 0.9 - 1e-14), (5, 0.9)]), 3);
        assert_eq!(best_scale(&[(3, 0.8), (5, 0.9)]), 5);
    }

    #[test]
    fn isotonic_projection() {
        let c = [3, 5, 7, 9];
        assert_eq!(isotonic_snap(&[3, 5, 7, 9], &c), vec![3, 5, 7, 9]);
        assert_eq!(isotonic_snap(&[3, 7, 5, 9], &c), vec![3, 5, 5, 9]);
        assert_eq!(isotonic_snap(&[9, 3], &c), vec![5, 5]);
        let out = isotonic_snap(&[5, 3, 9, 7, 7, 3], &c);
        assert!(out.windows(2).all(|w| w[0] <= w[1]));
    }
}
