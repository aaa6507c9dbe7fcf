//! Reverse-process integration from Gaussian noise to a sample.
//!
//! A run over a schedule with `T` steps evaluates the machine at grid indices
//! `T, T-1, ..., 1` and lands on index 0. The scale used when evaluating at
//! index `k` is `ScaleSchedule::at(k)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Shape};
use crate::machines::ScoreMachine;
use crate::schedule::NoiseSchedule;

/// Patch size per reverse step; entry `i` is used at grid index `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    scales: Vec<usize>,
}

impl ScaleSchedule {
    /// Validated schedule: odd entries `>= 3`, never growing as `t` decreases.
    pub fn new(scales: Vec<usize>) -> Result<Self> {
        let s = Self::unordered(scales)?;
        if let Some(i) = s.monotonicity_violations().first() {
            return Err(Error::ScaleSchedule(format!(
                "scale grows as t decreases: index {} has {} but index {} has {}",
                i + 1,
                s.scales[*i],
                i + 2,
                s.scales[i + 1]
            )));
        }
        Ok(s)
    }

    /// Like [`ScaleSchedule::new`] but without the ordering requirement.
    pub fn unordered(scales: Vec<usize>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::ScaleSchedule("empty schedule".into()));
        }
        if let Some(bad) = scales.iter().find(|&&p| p < 3 || p % 2 == 0) {
            return Err(Error::ScaleSchedule(format!("scale {bad} is not an odd size >= 3")));
        }
        Ok(Self { scales })
    }

    pub fn constant(scale: usize, steps: usize) -> Result<Self> {
        Self::new(vec![scale; steps])
    }

    pub fn steps(&self) -> usize {
        self.scales.len()
    }

    /// Scale used when evaluating at grid index `t_index` (1-based).
    pub fn at(&self, t_index: usize) -> usize {
        self.scales[t_index - 1]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.scales
    }

    /// Positions `i` where `scales[i] > scales[i + 1]`.
    pub fn monotonicity_violations(&self) -> Vec<usize> {
        self.scales.windows(2).enumerate().filter(|(_, w)| w[0] > w[1]).map(|(i, _)| i).collect()
    }

    pub fn distinct(&self) -> Vec<usize> {
        let mut v = self.scales.clone();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Ddim,
    Euler,
}

impl std::str::FromStr for Integrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Integrator::Ddim),
            "euler" => Ok(Integrator::Euler),
            other => Err(Error::Config(format!("unknown integrator '{other}'"))),
        }
    }
}

/// Deterministic DDIM update from grid index `from` to `to` given a noise estimate.
pub fn ddim_step(
    state: &ImageGrid,
    from: usize,
    to: usize,
    noise_hat: &ImageGrid,
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    if from <= to {
        return Err(Error::Config(format!("ddim step must go backwards in time ({from} -> {to})")));
    }
    ddim_update(state, sched.alpha_bar(from), sched.alpha_bar(to), noise_hat).map_err(|e| match e {
        Error::DegenerateAlphaBar => Error::ZeroVariance(from),
        other => other,
    })
}

/// DDIM update between two explicit noise levels.
pub fn ddim_update(state: &ImageGrid, ab_from: f64, ab_to: f64, noise_hat: &ImageGrid) -> Result<ImageGrid> {
    state.check_same_shape(noise_hat)?;
    if ab_from >= 1.0 || ab_from <= 0.0 {
        return Err(if ab_from >= 1.0 {
            Error::DegenerateAlphaBar
        } else {
            Error::Schedule("ddim cannot start from alpha_bar = 0".into())
        });
    }
    let (sf, nf) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (st, nt) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    let data = state
        .data()
        .iter()
        .zip(noise_hat.data())
        .map(|(x, e)| {
            let x0 = (x - nf * e) / sf;
            st * x0 + nt * e
        })
        .collect::<Vec<_>>();
    if data.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::NonFinite("ddim update"));
    }
    state.with_data(data)
}

/// Explicit Euler step of the reverse flow `-dphi/dt = gamma (phi + s)`.
///
/// The step-averaged drift uses `gamma * dt = ln(ab_to / ab_from) / 2`,
/// the finite difference of `-ln(ab) / 2` over `[to, from]`.
pub fn euler_step(state: &ImageGrid, from: usize, to: usize, score: &ImageGrid, sched: &NoiseSchedule) -> Result<ImageGrid> {
    if from <= to {
        return Err(Error::Config(format!("euler step must go backwards in time ({from} -> {to})")));
    }
    state.check_same_shape(score)?;
    let (af, at) = (sched.alpha_bar(from), sched.alpha_bar(to));
    if af <= 0.0 {
        return Err(Error::Schedule("euler drift undefined at alpha_bar = 0".into()));
    }
    let g = 0.5 * (at / af).ln();
    state.with_data(state.data().iter().zip(score.data()).map(|(x, s)| x + g * (x + s)).collect())
}

/// One recorded point of a reverse trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub t_index: usize,
    pub state: ImageGrid,
    /// Noise estimate the integrator used at this point.
    pub noise: ImageGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub label: Option<u32>,
    pub config_digest: String,
    pub steps: Vec<TrajectoryStep>,
    pub final_state: ImageGrid,
}

#[derive(Debug, Clone)]
pub struct SampleOptions<'a> {
    pub schedule: &'a NoiseSchedule,
    /// Required for local machines; ignored by global ones.
    pub scales: Option<&'a ScaleSchedule>,
    pub shape: Shape,
    pub label: Option<u32>,
    pub integrator: Integrator,
    pub record: bool,
    pub config_digest: String,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub image: ImageGrid,
    pub trajectory: Option<Trajectory>,
}

/// Initial state `phi_T ~ N(0, I)` drawn from `seed`.
pub fn initial_noise(seed: u64, shape: Shape) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    ImageGrid::new(shape.height, shape.width, shape.channels, data).expect("finite gaussian draws")
}

/// Integrates the reverse process for one seed.
pub fn sample(machine: &dyn ScoreMachine, seed: u64, opts: &SampleOptions<'_>) -> Result<SampleOutput> {
    let sched = opts.schedule;
    let steps = sched.steps();
    if machine.variant().is_local() {
        let scales = opts.scales.ok_or_else(|| Error::Config(format!("{} needs a scale schedule", machine.variant())))?;
        if scales.steps() != steps {
            return Err(Error::ScaleSchedule(format!(
                "{} scales for a {steps}-step schedule",
                scales.steps()
            )));
        }
        let have = machine.scales();
        if let Some(p) = scales.distinct().into_iter().find(|p| !have.contains(p)) {
            return Err(Error::Dictionary(format!("machine has no dictionary at scale {p}")));
        }
    }
    let mut state = initial_noise(seed, opts.shape).with_label(opts.label);
    let mut recorded = Vec::new();
    for k in (1..=steps).rev() {
        let ab = sched.alpha_bar(k);
        let scale = opts.scales.map_or(0, |s| s.at(k));
        let score = machine.score(&state, ab, scale)?;
        let noise = if opts.record || opts.integrator == Integrator::Ddim {
            let c = -(1.0 - ab).sqrt();
            Some(score.with_data(score.data().iter().map(|v| c * v).collect()).map_err(|_| Error::Diverged(k))?)
        } else {
            None
        };
        let next = match opts.integrator {
            Integrator::Ddim => ddim_step(&state, k, k - 1, noise.as_ref().expect("computed for ddim"), sched),
            Integrator::Euler => euler_step(&state, k, k - 1, &score, sched),
        }
        .map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged(k),
            other => other,
        })?;
        if opts.record {
            recorded.push(TrajectoryStep { t_index: k, state: state.clone(), noise: noise.expect("recorded") });
        }
        state = next.with_label(opts.label);
    }
    let trajectory = opts.record.then(|| Trajectory {
        seed,
        label: opts.label,
        config_digest: opts.config_digest.clone(),
        steps: recorded,
        final_state: state.clone(),
    });
    Ok(SampleOutput { image: state, trajectory })
}

/// Samples several seeds in parallel; output order follows `seeds`.
pub fn sample_batch(machine: &dyn ScoreMachine, seeds: &[u64], opts: &SampleOptions<'_>) -> Result<Vec<SampleOutput>> {
    seeds.par_iter().map(|&s| sample(machine, s, opts)).collect()
}
