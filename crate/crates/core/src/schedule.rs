//! Noise schedules and the forward (noising) process.
//!
//! Time is addressed by step index `k` on the uniform grid `t = k / steps`.
//! Index 0 is clean data, index `steps` is (nearly) pure noise.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

const COSINE_OFFSET: f64 = 0.008;
const ALPHA_BAR_MIN: f64 = 1e-5;
const ALPHA_BAR_MAX: f64 = 1.0 - 1e-5;
const LINEAR_BETA_MIN: f64 = 0.1;
const LINEAR_BETA_MAX: f64 = 20.0;
const LOG_SNR_MAX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
    LogSnr,
    Custom,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            "logsnr" => Ok(ScheduleKind::LogSnr),
            "custom" => Ok(ScheduleKind::Custom),
            other => Err(Error::Schedule(format!("unknown schedule kind '{other}'"))),
        }
    }
}

/// Discretized `alpha_bar` over `steps + 1` grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with offset 0.008, normalized so `alpha_bar(0) = 1`.
    ///
    /// The floor is applied affinely, `a_min + (1 - a_min) f(t) / f(0)`, rather
    /// than by a hard clamp, so the grid stays strictly decreasing at any step
    /// count and ends exactly at `a_min`.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("steps must be at least 1".into()));
        }
        let f = |t: f64| {
            let c = ((t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos();
            c * c
        };
        let f0 = f(0.0);
        let alpha_bar = (0..=steps)
            .map(|k| {
                if k == 0 {
                    1.0
                } else {
                    let r = f(k as f64 / steps as f64) / f0;
                    (ALPHA_BAR_MIN + (1.0 - ALPHA_BAR_MIN) * r).min(ALPHA_BAR_MAX)
                }
            })
            .collect();
        Self::validated(ScheduleKind::Cosine, alpha_bar)
    }

    /// Continuous-time linear-beta schedule,
    /// `alpha_bar(t) = exp(-(b0 t + (b1 - b0) t^2 / 2))` with `b0 = 0.1`, `b1 = 20`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("steps must be at least 1".into()));
        }
        let alpha_bar = (0..=steps)
            .map(|k| {
                let t = k as f64 / steps as f64;
                (-(LINEAR_BETA_MIN * t + 0.5 * (LINEAR_BETA_MAX - LINEAR_BETA_MIN) * t * t)).exp()
            })
            .collect();
        Self::validated(ScheduleKind::Linear, alpha_bar)
    }

    /// Uniform in log signal-to-noise ratio `l = ln(ab / (1 - ab))`, from
    /// `+20` at the first noisy grid point down to `-20`; `alpha_bar(0) = 1`.
    ///
    /// Unlike the cosine grid, the spacing in `ln sigma` stays constant as
    /// `t -> 0`, which resolves the late, nearly noise-free part of the flow.
    pub fn log_snr(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("steps must be at least 1".into()));
        }
        let alpha_bar = (0..=steps)
            .map(|k| {
                if k == 0 {
                    return 1.0;
                }
                let l = if steps == 1 {
                    -LOG_SNR_MAX
                } else {
                    LOG_SNR_MAX - 2.0 * LOG_SNR_MAX * (k - 1) as f64 / (steps - 1) as f64
                };
                1.0 / (1.0 + (-l).exp())
            })
            .collect();
        Self::validated(ScheduleKind::LogSnr, alpha_bar)
    }

    pub fn custom(alpha_bar: Vec<f64>) -> Result<Self> {
        Self::validated(ScheduleKind::Custom, alpha_bar)
    }

    pub fn from_kind(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Cosine => Self::cosine(steps),
            ScheduleKind::Linear => Self::linear(steps),
            ScheduleKind::LogSnr => Self::log_snr(steps),
            ScheduleKind::Custom => Err(Error::Schedule("custom schedules need explicit values".into())),
        }
    }

    fn validated(kind: ScheduleKind, alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Schedule("need at least two grid points".into()));
        }
        if alpha_bar.iter().any(|a| !a.is_finite() || !(0.0..=1.0).contains(a)) {
            return Err(Error::Schedule("values must lie in [0, 1]".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Schedule("alpha_bar must be strictly decreasing".into()));
        }
        let (first, last) = (alpha_bar[0], alpha_bar[alpha_bar.len() - 1]);
        if first <= 0.999 {
            return Err(Error::Schedule(format!("alpha_bar(0) = {first} must exceed 0.999")));
        }
        if last >= 0.01 {
            return Err(Error::Schedule(format!("alpha_bar(1) = {last} must be below 0.01")));
        }
        Ok(Self { kind, alpha_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t_index: usize) -> f64 {
        self.alpha_bar[t_index]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Normalized time of a grid index.
    pub fn time(&self, t_index: usize) -> f64 {
        t_index as f64 / self.steps() as f64
    }

    /// Serializes as a JSON array of `alpha_bar` values.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.alpha_bar).expect("finite floats serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let values: Vec<f64> = serde_json::from_str(text)?;
        Self::custom(values)
    }
}

/// `sqrt(ab) * img + sqrt(1 - ab) * eta`.
pub fn forward_noise(img: &ImageGrid, t_index: usize, eta: &ImageGrid, sched: &NoiseSchedule) -> Result<ImageGrid> {
    forward_noise_at(img, sched.alpha_bar(t_index), eta)
}

pub fn forward_noise_at(img: &ImageGrid, alpha_bar: f64, eta: &ImageGrid) -> Result<ImageGrid> {
    img.check_same_shape(eta)?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = img.data().iter().zip(eta.data()).map(|(x, e)| a * x + b * e).collect();
    img.with_data(data)
}

/// Tweedie: the noise estimate implied by a score, `eta = -sqrt(1 - ab) * s`.
pub fn score_to_noise(score: &ImageGrid, t_index: usize, sched: &NoiseSchedule) -> Result<ImageGrid> {
    let ab = sched.alpha_bar(t_index);
    if ab >= 1.0 {
        return Err(Error::ZeroVariance(t_index));
    }
    let k = -(1.0 - ab).sqrt();
    score.with_data(score.data().iter().map(|s| k * s).collect())
}

/// Inverse of [`score_to_noise`], `s = -eta / sqrt(1 - ab)`.
pub fn noise_to_score(noise: &ImageGrid, t_index: usize, sched: &NoiseSchedule) -> Result<ImageGrid> {
    let ab = sched.alpha_bar(t_index);
    if ab >= 1.0 {
        return Err(Error::ZeroVariance(t_index));
    }
    let k = (1.0 - ab).sqrt();
    noise.with_data(noise.data().iter().map(|e| -e / k).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_endpoints_and_monotone() {
        let s = NoiseSchedule::cosine(20).unwrap();
        assert_eq!(s.steps(), 20);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(20) <= 0.01);
        assert_eq!(s.alpha_bar(20), ALPHA_BAR_MIN);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn cosine_matches_closed_form() {
        // independent evaluation of the closed form at t = 0.5
        let s = NoiseSchedule::cosine(2).unwrap();
        let num = ((0.508f64 / 1.008) * std::f64::consts::PI / 2.0).cos().powi(2);
        let den = ((0.008f64 / 1.008) * std::f64::consts::PI / 2.0).cos().powi(2);
        let r = num / den;
        assert!((s.alpha_bar(1) - (1e-5 + (1.0 - 1e-5) * r)).abs() < 1e-15);
        assert!((s.alpha_bar(1) - r).abs() < 1e-5);
    }

    #[test]
    fn log_snr_is_uniform_in_log_odds() {
        let s = NoiseSchedule::log_snr(5).unwrap();
        let l: Vec<f64> = s.alpha_bars()[1..].iter().map(|a| (a / (1.0 - a)).ln()).collect();
        for (k, v) in l.iter().enumerate() {
            assert!((v - (20.0 - 10.0 * k as f64)).abs() < 1e-6, "{k}: {v}");
        }
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(NoiseSchedule::from_kind(ScheduleKind::LogSnr, 7).unwrap().steps(), 7);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(NoiseSchedule::cosine(0).is_err());
        assert!(NoiseSchedule::linear(0).is_err());
        assert!(NoiseSchedule::log_snr(0).is_err());
    }

    #[test]
    fn custom_validation() {
        assert!(NoiseSchedule::custom(vec![1.0, 0.5, 0.0]).is_ok());
        assert!(NoiseSchedule::custom(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(NoiseSchedule::custom(vec![0.99, 0.0]).is_err());
        assert!(NoiseSchedule::custom(vec![1.0, 0.1]).is_err());
        let s = NoiseSchedule::custom(vec![1.0, 0.75, 0.0]).unwrap();
        assert_eq!(NoiseSchedule::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn forward_noise_examples() {
        let s = NoiseSchedule::custom(vec![1.0, 0.75, 0.0]).unwrap();
        let img = ImageGrid::filled(2, 2, 1, 1.0);
        let eta = ImageGrid::new(2, 2, 1, vec![0.3, -0.2, 1.5, 0.0]).unwrap();
        assert_eq!(forward_noise(&img, 0, &eta, &s).unwrap(), img);
        assert_eq!(forward_noise(&img, 2, &eta, &s).unwrap(), eta);
        let zeros = ImageGrid::zeros(2, 2, 1);
        let out = forward_noise(&img, 1, &zeros, &s).unwrap();
        for v in out.data() {
            assert!((v - 0.8660254037844386).abs() < 1e-15);
        }
        let bad = ImageGrid::zeros(2, 3, 1);
        assert!(matches!(forward_noise(&img, 1, &bad, &s), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn score_noise_examples() {
        let s = NoiseSchedule::custom(vec![1.0, 0.75, 0.0]).unwrap();
        let zero = ImageGrid::zeros(1, 2, 1);
        assert_eq!(score_to_noise(&zero, 1, &s).unwrap().data(), &[0.0, 0.0]);
        let sc = ImageGrid::new(1, 2, 1, vec![-4.0, 2.5]).unwrap();
        assert_eq!(score_to_noise(&sc, 1, &s).unwrap().data(), &[2.0, -1.25]);
        assert_eq!(score_to_noise(&sc, 2, &s).unwrap().data(), &[4.0, -2.5]);
        assert!(matches!(score_to_noise(&sc, 0, &s), Err(Error::ZeroVariance(0))));
        assert!(matches!(noise_to_score(&sc, 0, &s), Err(Error::ZeroVariance(0))));
    }

    proptest! {
        #[test]
        fn schedules_valid_for_all_step_counts(steps in 1usize..=1000) {
            for s in [NoiseSchedule::cosine(steps).unwrap(), NoiseSchedule::linear(steps).unwrap(), NoiseSchedule::log_snr(steps).unwrap()] {
                prop_assert!(s.alpha_bar(0) > 0.999 && s.alpha_bar(0) <= 1.0);
                prop_assert!(s.alpha_bar(steps) < 0.01);
                prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            }
        }

        #[test]
        fn score_noise_round_trip(v in proptest::collection::vec(-50.0f64..50.0, 6), k in 1usize..20) {
            let s = NoiseSchedule::cosine(20).unwrap();
            let g = ImageGrid::new(2, 3, 1, v).unwrap();
            let back = noise_to_score(&score_to_noise(&g, k, &s).unwrap(), k, &s).unwrap();
            for (a, b) in g.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(1e-300));
            }
        }

        #[test]
        fn forward_noise_is_affine(
            a in proptest::collection::vec(-1.0f64..1.0, 4),
            b in proptest::collection::vec(-1.0f64..1.0, 4),
            e in proptest::collection::vec(-3.0f64..3.0, 4),
            alpha in -2.0f64..2.0, beta in -2.0f64..2.0, k in 0usize..=20,
        ) {
            let s = NoiseSchedule::cosine(20).unwrap();
            let (ga, gb, ge) = (
                ImageGrid::new(2, 2, 1, a.clone()).unwrap(),
                ImageGrid::new(2, 2, 1, b.clone()).unwrap(),
                ImageGrid::new(2, 2, 1, e.clone()).unwrap(),
            );
            let mix = ImageGrid::new(2, 2, 1, a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect()).unwrap();
            let lhs = forward_noise(&mix, k, &ge, &s).unwrap();
            let fa = forward_noise(&ga, k, &ge, &s).unwrap();
            let fb = forward_noise(&gb, k, &ge, &s).unwrap();
            let c = (1.0 - s.alpha_bar(k)).sqrt();
            for i in 0..4 {
                let rhs = alpha * fa.data()[i] + beta * fb.data()[i] - (alpha + beta - 1.0) * c * e[i];
                prop_assert!((lhs.data()[i] - rhs).abs() < 1e-12);
            }
        }
    }
}
