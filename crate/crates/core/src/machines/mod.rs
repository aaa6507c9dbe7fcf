//! Closed-form score machines.
//!
//! Every machine implements [`ScoreMachine`] and is constructed through a
//! [`MachineRegistry`] from a [`MachineConfig`]. The built-in registry knows
//! five machines:
//!
//! | name   | candidate set for pixel `x`                          |
//! |--------|------------------------------------------------------|
//! | `is`   | whole training images                                |
//! | `es`   | every circular translate of every training image     |
//! | `ls`   | training patches centered at `x`                     |
//! | `els`  | every training patch (circular padding)              |
//! | `bels` | training patches with the same zero-padding class as `x` |

mod ideal;
pub mod kernel;
mod local;
pub mod softmax;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use ideal::{EquivariantScoreMachine, IdealScoreMachine};
pub use local::{BorderClassRule, CandidateRule, EveryPatchRule, LocalScoreMachine, SameLocationRule};

use crate::dictionary::PatchDictionary;
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, PaddingMode, Shape};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Is,
    Es,
    Ls,
    Els,
    Bels,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Is, Variant::Es, Variant::Ls, Variant::Els, Variant::Bels];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Is => "is",
            Variant::Es => "es",
            Variant::Ls => "ls",
            Variant::Els => "els",
            Variant::Bels => "bels",
        }
    }

    /// Whether the machine is restricted to a `P x P` neighborhood.
    pub fn is_local(self) -> bool {
        matches!(self, Variant::Ls | Variant::Els | Variant::Bels)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Posterior over candidates for one query.
///
/// `candidates` are dictionary indices for local machines, and indices into
/// the (label-filtered) training set or its translation orbit for global ones.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorWeights {
    pub candidates: Vec<usize>,
    pub log_weights: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PosteriorWeights {
    /// Candidate with the largest weight; ties go to the earliest entry.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        self.candidates[best]
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }
}

/// A score evaluator `phi -> M_t[phi]`.
pub trait ScoreMachine: Send + Sync {
    fn variant(&self) -> Variant;

    /// Shape of the training data the machine was built from.
    fn data_shape(&self) -> Shape;

    /// Patch sizes the machine can evaluate at. Empty for global machines,
    /// which ignore the `scale` argument.
    fn scales(&self) -> Vec<usize>;

    /// Score of the noised data distribution at noise level `alpha_bar`.
    fn score(&self, phi: &ImageGrid, alpha_bar: f64, scale: usize) -> Result<ImageGrid>;

    /// Posterior weights behind the score at `pixel` (global machines ignore it).
    fn posterior(&self, phi: &ImageGrid, alpha_bar: f64, scale: usize, pixel: (usize, usize))
        -> Result<PosteriorWeights>;

    /// Score at a single pixel. Local machines override this to avoid a full pass.
    fn score_pixel(&self, phi: &ImageGrid, alpha_bar: f64, scale: usize, pixel: (usize, usize)) -> Result<Vec<f64>> {
        let s = self.score(phi, alpha_bar, scale)?;
        Ok(s.pixel(pixel.0, pixel.1).to_vec())
    }

    fn score_at(&self, phi: &ImageGrid, t_index: usize, sched: &NoiseSchedule, scale: usize) -> Result<ImageGrid> {
        let ab = sched.alpha_bar(t_index);
        if ab >= 1.0 {
            return Err(Error::ZeroVariance(t_index));
        }
        self.score(phi, ab, scale)
    }

    /// Noise prediction implied by the score, `-sqrt(1 - ab) * M[phi]`.
    fn predict_noise(&self, phi: &ImageGrid, alpha_bar: f64, scale: usize) -> Result<ImageGrid> {
        let s = self.score(phi, alpha_bar, scale)?;
        let k = -(1.0 - alpha_bar).sqrt();
        s.with_data(s.data().iter().map(|v| k * v).collect())
    }
}

/// Everything needed to construct a machine.
#[derive(Debug, Clone)]
pub struct MachineConfig {
    pub variant: Variant,
    pub images: Arc<Vec<ImageGrid>>,
    /// Padding for local machines. ELS needs circular, BELS needs zero.
    pub pad: PaddingMode,
    /// Patch sizes to prepare dictionaries for (local machines).
    pub scales: Vec<usize>,
    /// Prebuilt dictionaries; any scale listed here is not rebuilt.
    pub dictionaries: Vec<Arc<PatchDictionary>>,
    pub label: Option<u32>,
    /// Keep only the `k` largest log-weights per query. Approximate.
    pub top_k: Option<usize>,
    /// Merge identical patches and weight them by multiplicity.
    pub dedup: bool,
    pub stride: usize,
}

impl MachineConfig {
    pub fn new(variant: Variant, images: Vec<ImageGrid>) -> Self {
        let pad = match variant {
            Variant::Bels => PaddingMode::Zero,
            _ => PaddingMode::Circular,
        };
        Self {
            variant,
            images: Arc::new(images),
            pad,
            scales: Vec::new(),
            dictionaries: Vec::new(),
            label: None,
            top_k: None,
            dedup: false,
            stride: 1,
        }
    }

    pub fn with_scales(mut self, scales: impl IntoIterator<Item = usize>) -> Self {
        self.scales = scales.into_iter().collect();
        self
    }

    pub fn with_pad(mut self, pad: PaddingMode) -> Self {
        self.pad = pad;
        self
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    pub fn with_top_k(mut self, k: Option<usize>) -> Self {
        self.top_k = k;
        self
    }

    pub fn with_dedup(mut self, dedup: bool) -> Self {
        self.dedup = dedup;
        self
    }

    pub fn with_dictionary(mut self, dict: Arc<PatchDictionary>) -> Self {
        self.dictionaries.push(dict);
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if let Some(0) = self.top_k {
            return Err(Error::Config("top_k must be positive".into()));
        }
        match self.variant {
            Variant::Is | Variant::Es => {
                if self.images.is_empty() {
                    return Err(Error::Config(format!("{} needs whole training images", self.variant)));
                }
            }
            Variant::Ls | Variant::Els | Variant::Bels => {
                if self.images.is_empty() && self.dictionaries.is_empty() {
                    return Err(Error::Config(format!("{} needs a patch dictionary", self.variant)));
                }
                let required = match self.variant {
                    Variant::Els => Some(PaddingMode::Circular),
                    Variant::Bels => Some(PaddingMode::Zero),
                    _ => None,
                };
                if let Some(req) = required {
                    if self.pad != req || self.dictionaries.iter().any(|d| d.padding() != req) {
                        return Err(Error::Config(format!("{} requires {req} padding", self.variant)));
                    }
                }
                if self.dictionaries.iter().any(|d| d.padding() != self.pad) {
                    return Err(Error::Config("dictionary padding differs from machine padding".into()));
                }
            }
        }
        Ok(())
    }
}

pub type MachineFactory = fn(&MachineConfig) -> Result<Box<dyn ScoreMachine>>;

/// Name-keyed table of machine constructors.
#[derive(Clone)]
pub struct MachineRegistry {
    factories: BTreeMap<String, MachineFactory>,
}

impl Default for MachineRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Variant::Is.name(), |c| Ok(Box::new(IdealScoreMachine::new(c)?)));
        r.register(Variant::Es.name(), |c| Ok(Box::new(EquivariantScoreMachine::new(c)?)));
        r.register(Variant::Ls.name(), |c| Ok(Box::new(LocalScoreMachine::<SameLocationRule>::new(c)?)));
        r.register(Variant::Els.name(), |c| Ok(Box::new(LocalScoreMachine::<EveryPatchRule>::new(c)?)));
        r.register(Variant::Bels.name(), |c| Ok(Box::new(LocalScoreMachine::<BorderClassRule>::new(c)?)));
        r
    }
}

impl MachineRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    /// Registers (or replaces) a constructor under `name`.
    pub fn register(&mut self, name: &str, factory: MachineFactory) {
        self.factories.insert(name.to_ascii_lowercase(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build_named(&self, name: &str, config: &MachineConfig) -> Result<Box<dyn ScoreMachine>> {
        let f = self
            .factories
            .get(&name.to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownVariant(name.to_string()))?;
        config.validate()?;
        f(config)
    }

    pub fn build(&self, config: &MachineConfig) -> Result<Box<dyn ScoreMachine>> {
        self.build_named(config.variant.name(), config)
    }
}

/// Builds a machine from the default registry.
pub fn build_machine(config: &MachineConfig) -> Result<Box<dyn ScoreMachine>> {
    MachineRegistry::default().build(config)
}

fn check_alpha_bar(alpha_bar: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha_bar) {
        return Err(if alpha_bar >= 1.0 {
            Error::DegenerateAlphaBar
        } else {
            Error::Schedule(format!("alpha_bar {alpha_bar} outside [0, 1)"))
        });
    }
    Ok(())
}

fn training_subset(images: &[ImageGrid], label: Option<u32>) -> Result<Vec<ImageGrid>> {
    let out: Vec<ImageGrid> = match label {
        Some(l) => images.iter().filter(|im| im.label() == Some(l)).cloned().collect(),
        None => images.to_vec(),
    };
    let first = out.first().ok_or(Error::Empty("training set after label filter"))?;
    if let Some(bad) = out.iter().find(|im| im.shape() != first.shape()) {
        return Err(Error::ShapeMismatch { expected: first.shape().to_string(), actual: bad.shape().to_string() });
    }
    Ok(out)
}

// Free-function entry points mirroring the individual machines.

pub fn ideal_score(phi: &ImageGrid, t_index: usize, data: &[ImageGrid], sched: &NoiseSchedule) -> Result<ImageGrid> {
    IdealScoreMachine::new(&MachineConfig::new(Variant::Is, data.to_vec()))?.score_at(phi, t_index, sched, 0)
}

pub fn equivariant_score(phi: &ImageGrid, t_index: usize, data: &[ImageGrid], sched: &NoiseSchedule) -> Result<ImageGrid> {
    EquivariantScoreMachine::new(&MachineConfig::new(Variant::Es, data.to_vec()))?.score_at(phi, t_index, sched, 0)
}

pub fn local_score(
    phi: &ImageGrid,
    t_index: usize,
    dict: Arc<PatchDictionary>,
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    let scale = dict.patch_size();
    let cfg = MachineConfig::new(Variant::Ls, Vec::new()).with_pad(dict.padding()).with_dictionary(dict);
    LocalScoreMachine::<SameLocationRule>::new(&cfg)?.score_at(phi, t_index, sched, scale)
}

pub fn els_score(phi: &ImageGrid, t_index: usize, dict: Arc<PatchDictionary>, sched: &NoiseSchedule) -> Result<ImageGrid> {
    let scale = dict.patch_size();
    let cfg = MachineConfig::new(Variant::Els, Vec::new()).with_pad(dict.padding()).with_dictionary(dict);
    cfg.validate()?;
    LocalScoreMachine::<EveryPatchRule>::new(&cfg)?.score_at(phi, t_index, sched, scale)
}

pub fn bels_score(phi: &ImageGrid, t_index: usize, dict: Arc<PatchDictionary>, sched: &NoiseSchedule) -> Result<ImageGrid> {
    let scale = dict.patch_size();
    let cfg = MachineConfig::new(Variant::Bels, Vec::new()).with_pad(dict.padding()).with_dictionary(dict);
    cfg.validate()?;
    LocalScoreMachine::<BorderClassRule>::new(&cfg)?.score_at(phi, t_index, sched, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("xyz".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn registry_lists_builtins_and_accepts_custom() {
        let mut r = MachineRegistry::default();
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["bels", "els", "es", "is", "ls"]);
        r.register("memorizer", |c| Ok(Box::new(IdealScoreMachine::new(c)?)));
        let img = ImageGrid::filled(2, 2, 1, 0.5);
        let cfg = MachineConfig::new(Variant::Is, vec![img.clone()]);
        let m = r.build_named("memorizer", &cfg).unwrap();
        assert_eq!(m.variant(), Variant::Is);
        assert!(r.build_named("nope", &cfg).is_err());
    }

    #[test]
    fn padding_requirements_enforced() {
        let img = ImageGrid::filled(4, 4, 1, 0.5);
        let r = MachineRegistry::default();
        let els = MachineConfig::new(Variant::Els, vec![img.clone()]).with_pad(PaddingMode::Zero).with_scales([3]);
        assert!(matches!(r.build(&els), Err(Error::Config(_))));
        let bels = MachineConfig::new(Variant::Bels, vec![img.clone()]).with_pad(PaddingMode::Circular).with_scales([3]);
        assert!(matches!(r.build(&bels), Err(Error::Config(_))));
        let is = MachineConfig::new(Variant::Is, vec![]);
        assert!(matches!(r.build(&is), Err(Error::Config(_))));
        let topk = MachineConfig::new(Variant::Is, vec![img]).with_top_k(Some(0));
        assert!(r.build(&topk).is_err());
    }
}
