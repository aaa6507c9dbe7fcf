//! Patch-local machines (LS, ELS, BELS).
//!
//! All three share one evaluation path: for each output pixel, extract the
//! query window, compare it against a candidate set of dictionary patches,
//! and pull the pixel toward the posterior mean of the candidates' center
//! values. They differ only in how the candidate set is chosen, which is
//! what [`CandidateRule`] captures.

use std::collections::{BTreeMap, HashMap};
use std::marker::PhantomData;
use std::sync::Arc;

use rayon::prelude::*;

use super::kernel::{distance_block, Candidates, QUERY_BLOCK};
use super::softmax::{shifted_exp, softmax, top_k_positions};
use super::{check_alpha_bar, MachineConfig, PosteriorWeights, ScoreMachine, Variant};
use crate::dictionary::{DictionaryOptions, PatchDictionary};
use crate::error::{Error, Result};
use crate::grid::{fill_window, BorderSignature, ImageGrid, Shape};

/// Candidates streamed per pass; sized so a block's distances stay in L1/L2.
const CANDIDATE_CHUNK: usize = 1024;

/// Candidate patches for one query pixel.
pub enum CandidateSet<'a> {
    /// Every dictionary entry.
    All,
    /// A precomputed list shared by every pixel with the same `key`.
    Shared { key: usize, indices: &'a [usize] },
    /// A list specific to this pixel.
    Own(Vec<usize>),
}

impl CandidateSet<'_> {
    fn as_candidates(&self) -> Candidates<'_> {
        match self {
            CandidateSet::All => Candidates::All,
            CandidateSet::Shared { indices, .. } => Candidates::Subset(indices),
            CandidateSet::Own(v) => Candidates::Subset(v),
        }
    }
}

/// How a local machine picks the patches a pixel may have come from.
pub trait CandidateRule: Send + Sync + 'static {
    const VARIANT: Variant;
    type Index: Send + Sync;

    fn prepare(dict: &PatchDictionary, label: Option<u32>) -> Result<Self::Index>;

    fn candidates<'a>(
        dict: &'a PatchDictionary,
        index: &'a Self::Index,
        label: Option<u32>,
        phi_shape: Shape,
        pixel: (usize, usize),
    ) -> Result<CandidateSet<'a>>;

    fn check_shape(dict: &PatchDictionary, phi: Shape) -> Result<()> {
        if dict.channels() != phi.channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", dict.channels()),
                actual: format!("{} channels", phi.channels),
            });
        }
        Ok(())
    }
}

/// LS: only patches centered at the same location.
pub struct SameLocationRule;

impl CandidateRule for SameLocationRule {
    const VARIANT: Variant = Variant::Ls;
    type Index = ();

    fn prepare(dict: &PatchDictionary, _label: Option<u32>) -> Result<()> {
        if dict.is_deduplicated() {
            return Err(Error::Config("ls needs per-location patches; disable dedup".into()));
        }
        Ok(())
    }

    fn candidates<'a>(
        dict: &'a PatchDictionary,
        _index: &'a (),
        label: Option<u32>,
        _phi_shape: Shape,
        (row, col): (usize, usize),
    ) -> Result<CandidateSet<'a>> {
        let v = dict.location_restricted_view(row, col, label)?;
        if v.is_empty() {
            return Err(Error::Dictionary(format!(
                "no training patch centered at ({row}, {col}); was the dictionary built with a stride?"
            )));
        }
        Ok(CandidateSet::Own(v))
    }

    fn check_shape(dict: &PatchDictionary, phi: Shape) -> Result<()> {
        if dict.image_shape() != phi {
            return Err(Error::ShapeMismatch { expected: dict.image_shape().to_string(), actual: phi.to_string() });
        }
        Ok(())
    }
}

/// ELS: every patch at every location.
pub struct EveryPatchRule;

impl CandidateRule for EveryPatchRule {
    const VARIANT: Variant = Variant::Els;
    type Index = Vec<usize>;

    fn prepare(dict: &PatchDictionary, label: Option<u32>) -> Result<Vec<usize>> {
        match label {
            Some(_) => {
                let v = dict.all_indices(label);
                if v.is_empty() {
                    return Err(Error::Empty("dictionary after label filter"));
                }
                Ok(v)
            }
            None => Ok(Vec::new()),
        }
    }

    fn candidates<'a>(
        _dict: &'a PatchDictionary,
        index: &'a Vec<usize>,
        label: Option<u32>,
        _phi_shape: Shape,
        _pixel: (usize, usize),
    ) -> Result<CandidateSet<'a>> {
        Ok(match label {
            Some(_) => CandidateSet::Shared { key: 0, indices: index },
            None => CandidateSet::All,
        })
    }
}

/// BELS: patches whose zero-padding footprint matches the query's.
pub struct BorderClassRule;

pub struct BorderClasses {
    classes: BTreeMap<BorderSignature, (usize, Vec<usize>)>,
}

impl CandidateRule for BorderClassRule {
    const VARIANT: Variant = Variant::Bels;
    type Index = BorderClasses;

    fn prepare(dict: &PatchDictionary, label: Option<u32>) -> Result<BorderClasses> {
        let mut classes = BTreeMap::new();
        for (k, sig) in dict.classes().keys().enumerate() {
            if let Ok(v) = dict.eligible_patches(*sig, label) {
                classes.insert(*sig, (k, v));
            }
        }
        Ok(BorderClasses { classes })
    }

    fn candidates<'a>(
        dict: &'a PatchDictionary,
        index: &'a BorderClasses,
        _label: Option<u32>,
        phi_shape: Shape,
        (row, col): (usize, usize),
    ) -> Result<CandidateSet<'a>> {
        let sig = BorderSignature::of(phi_shape.height, phi_shape.width, dict.patch_size(), row, col);
        match index.classes.get(&sig) {
            Some((key, indices)) => Ok(CandidateSet::Shared { key: *key, indices }),
            None => Err(Error::NoConsistentPatches(sig.to_string())),
        }
    }
}

struct ScaleEntry<I> {
    dict: Arc<PatchDictionary>,
    index: I,
}

/// A local machine parameterized by its candidate rule.
pub struct LocalScoreMachine<R: CandidateRule> {
    scales: BTreeMap<usize, ScaleEntry<R::Index>>,
    label: Option<u32>,
    top_k: Option<usize>,
    shape: Shape,
    _rule: PhantomData<R>,
}

impl<R: CandidateRule> LocalScoreMachine<R> {
    pub fn new(config: &MachineConfig) -> Result<Self> {
        let mut dicts: BTreeMap<usize, Arc<PatchDictionary>> = BTreeMap::new();
        for d in &config.dictionaries {
            if d.padding() != config.pad {
                return Err(Error::Config("dictionary padding differs from machine padding".into()));
            }
            dicts.insert(d.patch_size(), d.clone());
        }
        for &p in &config.scales {
            if dicts.contains_key(&p) {
                continue;
            }
            if config.images.is_empty() {
                return Err(Error::Config(format!("no dictionary or training images for scale {p}")));
            }
            let mut opts = DictionaryOptions::new(p, config.pad);
            opts.stride = config.stride;
            let d = PatchDictionary::build(&config.images, opts)?;
            dicts.insert(p, Arc::new(d));
        }
        if dicts.is_empty() {
            return Err(Error::Config(format!("{} needs at least one scale", R::VARIANT)));
        }
        let shape = dicts.values().next().expect("nonempty").image_shape();
        if dicts.values().any(|d| d.image_shape() != shape) {
            return Err(Error::Dictionary("dictionaries built from different image shapes".into()));
        }
        let mut scales = BTreeMap::new();
        for (p, d) in dicts {
            let d = if config.dedup && !d.is_deduplicated() { Arc::new(d.deduplicated()) } else { d };
            let index = R::prepare(&d, config.label)?;
            scales.insert(p, ScaleEntry { dict: d, index });
        }
        Ok(Self { scales, label: config.label, top_k: config.top_k, shape, _rule: PhantomData })
    }

    pub fn dictionary(&self, scale: usize) -> Option<&Arc<PatchDictionary>> {
        self.scales.get(&scale).map(|e| &e.dict)
    }

    fn entry(&self, scale: usize) -> Result<&ScaleEntry<R::Index>> {
        self.scales.get(&scale).ok_or_else(|| {
            Error::Dictionary(format!(
                "{} has no dictionary at scale {scale} (available: {:?})",
                R::VARIANT,
                self.scales.keys().collect::<Vec<_>>()
            ))
        })
    }

    /// Logits of every candidate for one query, given its distances.
    fn logits(dict: &PatchDictionary, cands: Candidates<'_>, dists: &[f64], alpha_bar: f64, out: &mut Vec<f64>) {
        out.clear();
        let counts = dict.counts();
        let weighted = dict.is_deduplicated();
        if alpha_bar == 0.0 {
            out.extend((0..dists.len()).map(|j| if weighted { (counts[cands.get(j)] as f64).ln() } else { 0.0 }));
            return;
        }
        let scale = -0.5 / (1.0 - alpha_bar);
        if weighted {
            out.extend(dists.iter().enumerate().map(|(j, d)| d * scale + (counts[cands.get(j)] as f64).ln()));
        } else {
            out.extend(dists.iter().map(|d| d * scale));
        }
    }

    /// Posterior means of the candidates' center values for a block of
    /// packed queries, `nq * channels` values.
    ///
    /// Exact evaluation streams the candidates in cache-sized chunks with a
    /// running maximum, so the distance matrix is never materialized. Each
    /// query's arithmetic depends only on that query and the candidate list,
    /// never on which other queries share its block.
    fn block_means(&self, dict: &PatchDictionary, cands: Candidates<'_>, queries: &[f64], alpha_bar: f64) -> Vec<f64> {
        let (dim, c, off) = (dict.dim(), dict.channels(), dict.center_offset());
        let nq = queries.len() / dim;
        let nc = cands.len(dict);
        let patches = dict.patches();
        let sa = alpha_bar.sqrt();
        let mut acc = vec![0.0; nq * c];
        let mut logits = Vec::with_capacity(nc.min(CANDIDATE_CHUNK));

        if let Some(k) = self.top_k.filter(|&k| k < nc) {
            let mut dists = vec![0.0; nq * nc];
            if alpha_bar > 0.0 {
                distance_block(queries, dict, cands, sa, &mut dists);
            }
            for q in 0..nq {
                Self::logits(dict, cands, &dists[q * nc..(q + 1) * nc], alpha_bar, &mut logits);
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in top_k_positions(&logits, k) {
                    let e = shifted_exp(logits[j] - max);
                    total += e;
                    let base = cands.get(j) * dim + off;
                    for ch in 0..c {
                        acc[q * c + ch] += e * patches[base + ch] as f64;
                    }
                }
                acc[q * c..(q + 1) * c].iter_mut().for_each(|a| *a /= total);
            }
            return acc;
        }

        let mut running = vec![(f64::NEG_INFINITY, 0.0f64); nq];
        let mut dists = vec![0.0; nq * CANDIDATE_CHUNK.min(nc)];
        for start in (0..nc).step_by(CANDIDATE_CHUNK) {
            let len = CANDIDATE_CHUNK.min(nc - start);
            let chunk = cands.slice(start, len);
            let dists = &mut dists[..nq * len];
            if alpha_bar > 0.0 {
                distance_block(queries, dict, chunk, sa, dists);
            }
            for q in 0..nq {
                Self::logits(dict, chunk, &dists[q * len..(q + 1) * len], alpha_bar, &mut logits);
                let chunk_max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (mut max, mut total) = running[q];
                let a = &mut acc[q * c..(q + 1) * c];
                if chunk_max > max {
                    if total > 0.0 {
                        let r = shifted_exp(max - chunk_max);
                        total *= r;
                        a.iter_mut().for_each(|v| *v *= r);
                    }
                    max = chunk_max;
                }
                for (j, &l) in logits.iter().enumerate() {
                    let e = shifted_exp(l - max);
                    if e > 0.0 {
                        total += e;
                        let base = chunk.get(j) * dim + off;
                        for (ch, v) in a.iter_mut().enumerate() {
                            *v += e * patches[base + ch] as f64;
                        }
                    }
                }
                running[q] = (max, total);
            }
        }
        for (q, &(_, total)) in running.iter().enumerate() {
            acc[q * c..(q + 1) * c].iter_mut().for_each(|a| *a /= total);
        }
        acc
    }

    fn check_phi(&self, entry: &ScaleEntry<R::Index>, phi: &ImageGrid) -> Result<()> {
        R::check_shape(&entry.dict, phi.shape())
    }
}

impl<R: CandidateRule> ScoreMachine for LocalScoreMachine<R> {
    fn variant(&self) -> Variant {
        R::VARIANT
    }

    fn data_shape(&self) -> Shape {
        self.shape
    }

    fn scales(&self) -> Vec<usize> {
        self.scales.keys().copied().collect()
    }

    fn score(&self, phi: &ImageGrid, alpha_bar: f64, scale: usize) -> Result<ImageGrid> {
        check_alpha_bar(alpha_bar)?;
        let entry = self.entry(scale)?;
        self.check_phi(entry, phi)?;
        let dict = &*entry.dict;
        let (h, w, c) = (phi.height(), phi.width(), phi.channels());
        let dim = dict.dim();
        let pad = dict.padding();

        // Group pixels that share a candidate list so they can be blocked.
        let mut sets: Vec<CandidateSet<'_>> = Vec::with_capacity(h * w);
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut singles: Vec<usize> = Vec::new();
        for r in 0..h {
            for col in 0..w {
                let px = r * w + col;
                let set = R::candidates(dict, &entry.index, self.label, phi.shape(), (r, col))?;
                match &set {
                    CandidateSet::All => groups.entry(usize::MAX).or_default().push(px),
                    CandidateSet::Shared { key, .. } => groups.entry(*key).or_default().push(px),
                    CandidateSet::Own(_) => singles.push(px),
                }
                sets.push(set);
            }
        }
        let mut keys: Vec<usize> = groups.keys().copied().collect();
        keys.sort_unstable();
        let mut blocks: Vec<&[usize]> = Vec::new();
        for k in &keys {
            blocks.extend(groups[k].chunks(QUERY_BLOCK));
        }
        blocks.extend(singles.chunks(1));

        let results: Vec<(usize, Vec<f64>)> = blocks
            .par_iter()
            .flat_map_iter(|pixels| {
                let cands = sets[pixels[0]].as_candidates();
                let mut queries = vec![0.0; pixels.len() * dim];
                for (q, &px) in pixels.iter().enumerate() {
                    fill_window(phi, dict.patch_size(), px / w, px % w, pad, &mut queries[q * dim..(q + 1) * dim]);
                }
                let means = self.block_means(dict, cands, &queries, alpha_bar);
                pixels
                    .iter()
                    .enumerate()
                    .map(|(q, &px)| {
                        let mut out = vec![0.0; c];
                        finish(&means[q * c..(q + 1) * c], alpha_bar, phi.pixel(px / w, px % w), &mut out);
                        (px, out)
                    })
                    .collect::<Vec<_>>()
            })
            .collect();

        let mut data = vec![0.0; h * w * c];
        for (px, v) in results {
            data[px * c..(px + 1) * c].copy_from_slice(&v);
        }
        phi.with_data(data)
    }

    fn posterior(
        &self,
        phi: &ImageGrid,
        alpha_bar: f64,
        scale: usize,
        (row, col): (usize, usize),
    ) -> Result<PosteriorWeights> {
        check_alpha_bar(alpha_bar)?;
        let entry = self.entry(scale)?;
        self.check_phi(entry, phi)?;
        let dict = &*entry.dict;
        let set = R::candidates(dict, &entry.index, self.label, phi.shape(), (row, col))?;
        let cands = set.as_candidates();
        let nc = cands.len(dict);
        let mut q = vec![0.0; dict.dim()];
        fill_window(phi, dict.patch_size(), row, col, dict.padding(), &mut q);
        let mut dists = vec![0.0; nc];
        if alpha_bar > 0.0 {
            distance_block(&q, dict, cands, alpha_bar.sqrt(), &mut dists);
        }
        let mut logits = Vec::new();
        Self::logits(dict, cands, &dists, alpha_bar, &mut logits);
        let keep: Vec<usize> = match self.top_k {
            Some(k) if k < nc => top_k_positions(&logits, k),
            _ => (0..nc).collect(),
        };
        let kept: Vec<f64> = keep.iter().map(|&j| logits[j]).collect();
        let (log_weights, weights) = softmax(&kept);
        Ok(PosteriorWeights { candidates: keep.iter().map(|&j| cands.get(j)).collect(), log_weights, weights })
    }

    fn score_pixel(&self, phi: &ImageGrid, alpha_bar: f64, scale: usize, (row, col): (usize, usize)) -> Result<Vec<f64>> {
        check_alpha_bar(alpha_bar)?;
        let entry = self.entry(scale)?;
        self.check_phi(entry, phi)?;
        let dict = &*entry.dict;
        let set = R::candidates(dict, &entry.index, self.label, phi.shape(), (row, col))?;
        let cands = set.as_candidates();
        let mut q = vec![0.0; dict.dim()];
        fill_window(phi, dict.patch_size(), row, col, dict.padding(), &mut q);
        let means = self.block_means(dict, cands, &q, alpha_bar);
        let mut out = vec![0.0; phi.channels()];
        finish(&means, alpha_bar, phi.pixel(row, col), &mut out);
        Ok(out)
    }
}

/// `(sqrt(ab) * mean - phi(x)) / (1 - ab)`.
fn finish(mean: &[f64], alpha_bar: f64, phi_x: &[f64], out: &mut [f64]) {
    let sa = alpha_bar.sqrt();
    let inv_var = 1.0 / (1.0 - alpha_bar);
    for k in 0..out.len() {
        out[k] = (sa * mean[k] - phi_x[k]) * inv_var;
    }
}
