//! Patch dictionaries: every `P x P` training window, indexed by location,
//! border class and label.
//!
//! Patch values are stored in single precision; squared norms and all
//! downstream accumulation use `f64`.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{check_patch_size, fill_window, BorderSignature, ImageGrid, PaddingMode, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub image: u32,
    pub row: u32,
    pub col: u32,
    pub label: Option<u32>,
}

/// Construction parameters recorded alongside the dictionary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryOptions {
    pub size: usize,
    pub pad: PaddingMode,
    /// Only windows centered on rows/cols divisible by `stride` are kept.
    pub stride: usize,
    /// Use only the first `n` images, if set.
    pub image_subset: Option<usize>,
}

impl DictionaryOptions {
    pub fn new(size: usize, pad: PaddingMode) -> Self {
        Self { size, pad, stride: 1, image_subset: None }
    }
}

#[derive(Debug, Clone)]
pub struct PatchDictionary {
    options: DictionaryOptions,
    image_shape: Shape,
    num_images: usize,
    dim: usize,
    patches: Vec<f32>,
    norms: Vec<f64>,
    meta: Vec<PatchMeta>,
    border: Vec<BorderSignature>,
    counts: Vec<u32>,
    deduplicated: bool,
    class_index: BTreeMap<BorderSignature, Vec<usize>>,
    label_index: BTreeMap<u32, Vec<usize>>,
    location_index: Vec<Vec<usize>>,
}

/// Raw arrays of a dictionary, as stored on disk.
#[derive(Debug, Clone)]
pub struct DictionaryParts {
    pub options: DictionaryOptions,
    pub image_shape: Shape,
    pub num_images: usize,
    pub patches: Vec<f32>,
    pub meta: Vec<PatchMeta>,
    pub border: Vec<BorderSignature>,
    pub counts: Vec<u32>,
    pub deduplicated: bool,
}

impl PatchDictionary {
    /// One patch per (image, center) pair. Duplicates are kept.
    pub fn build(images: &[ImageGrid], options: DictionaryOptions) -> Result<Self> {
        check_patch_size(options.size)?;
        if options.stride == 0 {
            return Err(Error::Config("location stride must be at least 1".into()));
        }
        let images = match options.image_subset {
            Some(n) => &images[..n.min(images.len())],
            None => images,
        };
        let first = images.first().ok_or(Error::Empty("image list"))?;
        let shape = first.shape();
        if let Some(bad) = images.iter().find(|im| im.shape() != shape) {
            return Err(Error::ShapeMismatch { expected: shape.to_string(), actual: bad.shape().to_string() });
        }
        let (p, pad) = (options.size, options.pad);
        let dim = p * p * shape.channels;
        let centers: Vec<(usize, usize)> = (0..shape.height)
            .step_by(options.stride)
            .flat_map(|r| (0..shape.width).step_by(options.stride).map(move |c| (r, c)))
            .collect();

        let per_image: Vec<(Vec<f32>, Vec<PatchMeta>, Vec<BorderSignature>)> = images
            .par_iter()
            .enumerate()
            .map(|(i, img)| {
                let mut buf = vec![0.0; dim];
                let mut values = Vec::with_capacity(centers.len() * dim);
                let mut meta = Vec::with_capacity(centers.len());
                let mut border = Vec::with_capacity(centers.len());
                for &(r, c) in &centers {
                    fill_window(img, p, r, c, pad, &mut buf);
                    values.extend(buf.iter().map(|&v| v as f32));
                    meta.push(PatchMeta { image: i as u32, row: r as u32, col: c as u32, label: img.label() });
                    border.push(match pad {
                        PaddingMode::Circular => BorderSignature::INTERIOR,
                        PaddingMode::Zero => BorderSignature::of(shape.height, shape.width, p, r, c),
                    });
                }
                (values, meta, border)
            })
            .collect();

        let mut patches = Vec::with_capacity(images.len() * centers.len() * dim);
        let mut meta = Vec::with_capacity(images.len() * centers.len());
        let mut border = Vec::with_capacity(meta.capacity());
        for (v, m, b) in per_image {
            patches.extend(v);
            meta.extend(m);
            border.extend(b);
        }
        let counts = vec![1; meta.len()];
        Self::from_parts(DictionaryParts {
            options,
            image_shape: shape,
            num_images: images.len(),
            patches,
            meta,
            border,
            counts,
            deduplicated: false,
        })
    }

    /// Rebuilds derived state (norms, indexes) from raw arrays.
    pub fn from_parts(parts: DictionaryParts) -> Result<Self> {
        let DictionaryParts { options, image_shape, num_images, patches, meta, border, counts, deduplicated } = parts;
        check_patch_size(options.size)?;
        let dim = options.size * options.size * image_shape.channels;
        let m = meta.len();
        if m == 0 {
            return Err(Error::Empty("patch dictionary"));
        }
        if patches.len() != m * dim || border.len() != m || counts.len() != m {
            return Err(Error::Dictionary(format!(
                "inconsistent arrays: {} values, {} meta, {} signatures, {} counts for dim {dim}",
                patches.len(),
                m,
                border.len(),
                counts.len()
            )));
        }
        if patches.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dictionary patches"));
        }
        let half = (options.size / 2) as u16;
        if border.iter().any(|b| b.top > half || b.bottom > half || b.left > half || b.right > half) {
            return Err(Error::Dictionary("border signature exceeds half window".into()));
        }
        if options.pad == PaddingMode::Circular && border.iter().any(|b| !b.is_interior()) {
            return Err(Error::Dictionary("circular dictionary with border signatures".into()));
        }
        let norms = patches
            .chunks_exact(dim)
            .map(|p| p.iter().map(|&v| v as f64 * v as f64).sum())
            .collect();
        let mut class_index: BTreeMap<BorderSignature, Vec<usize>> = BTreeMap::new();
        let mut label_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut location_index = vec![Vec::new(); image_shape.height * image_shape.width];
        for (i, (b, mt)) in border.iter().zip(&meta).enumerate() {
            class_index.entry(*b).or_default().push(i);
            if let Some(l) = mt.label {
                label_index.entry(l).or_default().push(i);
            }
            let (r, c) = (mt.row as usize, mt.col as usize);
            if r >= image_shape.height || c >= image_shape.width {
                return Err(Error::Dictionary(format!("patch {i} centered outside the image")));
            }
            location_index[r * image_shape.width + c].push(i);
        }
        Ok(Self {
            options,
            image_shape,
            num_images,
            dim,
            patches,
            norms,
            meta,
            border,
            counts,
            deduplicated,
            class_index,
            label_index,
            location_index,
        })
    }

    pub fn to_parts(&self) -> DictionaryParts {
        DictionaryParts {
            options: self.options.clone(),
            image_shape: self.image_shape,
            num_images: self.num_images,
            patches: self.patches.clone(),
            meta: self.meta.clone(),
            border: self.border.clone(),
            counts: self.counts.clone(),
            deduplicated: self.deduplicated,
        }
    }

    /// Merges bitwise-identical patches that share border class and label,
    /// keeping the first occurrence and recording multiplicities.
    ///
    /// Posterior sums over the result equal sums over the original once each
    /// term is weighted by its count. Location lookups are no longer available.
    pub fn deduplicated(&self) -> Self {
        let mut seen: HashMap<(Vec<u32>, BorderSignature, Option<u32>), usize> = HashMap::new();
        let mut keep: Vec<usize> = Vec::new();
        let mut counts: Vec<u32> = Vec::new();
        for i in 0..self.len() {
            let bits: Vec<u32> = self.patch(i).iter().map(|v| v.to_bits()).collect();
            let key = (bits, self.border[i], self.meta[i].label);
            match seen.get(&key) {
                Some(&slot) => counts[slot] += self.counts[i],
                None => {
                    seen.insert(key, keep.len());
                    keep.push(i);
                    counts.push(self.counts[i]);
                }
            }
        }
        let mut patches = Vec::with_capacity(keep.len() * self.dim);
        for &i in &keep {
            patches.extend_from_slice(self.patch(i));
        }
        Self::from_parts(DictionaryParts {
            options: self.options.clone(),
            image_shape: self.image_shape,
            num_images: self.num_images,
            patches,
            meta: keep.iter().map(|&i| self.meta[i]).collect(),
            border: keep.iter().map(|&i| self.border[i]).collect(),
            counts,
            deduplicated: true,
        })
        .expect("subset of a valid dictionary is valid")
    }

    pub fn options(&self) -> &DictionaryOptions {
        &self.options
    }

    pub fn patch_size(&self) -> usize {
        self.options.size
    }

    pub fn padding(&self) -> PaddingMode {
        self.options.pad
    }

    pub fn channels(&self) -> usize {
        self.image_shape.channels
    }

    pub fn image_shape(&self) -> Shape {
        self.image_shape
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    /// Values per patch, `P * P * C`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn is_deduplicated(&self) -> bool {
        self.deduplicated
    }

    pub fn patches(&self) -> &[f32] {
        &self.patches
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        &self.patches[i * self.dim..(i + 1) * self.dim]
    }

    /// Channel values at the center of patch `i`.
    pub fn center(&self, i: usize) -> &[f32] {
        let off = self.center_offset();
        let c = self.channels();
        &self.patch(i)[off..off + c]
    }

    pub fn center_offset(&self) -> usize {
        let half = self.options.size / 2;
        (half * self.options.size + half) * self.channels()
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn meta(&self) -> &[PatchMeta] {
        &self.meta
    }

    pub fn borders(&self) -> &[BorderSignature] {
        &self.border
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn classes(&self) -> &BTreeMap<BorderSignature, Vec<usize>> {
        &self.class_index
    }

    pub fn label_index(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.label_index
    }

    /// Patches consistent with a query's border signature (and label).
    pub fn eligible_patches(&self, signature: BorderSignature, label: Option<u32>) -> Result<Vec<usize>> {
        if self.options.pad == PaddingMode::Circular && !signature.is_interior() {
            return Err(Error::Dictionary(format!(
                "border signature {signature} queried on a circular dictionary"
            )));
        }
        let class = self.class_index.get(&signature).map(Vec::as_slice).unwrap_or(&[]);
        let out: Vec<usize> = match label {
            Some(l) => class.iter().copied().filter(|&i| self.meta[i].label == Some(l)).collect(),
            None => class.to_vec(),
        };
        if out.is_empty() {
            return Err(Error::NoConsistentPatches(signature.to_string()));
        }
        Ok(out)
    }

    /// Patches centered exactly at `(row, col)`, one per training image.
    pub fn location_restricted_view(&self, row: usize, col: usize, label: Option<u32>) -> Result<Vec<usize>> {
        if self.deduplicated {
            return Err(Error::Dictionary("location view needs a dictionary with per-location patches".into()));
        }
        if row >= self.image_shape.height || col >= self.image_shape.width {
            return Err(Error::OutOfBounds {
                row,
                col,
                height: self.image_shape.height,
                width: self.image_shape.width,
            });
        }
        let at = &self.location_index[row * self.image_shape.width + col];
        Ok(match label {
            Some(l) => at.iter().copied().filter(|&i| self.meta[i].label == Some(l)).collect(),
            None => at.clone(),
        })
    }

    /// All patch indices, optionally restricted to one label.
    pub fn all_indices(&self, label: Option<u32>) -> Vec<usize> {
        match label {
            Some(l) => self.label_index.get(&l).cloned().unwrap_or_default(),
            None => (0..self.len()).collect(),
        }
    }

    /// SHA-256 over the construction parameters and every stored array.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.options).expect("serializable"));
        h.update(serde_json::to_vec(&self.image_shape).expect("serializable"));
        h.update((self.num_images as u64).to_le_bytes());
        h.update([self.deduplicated as u8]);
        for v in &self.patches {
            h.update(v.to_le_bytes());
        }
        for (m, (b, c)) in self.meta.iter().zip(self.border.iter().zip(&self.counts)) {
            h.update(m.image.to_le_bytes());
            h.update(m.row.to_le_bytes());
            h.update(m.col.to_le_bytes());
            h.update(m.label.map_or(-1i64, i64::from).to_le_bytes());
            for s in [b.top, b.bottom, b.left, b.right] {
                h.update(s.to_le_bytes());
            }
            h.update(c.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
