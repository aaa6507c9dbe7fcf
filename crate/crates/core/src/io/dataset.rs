//! Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches and
//! directories of PNG files. Pixels are normalized with `v / 127.5 - 1`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::png::load_png;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    MnistIdx,
    Cifar10Bin,
    PngDir,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist-idx" => Ok(Self::MnistIdx),
            "cifar10-bin" => Ok(Self::Cifar10Bin),
            "png-dir" => Ok(Self::PngDir),
            other => Err(Error::Config(format!("unknown dataset format '{other}' (mnist-idx, cifar10-bin, png-dir)"))),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MnistIdx => "mnist-idx",
            Self::Cifar10Bin => "cifar10-bin",
            Self::PngDir => "png-dir",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub format: DatasetFormat,
    /// IDX image file (or a directory holding `train-images-idx3-ubyte`),
    /// CIFAR batch file, or PNG directory.
    pub path: PathBuf,
    /// IDX label file; inferred from the image file name when absent.
    pub labels: Option<PathBuf>,
    /// Keep only images with this label (applied before `subset`).
    pub label: Option<u32>,
    /// Keep the first `n` images.
    pub subset: Option<usize>,
}

impl DatasetSpec {
    pub fn new(format: DatasetFormat, path: impl Into<PathBuf>) -> Self {
        Self { format, path: path.into(), labels: None, label: None, subset: None }
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<ImageGrid>> {
    if !spec.path.exists() {
        return Err(Error::io(&spec.path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let mut images = match spec.format {
        DatasetFormat::MnistIdx => {
            let images_path = if spec.path.is_dir() { spec.path.join("train-images-idx3-ubyte") } else { spec.path.clone() };
            let labels_path = spec.labels.clone().or_else(|| idx_label_path(&images_path));
            let mut images = read_idx_images(&images_path)?;
            if let Some(lp) = labels_path {
                let labels = read_idx_labels(&lp)?;
                if labels.len() != images.len() {
                    return Err(Error::format(&lp, format!("{} labels for {} images", labels.len(), images.len())));
                }
                images = images.into_iter().zip(labels).map(|(g, l)| g.with_label(Some(l as u32))).collect();
            }
            images
        }
        DatasetFormat::Cifar10Bin => read_cifar10(&spec.path)?,
        DatasetFormat::PngDir => read_png_dir(&spec.path)?,
    };
    if let Some(l) = spec.label {
        images.retain(|g| g.label() == Some(l));
    }
    if let Some(n) = spec.subset {
        images.truncate(n);
    }
    if images.is_empty() {
        return Err(Error::Empty("dataset after filtering"));
    }
    Ok(images)
}

/// `...images-idx3-ubyte` -> `...labels-idx1-ubyte`, if that file exists.
fn idx_label_path(images: &Path) -> Option<PathBuf> {
    let name = images.file_name()?.to_str()?;
    let candidate = images.with_file_name(name.replace("images-idx3", "labels-idx1"));
    (candidate != images && candidate.exists()).then_some(candidate)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated { path: path.into(), msg: "IDX header ends early".into() })
}

fn check_magic(found: u32, expected: u32, path: &Path) -> Result<()> {
    if found != expected {
        return Err(Error::BadMagic { path: path.into(), expected: format!("{expected:#010x}"), found: format!("{found:#010x}") });
    }
    Ok(())
}

pub fn read_idx_images(path: &Path) -> Result<Vec<ImageGrid>> {
    let buf = read_file(path)?;
    check_magic(be_u32(&buf, 0, path)?, IDX_IMAGES, path)?;
    let n = be_u32(&buf, 4, path)? as usize;
    let (h, w) = (be_u32(&buf, 8, path)? as usize, be_u32(&buf, 12, path)? as usize);
    let need = 16 + n * h * w;
    if buf.len() < need {
        return Err(Error::Truncated { path: path.into(), msg: format!("{n} images of {h}x{w} need {need} bytes, file has {}", buf.len()) });
    }
    buf[16..need].chunks_exact(h * w).map(|px| ImageGrid::from_bytes(h, w, 1, px)).collect()
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let buf = read_file(path)?;
    check_magic(be_u32(&buf, 0, path)?, IDX_LABELS, path)?;
    let n = be_u32(&buf, 4, path)? as usize;
    if buf.len() < 8 + n {
        return Err(Error::Truncated { path: path.into(), msg: format!("{n} labels, file has {} bytes", buf.len()) });
    }
    Ok(buf[8..8 + n].to_vec())
}

/// Writes grayscale images as an IDX3 file (row-major bytes).
pub fn write_idx_images(path: &Path, images: &[ImageGrid]) -> Result<()> {
    let first = images.first().ok_or(Error::Empty("image list"))?;
    let mut buf = Vec::new();
    for v in [IDX_IMAGES, images.len() as u32, first.height() as u32, first.width() as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    for g in images {
        first.check_same_shape(g)?;
        if g.channels() != 1 {
            return Err(Error::UnsupportedPixelFormat { path: path.into(), msg: "IDX images are single-channel".into() });
        }
        buf.extend_from_slice(&g.to_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&IDX_LABELS.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// CIFAR-10 binary batch: 3073-byte records, a label byte followed by the
/// red, green and blue 32x32 planes. Converted to channel-last.
pub fn read_cifar10(path: &Path) -> Result<Vec<ImageGrid>> {
    let buf = read_file(path)?;
    if buf.is_empty() || buf.len() % CIFAR_RECORD != 0 {
        return Err(Error::Truncated {
            path: path.into(),
            msg: format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", buf.len()),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    buf.chunks_exact(CIFAR_RECORD)
        .map(|rec| {
            let label = rec[0];
            if label > 9 {
                return Err(Error::format(path, format!("label byte {label} outside 0..=9")));
            }
            let mut px = vec![0u8; 3 * plane];
            for i in 0..plane {
                for c in 0..3 {
                    px[i * 3 + c] = rec[1 + c * plane + i];
                }
            }
            Ok(ImageGrid::from_bytes(CIFAR_SIDE, CIFAR_SIDE, 3, &px)?.with_label(Some(label as u32)))
        })
        .collect()
}

/// All `*.png` files in name order. An optional `labels.csv` with
/// `filename,label` rows attaches labels.
pub fn read_png_dir(dir: &Path) -> Result<Vec<ImageGrid>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let labels = read_labels_csv(&dir.join("labels.csv"))?;
    let mut out = Vec::with_capacity(files.len());
    for f in &files {
        let g = load_png(f)?;
        if let Some(first) = out.first() {
            ImageGrid::check_same_shape(first, &g)?;
        }
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let label = labels.iter().find(|(n, _)| n == name).map(|(_, l)| *l);
        out.push(g.with_label(label));
    }
    Ok(out)
}

fn read_labels_csv(path: &Path) -> Result<Vec<(String, u32)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, label) = line.split_once(',').ok_or_else(|| Error::format(path, format!("line {}: expected filename,label", i + 1)))?;
        match label.trim().parse() {
            Ok(l) => out.push((name.trim().to_string(), l)),
            Err(_) if i == 0 => {} // header row
            Err(_) => return Err(Error::format(path, format!("line {}: bad label '{}'", i + 1, label.trim()))),
        }
    }
    Ok(out)
}
