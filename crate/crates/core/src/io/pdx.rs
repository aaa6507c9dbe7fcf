//! `PDX1` patch-dictionary files.
//!
//! Layout: magic `PDX1`, 8-byte little-endian header length, JSON header,
//! then little-endian arrays: patch values (f32, `M * P * P * C`), image
//! index (u32), center row (u32), center column (u32), label (i64, -1 for
//! none), border signature (4 x u16: top, bottom, left, right) and
//! multiplicity (u32), each of length `M`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dictionary::{DictionaryOptions, DictionaryParts, PatchDictionary, PatchMeta};
use crate::error::{Error, Result};
use crate::grid::{BorderSignature, Shape};

pub const DICT_MAGIC: &[u8; 4] = b"PDX1";
pub const DICT_VERSION: u32 = 1;
pub const NORMALIZATION: &str = "v/127.5-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DictHeader {
    pub version: u32,
    pub patch_size: usize,
    pub channels: usize,
    pub num_patches: usize,
    pub options: DictionaryOptions,
    pub image_shape: Shape,
    pub num_images: usize,
    pub deduplicated: bool,
    pub normalization: String,
    /// Free-form provenance of the images (dataset spec, digest, ...).
    #[serde(default)]
    pub source: Value,
}

pub fn write_dictionary(path: &Path, dict: &PatchDictionary, source: Value) -> Result<()> {
    let parts = dict.to_parts();
    let header = DictHeader {
        version: DICT_VERSION,
        patch_size: dict.patch_size(),
        channels: dict.channels(),
        num_patches: dict.len(),
        options: parts.options.clone(),
        image_shape: parts.image_shape,
        num_images: parts.num_images,
        deduplicated: parts.deduplicated,
        normalization: NORMALIZATION.into(),
        source,
    };
    let hdr = serde_json::to_vec(&header)?;
    let m = dict.len();
    let mut buf = Vec::with_capacity(12 + hdr.len() + parts.patches.len() * 4 + m * 32);
    buf.extend_from_slice(DICT_MAGIC);
    buf.extend_from_slice(&(hdr.len() as u64).to_le_bytes());
    buf.extend_from_slice(&hdr);
    for v in &parts.patches {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for m in &parts.meta {
        buf.extend_from_slice(&m.image.to_le_bytes());
    }
    for m in &parts.meta {
        buf.extend_from_slice(&m.row.to_le_bytes());
    }
    for m in &parts.meta {
        buf.extend_from_slice(&m.col.to_le_bytes());
    }
    for m in &parts.meta {
        buf.extend_from_slice(&m.label.map_or(-1i64, i64::from).to_le_bytes());
    }
    for b in &parts.border {
        for s in [b.top, b.bottom, b.left, b.right] {
            buf.extend_from_slice(&s.to_le_bytes());
        }
    }
    for c in &parts.counts {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Truncated {
            path: self.path.into(),
            msg: format!("{what}: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, count: usize, what: &str) -> Result<Vec<[u8; N]>> {
        let bytes = self.take(count.checked_mul(N).unwrap_or(usize::MAX), what)?;
        Ok(bytes.chunks_exact(N).map(|c| c.try_into().expect("chunk size")).collect())
    }
}

pub fn read_dictionary(path: &Path) -> Result<(PatchDictionary, DictHeader)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    BufReader::new(file).read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0, path };
    let magic = cur.take(4, "magic")?;
    if magic != DICT_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "PDX1".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let len = u64::from_le_bytes(cur.take(8, "header length")?.try_into().expect("8 bytes"));
    let hdr = cur.take(usize::try_from(len).unwrap_or(usize::MAX), "header")?;
    let header: DictHeader = serde_json::from_slice(hdr).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.version != DICT_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", header.version)));
    }
    if header.channels != header.image_shape.channels || header.patch_size != header.options.size {
        return Err(Error::format(path, "header fields disagree"));
    }
    let m = header.num_patches;
    let dim = header.patch_size * header.patch_size * header.channels;
    let patches = cur.array::<4>(m * dim, "patch values")?.into_iter().map(f32::from_le_bytes).collect();
    let image = cur.array::<4>(m, "image indices")?;
    let row = cur.array::<4>(m, "rows")?;
    let col = cur.array::<4>(m, "columns")?;
    let label = cur.array::<8>(m, "labels")?;
    let sig = cur.array::<8>(m, "border signatures")?;
    let counts = cur.array::<4>(m, "counts")?.into_iter().map(u32::from_le_bytes).collect();
    if cur.pos != buf.len() {
        return Err(Error::format(path, format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    let meta = (0..m)
        .map(|i| {
            let l = i64::from_le_bytes(label[i]);
            let label = match l {
                -1 => None,
                l => Some(u32::try_from(l).map_err(|_| Error::format(path, format!("label {l} out of range")))?),
            };
            Ok(PatchMeta {
                image: u32::from_le_bytes(image[i]),
                row: u32::from_le_bytes(row[i]),
                col: u32::from_le_bytes(col[i]),
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let border = sig
        .iter()
        .map(|s| {
            let u = |k: usize| u16::from_le_bytes([s[2 * k], s[2 * k + 1]]);
            BorderSignature::new(u(0), u(1), u(2), u(3))
        })
        .collect();
    let dict = PatchDictionary::from_parts(DictionaryParts {
        options: header.options.clone(),
        image_shape: header.image_shape,
        num_images: header.num_images,
        patches,
        meta,
        border,
        counts,
        deduplicated: header.deduplicated,
    })?;
    Ok((dict, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ImageGrid, PaddingMode};

    fn images() -> Vec<ImageGrid> {
        (0..3)
            .map(|i| {
                let v = (0..20).map(|k| ((k * 5 + i * 3) % 11) as f64 / 8.0 - 0.75).collect();
                ImageGrid::new(4, 5, 1, v).unwrap().with_label(if i == 1 { None } else { Some(i as u32) })
            })
            .collect()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for pad in [PaddingMode::Zero, PaddingMode::Circular] {
            let d = PatchDictionary::build(&images(), DictionaryOptions::new(3, pad)).unwrap();
            for d in [d.clone(), d.deduplicated()] {
                let p = dir.path().join("d.pdx");
                write_dictionary(&p, &d, serde_json::json!({"name": "t"})).unwrap();
                let (back, hdr) = read_dictionary(&p).unwrap();
                assert_eq!(back.digest(), d.digest());
                assert_eq!(back.norms(), d.norms());
                assert_eq!(back.counts(), d.counts());
                assert_eq!(hdr.num_patches, d.len());
                assert_eq!(hdr.source["name"], "t");
            }
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pdx");
        let d = PatchDictionary::build(&images(), DictionaryOptions::new(3, PaddingMode::Zero)).unwrap();
        write_dictionary(&p, &d, Value::Null).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_dictionary(&p), Err(Error::Truncated { .. })));

        let mut bad = bytes.clone();
        bad[3] = b'9';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(read_dictionary(&p), Err(Error::BadMagic { .. })));

        let mut long = bytes;
        long.push(0);
        std::fs::write(&p, &long).unwrap();
        assert!(matches!(read_dictionary(&p), Err(Error::Format { .. })));
    }
}
