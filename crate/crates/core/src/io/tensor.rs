//! `TNS1` tensor container.
//!
//! One record is an 8-byte little-endian header length, a JSON header
//! `{magic, dtype, shape, layout, endian, meta}` and a little-endian f32
//! payload of `product(shape)` values. Files may hold a sequence of records.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calibration::ReferenceTrajectory;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::sampler::Trajectory;

pub const TENSOR_MAGIC: &str = "TNS1";
/// Upper bound on a header, to fail fast on garbage length prefixes.
const MAX_HEADER: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub meta: Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    dtype: String,
    shape: Vec<usize>,
    layout: String,
    endian: String,
    #[serde(default)]
    meta: Value,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>, meta: Value) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch { expected: format!("{n} values for shape {shape:?}"), actual: data.len().to_string() });
        }
        Ok(Self { shape, data, meta })
    }

    /// `[H, W, C]` tensor of the grid, narrowed to f32.
    pub fn from_grid(grid: &ImageGrid, meta: Value) -> Self {
        Self {
            shape: vec![grid.height(), grid.width(), grid.channels()],
            data: grid.data().iter().map(|&v| v as f32).collect(),
            meta,
        }
    }

    pub fn to_grid(&self) -> Result<ImageGrid> {
        match self.shape[..] {
            [h, w, c] => ImageGrid::new(h, w, c, self.data.iter().map(|&v| v as f64).collect()),
            _ => Err(Error::ShapeMismatch { expected: "[height, width, channels]".into(), actual: format!("{:?}", self.shape) }),
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, tensor: &Tensor) -> std::io::Result<()> {
    let header = Header {
        magic: TENSOR_MAGIC.into(),
        dtype: "f32".into(),
        shape: tensor.shape.clone(),
        layout: "row-major".into(),
        endian: "little".into(),
        meta: tensor.meta.clone(),
    };
    let bytes = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(&bytes)?;
    let mut payload = Vec::with_capacity(tensor.data.len() * 4);
    for v in &tensor.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)
}

/// Next record, or `None` at a clean end of stream.
pub fn read_tensor<R: Read>(r: &mut R, path: &Path) -> Result<Option<Tensor>> {
    let mut len = [0u8; 8];
    let mut got = 0;
    while got < 8 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Truncated { path: path.into(), msg: "partial header length".into() }),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::format(path, format!("header length {len} is implausible")));
    }
    let mut hdr = vec![0u8; len as usize];
    read_exact(r, &mut hdr, path, "header")?;
    let header: Header = serde_json::from_slice(&hdr).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.magic != TENSOR_MAGIC {
        return Err(Error::BadMagic { path: path.into(), expected: TENSOR_MAGIC.into(), found: header.magic });
    }
    if header.dtype != "f32" || header.layout != "row-major" || header.endian != "little" {
        return Err(Error::format(
            path,
            format!("unsupported encoding {}/{}/{}", header.dtype, header.layout, header.endian),
        ));
    }
    let n: usize = header.shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    read_exact(r, &mut payload, path, "payload")?;
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Some(Tensor { shape: header.shape, data, meta: header.meta }))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Truncated { path: path.into(), msg: format!("{what} ends early") },
        _ => Error::io(path, e),
    })
}

pub fn save_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tensors {
        write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    while let Some(t) = read_tensor(&mut r, path)? {
        out.push(t);
    }
    Ok(out)
}

/// Writes a trajectory as `state`/`noise` record pairs per step followed by
/// a `final` record.
pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut records = Vec::with_capacity(2 * traj.steps.len() + 1);
    for s in &traj.steps {
        for (kind, grid) in [("state", &s.state), ("noise", &s.noise)] {
            records.push(Tensor::from_grid(
                grid,
                json!({ "t_index": s.t_index, "kind": kind, "seed": traj.seed, "label": traj.label }),
            ));
        }
    }
    records.push(Tensor::from_grid(
        &traj.final_state,
        json!({ "t_index": 0, "kind": "final", "seed": traj.seed, "label": traj.label }),
    ));
    save_tensors(path, &records)
}

/// Reads `state`/`noise` pairs (in file order) as a reference trajectory.
/// Other record kinds are ignored.
pub fn load_reference_trajectory(path: &Path) -> Result<ReferenceTrajectory> {
    let mut t_indices = Vec::new();
    let mut states = Vec::new();
    let mut predictions = Vec::new();
    let mut label = None;
    let mut pending: Option<(usize, ImageGrid)> = None;
    for t in load_tensors(path)? {
        let kind = t.meta.get("kind").and_then(Value::as_str).unwrap_or("");
        let t_index = t.meta.get("t_index").and_then(Value::as_u64);
        if let Some(l) = t.meta.get("label").and_then(Value::as_u64) {
            label = Some(l as u32);
        }
        match (kind, t_index) {
            ("state", Some(k)) => {
                if pending.is_some() {
                    return Err(Error::format(path, format!("state at step {k} follows a state without noise")));
                }
                pending = Some((k as usize, t.to_grid()?));
            }
            ("noise", Some(k)) => match pending.take() {
                Some((sk, state)) if sk == k as usize => {
                    t_indices.push(sk);
                    states.push(state);
                    predictions.push(t.to_grid()?);
                }
                _ => return Err(Error::format(path, format!("noise at step {k} has no matching state"))),
            },
            ("state" | "noise", None) => return Err(Error::format(path, "record without t_index")),
            _ => {}
        }
    }
    if pending.is_some() {
        return Err(Error::format(path, "trailing state without noise"));
    }
    ReferenceTrajectory::new(t_indices, states, predictions, label)
}
