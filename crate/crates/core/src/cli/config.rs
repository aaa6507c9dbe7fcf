//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Command-line flags override keys read from a file. Only the keys
//! listed in [`KEYS`] are accepted.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("machine", "score machine: is | es | ls | els | bels"),
    ("data.format", "dataset format: mnist-idx | cifar10-bin | png-dir"),
    ("data.path", "IDX image file or directory, CIFAR batch file, or PNG directory"),
    ("data.labels", "IDX label file (default: inferred from the image file name)"),
    ("data.label", "keep only training images with this class"),
    ("data.subset", "keep the first N training images (after class filtering)"),
    ("label", "class to condition sampling on (filters the dictionary)"),
    ("pad", "padding mode: circular | zero (default: zero for bels, circular otherwise)"),
    ("schedule", "noise schedule: cosine | linear | logsnr (default cosine)"),
    ("steps", "number of reverse steps (default 20)"),
    ("scale", "constant locality scale P (odd)"),
    ("scales", "per-step scales, comma separated; entry i is used when leaving step i+1"),
    ("scale_schedule", "JSON scale schedule written by `calibrate`; inlined as `scales`"),
    ("stride", "dictionary location stride (default 1)"),
    ("dedup", "merge identical patches with counts: true | false (default true for els/bels)"),
    ("top_k", "keep only the k largest posterior logits per pixel (approximation; default off)"),
    ("integrator", "ddim | euler (default ddim)"),
    ("seeds", "seed list `0,1,5` or half-open range `0..32` (default 0)"),
    ("record", "write per-step trajectories: true | false"),
    ("save_float", "write final states as TNS1 tensors: true | false"),
    ("out", "output directory"),
    ("threads", "worker threads (does not affect results)"),
];

/// Keys that locate or schedule a run but do not change its results.
const UNDIGESTED: &[&str] = &["out", "threads"];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            map.set(k.trim(), v.trim())?;
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Reads the `config` object of a run manifest.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text)?;
        let obj = v
            .get("config")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::format(path, "manifest has no `config` object"))?;
        let mut map = Self::default();
        for (k, v) in obj {
            let v = v.as_str().ok_or_else(|| Error::format(path, format!("config value for `{k}` is not a string")))?;
            map.set(k, v)?;
        }
        Ok(map)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse().map_err(|e| Error::Config(format!("`{key} = {v}`: {e}"))))
            .transpose()
    }

    pub fn flag(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|v| match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(Error::Config(format!("`{key} = {v}`: expected true or false"))),
            })
            .transpose()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// SHA-256 over the sorted `key=value` lines, excluding output location
    /// and thread count.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !UNDIGESTED.contains(&k) {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> Value {
        Value::Object(self.entries().map(|(k, v)| (k.to_string(), Value::String(v.to_string()))).collect())
    }
}

/// `a,b,c` or the half-open range `a..b`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad seed list `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("bad integer `{}` in list `{s}`", t.trim()))))
        .collect()
}

/// Joins back into the comma-separated form accepted by [`parse_usize_list`].
pub fn join_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
