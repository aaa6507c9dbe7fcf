//! Resolution of a [`ConfigMap`] into data, dictionaries and a machine.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::config::{join_list, parse_seeds, parse_usize_list, ConfigMap};
use crate::dictionary::{DictionaryOptions, PatchDictionary};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, PaddingMode};
use crate::io::{load_dataset, DatasetFormat, DatasetSpec};
use crate::machines::{MachineConfig, MachineRegistry, ScoreMachine, Variant};
use crate::sampler::{Integrator, ScaleSchedule};
use crate::schedule::{NoiseSchedule, ScheduleKind};

pub const DEFAULT_STEPS: usize = 20;

/// Typed view of a run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub variant: Variant,
    pub dataset: DatasetSpec,
    pub label: Option<u32>,
    pub pad: PaddingMode,
    pub schedule: NoiseSchedule,
    pub scales: Option<ScaleSchedule>,
    pub stride: usize,
    pub dedup: bool,
    pub top_k: Option<usize>,
    pub integrator: Integrator,
    pub seeds: Vec<u64>,
    pub record: bool,
    pub save_float: bool,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl RunConfig {
    /// Validates `map` and inlines any referenced scale-schedule file, so the
    /// map alone reproduces the run.
    pub fn resolve(map: &mut ConfigMap) -> Result<Self> {
        let variant: Variant = map.parsed("machine")?.ok_or_else(|| Error::Config("`machine` is required".into()))?;
        let dataset = dataset_spec(map)?;
        let pad = map.parsed::<PaddingMode>("pad")?.unwrap_or(match variant {
            Variant::Bels => PaddingMode::Zero,
            _ => PaddingMode::Circular,
        });
        let kind: ScheduleKind = map.parsed("schedule")?.unwrap_or(ScheduleKind::Cosine);
        let steps = map.parsed("steps")?.unwrap_or(DEFAULT_STEPS);
        let schedule = NoiseSchedule::from_kind(kind, steps)?;

        if let Some(file) = map.remove("scale_schedule") {
            let scales = read_scale_schedule(Path::new(&file))?;
            map.set("scales", &join_list(&scales))?;
        }
        let scales = match (map.get("scales"), map.parsed::<usize>("scale")?) {
            (Some(_), Some(_)) => return Err(Error::Config("give either `scale` or `scales`, not both".into())),
            (Some(list), None) => Some(ScaleSchedule::new(parse_usize_list(list)?)?),
            (None, Some(p)) => Some(ScaleSchedule::constant(p, steps)?),
            (None, None) => None,
        };
        if let Some(s) = &scales {
            if s.steps() != steps {
                return Err(Error::ScaleSchedule(format!("{} scales for {steps} steps", s.steps())));
            }
        }
        Ok(Self {
            variant,
            dataset,
            label: map.parsed("label")?,
            pad,
            schedule,
            scales,
            stride: map.parsed("stride")?.unwrap_or(1),
            dedup: map.flag("dedup")?.unwrap_or(matches!(variant, Variant::Els | Variant::Bels)),
            top_k: map.parsed("top_k")?,
            integrator: map.parsed("integrator")?.unwrap_or_default(),
            seeds: map.get("seeds").map(parse_seeds).transpose()?.unwrap_or_else(|| vec![0]),
            record: map.flag("record")?.unwrap_or(false),
            save_float: map.flag("save_float")?.unwrap_or(false),
            out: map.get("out").map(PathBuf::from),
            threads: map.parsed("threads")?,
        })
    }
}

pub fn dataset_spec(map: &ConfigMap) -> Result<DatasetSpec> {
    let format: DatasetFormat = map.parsed("data.format")?.ok_or_else(|| Error::Config("`data.format` is required".into()))?;
    let path = map.get("data.path").ok_or_else(|| Error::Config("`data.path` is required".into()))?;
    Ok(DatasetSpec {
        format,
        path: PathBuf::from(path),
        labels: map.get("data.labels").map(PathBuf::from),
        label: map.parsed("data.label")?,
        subset: map.parsed("data.subset")?,
    })
}

/// Accepts a bare JSON array or an object with a `schedule` array.
pub fn read_scale_schedule(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&text)?;
    let arr = match &v {
        Value::Array(_) => &v,
        Value::Object(o) => o.get("schedule").ok_or_else(|| Error::format(path, "no `schedule` field"))?,
        _ => return Err(Error::format(path, "expected an array or an object")),
    };
    serde_json::from_value(arr.clone()).map_err(|e| Error::format(path, e.to_string()))
}

/// SHA-256 over shapes, labels and pixel values of a training set.
pub fn data_digest(images: &[ImageGrid]) -> String {
    let mut h = Sha256::new();
    for g in images {
        h.update(g.shape().to_string());
        h.update(g.label().map_or(-1i64, i64::from).to_le_bytes());
        for v in g.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// SHA-256 of a grid's values, used to compare outputs bit for bit.
pub fn grid_digest(g: &ImageGrid) -> String {
    let mut h = Sha256::new();
    for v in g.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Loaded data, the dictionaries actually used, and the machine.
pub struct Prepared {
    pub images: Vec<ImageGrid>,
    pub dictionaries: Vec<Arc<PatchDictionary>>,
    pub machine: Box<dyn ScoreMachine>,
}

impl Prepared {
    pub fn manifest_entries(&self) -> Value {
        json!({
            "num_images": self.images.len(),
            "data_digest": data_digest(&self.images),
            "dictionaries": self.dictionaries.iter().map(|d| json!({
                "scale": d.patch_size(),
                "pad": d.padding(),
                "patches": d.len(),
                "deduplicated": d.is_deduplicated(),
                "digest": d.digest(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Builds the machine for `cfg` with dictionaries at `scales`.
pub fn prepare(cfg: &RunConfig, scales: &[usize]) -> Result<Prepared> {
    let images = load_dataset(&cfg.dataset)?;
    let mut dictionaries = Vec::new();
    if cfg.variant.is_local() {
        for &p in scales {
            let mut opts = DictionaryOptions::new(p, cfg.pad);
            opts.stride = cfg.stride;
            let d = PatchDictionary::build(&images, opts)?;
            let d = if cfg.dedup { d.deduplicated() } else { d };
            dictionaries.push(Arc::new(d));
        }
    }
    let mut mc = MachineConfig::new(cfg.variant, images.clone())
        .with_pad(cfg.pad)
        .with_scales(scales.iter().copied())
        .with_label(cfg.label)
        .with_top_k(cfg.top_k)
        .with_dedup(cfg.dedup);
    mc.stride = cfg.stride;
    for d in &dictionaries {
        mc = mc.with_dictionary(d.clone());
    }
    let machine = MachineRegistry::default().build(&mc)?;
    Ok(Prepared { images, dictionaries, machine })
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(f),
        None => f(),
    }
}
