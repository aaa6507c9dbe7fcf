//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::config::{parse_usize_list, ConfigMap};
use super::run::{data_digest, grid_digest, prepare, with_threads, RunConfig};
use super::{Command, RunArgs, ToyArgs};
use crate::analysis::{pearson_r2, pixelwise_r2, receptive_field_probe, verify_local_consistency};
use crate::calibration::{calibrate_scales, CalibrationOptions, ReferenceSet};
use crate::dictionary::{DictionaryOptions, PatchDictionary};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, PaddingMode};
use crate::io::png::{save_heatmap, save_mask, tile_grids};
use crate::io::tensor::{load_reference_trajectory, save_trajectory};
use crate::io::{load_dataset, load_image, read_dictionary, save_png, save_tensors, write_dictionary, Tensor};
use crate::machines::Variant;
use crate::sampler::{initial_noise, sample_batch, SampleOptions};
use crate::schedule::{forward_noise_at, ScheduleKind};
use crate::toy::{run_toy, ToyOptions};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::BuildDict { run, output } => build_dict(&run, &output),
        Command::Sample { run, from_manifest, record, save_float } => {
            let base = from_manifest.as_deref().map(ConfigMap::from_manifest).transpose()?;
            let mut map = run.to_config(base)?;
            if record {
                map.set("record", "true")?;
            }
            if save_float {
                map.set("save_float", "true")?;
            }
            sample_cmd(map)
        }
        Command::Toy(args) => toy(&args),
        Command::Calibrate { run, references, candidates, monotone, allow_nonmonotone, output } => {
            let opts = CalibrationOptions { monotone_projection: monotone, allow_nonmonotone };
            calibrate(&run, &references, &candidates, opts, &output)
        }
        Command::VerifyConsistency { sample, dict, variant, tau, label, output, mask } => {
            verify(&sample, &dict, &variant, tau, label, output.as_deref(), mask.as_deref())
        }
        Command::Compare { a, b, swap_reference, candidate_range, reference_range, output } => {
            let ranges = (ValueRange::parse(&candidate_range)?, ValueRange::parse(&reference_range)?);
            compare(&a, &b, swap_reference, ranges, output.as_deref())
        }
        Command::Probe { run, t_index, pixel, epsilon, input, seed, output } => {
            probe(&run, t_index, &pixel, epsilon, input.as_deref(), seed, &output)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn emit(output: Option<&Path>, value: &Value) -> Result<()> {
    match output {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn build_dict(run: &RunArgs, output: &Path) -> Result<()> {
    let map = run.to_config(None)?;
    let spec = super::run::dataset_spec(&map)?;
    let size: usize = map.parsed("scale")?.ok_or_else(|| Error::Config("build-dict needs `scale`".into()))?;
    let pad = map.parsed::<PaddingMode>("pad")?.unwrap_or(PaddingMode::Circular);
    let mut opts = DictionaryOptions::new(size, pad);
    opts.stride = map.parsed("stride")?.unwrap_or(1);
    let images = load_dataset(&spec)?;
    let dict = PatchDictionary::build(&images, opts)?;
    let dict = if map.flag("dedup")?.unwrap_or(false) { dict.deduplicated() } else { dict };
    let source = json!({ "config": map.to_json(), "data_digest": data_digest(&images) });
    write_dictionary(output, &dict, source.clone())?;
    let summary = json!({
        "output": output,
        "patch_size": dict.patch_size(),
        "pad": dict.padding(),
        "patches": dict.len(),
        "num_images": dict.num_images(),
        "deduplicated": dict.is_deduplicated(),
        "digest": dict.digest(),
        "config_digest": map.digest(),
        "source": source,
    });
    let mut sidecar = output.as_os_str().to_owned();
    sidecar.push(".manifest.json");
    write_json(Path::new(&sidecar), &summary)?;
    emit(None, &summary)
}

fn sample_cmd(mut map: ConfigMap) -> Result<()> {
    let cfg = RunConfig::resolve(&mut map)?;
    let out = cfg.out.clone().ok_or_else(|| Error::Config("`out` (output directory) is required".into()))?;
    if cfg.variant.is_local() && cfg.scales.is_none() {
        return Err(Error::Config(format!("{} needs `scale` or `scales`", cfg.variant)));
    }
    let digest = map.digest();
    let scales = cfg.scales.as_ref().map(|s| s.distinct()).unwrap_or_default();
    let (prepared, outputs) = with_threads(cfg.threads, || {
        let prepared = prepare(&cfg, &scales)?;
        let opts = SampleOptions {
            schedule: &cfg.schedule,
            scales: cfg.scales.as_ref(),
            shape: prepared.images[0].shape(),
            label: cfg.label,
            integrator: cfg.integrator,
            record: cfg.record,
            config_digest: digest.clone(),
        };
        let outputs = sample_batch(prepared.machine.as_ref(), &cfg.seeds, &opts)?;
        Ok((prepared, outputs))
    })?;

    create_dir(&out)?;
    let mut files = Vec::with_capacity(outputs.len());
    for (seed, o) in cfg.seeds.iter().zip(&outputs) {
        let png = format!("sample_{seed}.png");
        save_png(&out.join(&png), &o.image)?;
        let mut entry = json!({ "seed": seed, "png": png, "state_sha256": grid_digest(&o.image) });
        if cfg.save_float {
            let name = format!("sample_{seed}.tns");
            let meta = json!({ "seed": seed, "label": cfg.label, "config_digest": digest });
            save_tensors(&out.join(&name), &[Tensor::from_grid(&o.image, meta)])?;
            entry["tns"] = json!(name);
        }
        if let Some(t) = &o.trajectory {
            let name = format!("trajectory_{seed}.tns");
            save_trajectory(&out.join(&name), t)?;
            entry["trajectory"] = json!(name);
        }
        files.push(entry);
    }
    let manifest = json!({
        "command": "sample",
        "version": env!("CARGO_PKG_VERSION"),
        "config": map.to_json(),
        "config_digest": digest,
        "machine": cfg.variant,
        "seeds": cfg.seeds,
        "schedule": { "kind": cfg.schedule.kind(), "steps": cfg.schedule.steps(), "alpha_bar": cfg.schedule.alpha_bars() },
        "scales": cfg.scales.as_ref().map(|s| s.as_slice().to_vec()),
        "data": prepared.manifest_entries(),
        "outputs": files,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    emit(None, &json!({ "out": out, "config_digest": manifest["config_digest"], "outputs": manifest["outputs"] }))
}

fn toy(args: &ToyArgs) -> Result<()> {
    let opts = ToyOptions {
        size: args.size,
        steps: args.steps,
        scale: args.scale,
        pad: args.pad.parse()?,
        samples: args.samples,
        first_seed: args.seed,
        tau: args.tau,
        schedule: args.schedule.parse::<ScheduleKind>()?,
    };
    let report = with_threads(args.threads, || run_toy(&opts))?;
    let out = &args.out;
    create_dir(out)?;
    let cols = (report.images.len() as f64).sqrt().ceil() as usize;
    save_png(&out.join("samples_grid.png"), &tile_grids(&report.images, cols, 2)?)?;
    let masks: Vec<ImageGrid> = report
        .consistency
        .iter()
        .map(|c| ImageGrid::new(c.height, c.width, 1, c.mask().iter().map(|&p| if p { 1.0 } else { -1.0 }).collect()))
        .collect::<Result<_>>()?;
    save_png(&out.join("masks_grid.png"), &tile_grids(&masks, cols, 2)?)?;
    for (s, img) in report.samples.iter().zip(&report.images) {
        save_png(&out.join(format!("sample_{}.png", s.seed)), img)?;
        let meta = json!({ "seed": s.seed });
        save_tensors(&out.join(format!("sample_{}.tns", s.seed)), &[Tensor::from_grid(img, meta)])?;
    }
    let value = serde_json::to_value(&report)?;
    write_json(&out.join("report.json"), &value)?;
    let summary = json!({
        "variant": report.variant,
        "samples": report.samples.len(),
        "mean_pass_fraction": report.mean_pass_fraction,
        "min_pass_fraction": report.min_pass_fraction,
        "min_binary_fraction": report.min_binary_fraction,
        "novel_samples": report.novel_samples,
    });
    write_json(
        &out.join("manifest.json"),
        &json!({ "command": "toy", "version": env!("CARGO_PKG_VERSION"), "options": report.options, "summary": summary }),
    )?;
    emit(None, &summary)
}

fn calibrate(run: &RunArgs, refs: &[PathBuf], candidates: &str, opts: CalibrationOptions, output: &Path) -> Result<()> {
    let mut map = run.to_config(None)?;
    let cfg = RunConfig::resolve(&mut map)?;
    if !cfg.variant.is_local() {
        return Err(Error::Config(format!("calibration needs a local machine, got {}", cfg.variant)));
    }
    let mut cands = parse_usize_list(candidates)?;
    cands.sort_unstable();
    cands.dedup();
    let trajectories = refs.iter().map(|p| load_reference_trajectory(p)).collect::<Result<Vec<_>>>()?;
    let provenance = refs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
    let set = ReferenceSet { trajectories, provenance };
    let report = with_threads(cfg.threads, || {
        let prepared = prepare(&cfg, &cands)?;
        calibrate_scales(&set, prepared.machine.as_ref(), &cands, &cfg.schedule, opts)
    })?;
    let value = json!({
        "schedule": report.schedule.as_slice(),
        "config_digest": map.digest(),
        "references": refs,
        "report": report,
    });
    write_json(output, &value)?;
    emit(None, &json!({ "output": output, "schedule": value["schedule"], "violations": value["report"]["monotonicity_violations"] }))
}

fn verify(
    sample: &Path,
    dict: &Path,
    variant: &str,
    tau: f64,
    label: Option<u32>,
    output: Option<&Path>,
    mask: Option<&Path>,
) -> Result<()> {
    let img = load_image(sample)?.with_label(label);
    let (dict, _) = read_dictionary(dict)?;
    let variant: Variant = variant.parse()?;
    let report = verify_local_consistency(&img, &dict, variant, tau)?;
    if let Some(m) = mask {
        save_mask(m, report.height, report.width, &report.mask())?;
    }
    emit(output, &serde_json::to_value(&report)?)
}

/// Value range of stored tensors; PNGs are always decoded to signed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ValueRange {
    Signed,
    Unit,
}

impl ValueRange {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "signed" => Ok(Self::Signed),
            "unit" => Ok(Self::Unit),
            other => Err(Error::Config(format!("unknown value range `{other}` (signed | unit)"))),
        }
    }
}

fn load_in_range(path: &Path, range: ValueRange) -> Result<ImageGrid> {
    let g = load_image(path)?;
    let is_tns = path.extension().is_some_and(|e| e == "tns");
    if is_tns && range == ValueRange::Unit {
        return g.with_data(g.data().iter().map(|v| 2.0 * v - 1.0).collect());
    }
    Ok(g)
}

/// Image files (`.png`, `.tns`) in `dir`, sorted by file name.
fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png" || e == "tns"))
        .collect();
    v.sort();
    Ok(v)
}

/// Median of a nonempty list; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn compare(a: &Path, b: &Path, swap: bool, ranges: (ValueRange, ValueRange), output: Option<&Path>) -> Result<()> {
    let (fa, fb) = (image_files(a)?, image_files(b)?);
    let name = |p: &PathBuf| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut rows = Vec::new();
    let mut r2s = Vec::new();
    let mut pearsons = Vec::new();
    let mut unmatched: Vec<String> = fb.iter().map(name).filter(|n| !fa.iter().any(|p| name(p) == *n)).collect();
    for pa in &fa {
        let n = name(pa);
        let Some(pb) = fb.iter().find(|p| name(p) == n) else {
            unmatched.push(n);
            continue;
        };
        let (ga, gb) = (load_in_range(pa, ranges.0)?, load_in_range(pb, ranges.1)?);
        let (cand, refr) = if swap { (&gb, &ga) } else { (&ga, &gb) };
        let r2 = match pixelwise_r2(cand, refr) {
            Ok(v) => Some(v),
            Err(Error::ConstantReference) => None,
            Err(e) => return Err(e),
        };
        let pr = match pearson_r2(cand, refr) {
            Ok(v) => Some(v),
            Err(Error::ConstantReference | Error::ZeroNorm) => None,
            Err(e) => return Err(e),
        };
        r2s.extend(r2);
        pearsons.extend(pr);
        rows.push(json!({ "name": n, "r2": r2, "pearson_r2": pr }));
    }
    if rows.is_empty() {
        return Err(Error::Empty("matched image pairs"));
    }
    unmatched.sort();
    let table = json!({
        "candidate": if swap { b } else { a },
        "reference": if swap { a } else { b },
        "pairs": rows,
        "median_r2": median(&r2s),
        "median_pearson_r2": median(&pearsons),
        "undefined_r2": rows.len() - r2s.len(),
        "unmatched": unmatched,
    });
    emit(output, &table)
}

fn probe(run: &RunArgs, t_index: usize, pixel: &str, epsilon: f64, input: Option<&Path>, seed: u64, output: &Path) -> Result<()> {
    let mut map = run.to_config(None)?;
    let cfg = RunConfig::resolve(&mut map)?;
    let steps = cfg.schedule.steps();
    if t_index == 0 || t_index > steps {
        return Err(Error::Config(format!("t_index {t_index} outside 1..={steps}")));
    }
    let px = parse_usize_list(pixel)?;
    let &[row, col] = px.as_slice() else {
        return Err(Error::Config(format!("pixel must be `row,col`, got `{pixel}`")));
    };
    let scale = match &cfg.scales {
        Some(s) => s.at(t_index),
        None if cfg.variant.is_local() => return Err(Error::Config(format!("{} needs `scale` or `scales`", cfg.variant))),
        None => 0,
    };
    let alpha_bar = cfg.schedule.alpha_bar(t_index);
    let heat = with_threads(cfg.threads, || {
        let scales: Vec<usize> = if cfg.variant.is_local() { vec![scale] } else { Vec::new() };
        let prepared = prepare(&cfg, &scales)?;
        let phi = match input {
            Some(p) => load_image(p)?,
            None => {
                let x0 = &prepared.images[0];
                forward_noise_at(x0, alpha_bar, &initial_noise(seed, x0.shape()))?
            }
        }
        .with_label(cfg.label);
        receptive_field_probe(prepared.machine.as_ref(), &phi, alpha_bar, scale, (row, col), epsilon)
    })?;
    save_heatmap(output, &heat)?;
    let support = heat.values.iter().filter(|&&v| v > 0.0).count();
    let value = json!({
        "machine": cfg.variant,
        "t_index": t_index,
        "alpha_bar": alpha_bar,
        "scale": scale,
        "pixel": [row, col],
        "epsilon": epsilon,
        "support": support,
        "heatmap": heat,
    });
    write_json(&output.with_extension("json"), &value)?;
    emit(None, &json!({ "output": output, "support": support, "max": heat.max() }))
}
