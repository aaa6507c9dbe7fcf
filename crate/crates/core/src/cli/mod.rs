//! Command-line interface.
//!
//! Every failure exits nonzero with a one-line JSON object
//! `{"code": ..., "message": ...}` on stderr.

mod commands;
pub mod config;
pub mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::error::{Error, Result};
use config::ConfigMap;

#[derive(Debug, Parser)]
#[command(name = "patchmosaic", version, about = "Analytic patch-mosaic score machines and tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract a patch dictionary from a dataset and write it as PDX1.
    BuildDict {
        #[command(flatten)]
        run: RunArgs,
        /// Output PDX1 file.
        #[arg(long)]
        output: PathBuf,
    },
    /// Sample images with a score machine.
    Sample {
        #[command(flatten)]
        run: RunArgs,
        /// Re-run the configuration recorded in a previous run's manifest.
        #[arg(long)]
        from_manifest: Option<PathBuf>,
        /// Also write per-step trajectories.
        #[arg(long)]
        record: bool,
        /// Also write exact final states as TNS1 tensors.
        #[arg(long)]
        save_float: bool,
    },
    /// Black/white two-image creativity experiment with a consistency report.
    Toy(ToyArgs),
    /// Fit a per-step scale schedule to reference trajectories.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
        /// Reference trajectory files (TNS1 state/noise records).
        #[arg(long = "reference", required = true, num_args = 1..)]
        references: Vec<PathBuf>,
        /// Candidate scales, comma separated.
        #[arg(long, default_value = "3,5,7,9")]
        candidates: String,
        /// Project the medians onto a schedule that never grows as t decreases.
        #[arg(long)]
        monotone: bool,
        /// Accept medians that grow as t decreases instead of failing.
        #[arg(long)]
        allow_nonmonotone: bool,
        /// Output JSON file.
        #[arg(long)]
        output: PathBuf,
    },
    /// Check that every pixel of a sample is the center of its nearest patch.
    VerifyConsistency {
        /// Sample image (.png or .tns).
        #[arg(long)]
        sample: PathBuf,
        /// PDX1 dictionary.
        #[arg(long)]
        dict: PathBuf,
        /// ls | els | bels.
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = crate::analysis::DEFAULT_TAU)]
        tau: f64,
        /// Restrict candidates to this class.
        #[arg(long)]
        label: Option<u32>,
        /// Output JSON report (default: stdout).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Pass/fail mask PNG.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Per-pair pixelwise r² between two image sets, matched by file name.
    Compare {
        /// Candidate directory.
        a: PathBuf,
        /// Reference directory.
        b: PathBuf,
        /// Treat A as the reference instead of B.
        #[arg(long)]
        swap_reference: bool,
        /// Value range of A's .tns files: signed ([-1, 1]) or unit ([0, 1]).
        #[arg(long, default_value = "signed")]
        candidate_range: String,
        /// Value range of B's .tns files.
        #[arg(long, default_value = "signed")]
        reference_range: String,
        /// Output JSON table (default: stdout).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Receptive-field heatmap of the score at one pixel.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        /// Grid index of the noise level (1..=steps).
        #[arg(long)]
        t_index: usize,
        /// Output pixel as `row,col`.
        #[arg(long)]
        pixel: String,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        /// Input state (.png or .tns); default is a noised first training image.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Seed of the noise used when no input is given.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output heatmap PNG; a JSON file with the same stem is written beside it.
        #[arg(long)]
        output: PathBuf,
    },
}

/// Flags shared by commands that build a machine. Each overrides the
/// corresponding key from `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Set a configuration key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub machine: Option<String>,
    #[arg(long)]
    pub data_format: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub labels: Option<String>,
    #[arg(long)]
    pub subset: Option<String>,
    /// Keep only training images of this class.
    #[arg(long)]
    pub data_label: Option<String>,
    /// Condition sampling on this class.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub pad: Option<String>,
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub scale: Option<String>,
    #[arg(long)]
    pub scales: Option<String>,
    #[arg(long)]
    pub scale_schedule: Option<String>,
    #[arg(long)]
    pub stride: Option<String>,
    #[arg(long)]
    pub dedup: Option<String>,
    #[arg(long)]
    pub top_k: Option<String>,
    #[arg(long)]
    pub integrator: Option<String>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub threads: Option<String>,
}

impl RunArgs {
    /// Config file (or `base`), then `--set`, then dedicated flags.
    pub fn to_config(&self, base: Option<ConfigMap>) -> Result<ConfigMap> {
        let mut map = match (&self.config, base) {
            (Some(p), _) => ConfigMap::load(p)?,
            (None, Some(b)) => b,
            (None, None) => ConfigMap::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
            map.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("machine", &self.machine),
            ("data.format", &self.data_format),
            ("data.path", &self.data),
            ("data.labels", &self.labels),
            ("data.subset", &self.subset),
            ("data.label", &self.data_label),
            ("label", &self.label),
            ("pad", &self.pad),
            ("schedule", &self.schedule),
            ("steps", &self.steps),
            ("scale", &self.scale),
            ("scales", &self.scales),
            ("scale_schedule", &self.scale_schedule),
            ("stride", &self.stride),
            ("dedup", &self.dedup),
            ("top_k", &self.top_k),
            ("integrator", &self.integrator),
            ("seeds", &self.seeds),
            ("out", &self.out),
            ("threads", &self.threads),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                // A flag for one form of the scale schedule replaces the others.
                if matches!(k, "scale" | "scales" | "scale_schedule") {
                    for other in ["scale", "scales", "scale_schedule"] {
                        map.remove(other);
                    }
                }
                map.set(k, v)?;
            }
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 3)]
    pub scale: usize,
    /// circular (ELS) or zero (BELS).
    #[arg(long, default_value = "circular")]
    pub pad: String,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// First seed; samples use consecutive seeds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = crate::analysis::DEFAULT_TAU)]
    pub tau: f64,
    /// Noise schedule: logsnr | cosine | linear.
    #[arg(long, default_value = "logsnr")]
    pub schedule: String,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.render().to_string();
            eprintln!("{}", json!({ "code": "usage", "message": msg.trim() }));
            return 2;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({ "code": e.code(), "message": e.to_string() }));
            1
        }
    }
}
