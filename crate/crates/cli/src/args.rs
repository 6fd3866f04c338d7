//! Command-line arguments and `--config` merging.
//!
//! Every command's arguments serialize to TOML. A `--config` file holds the
//! same keys and takes precedence over flags, so the header of any CSV this
//! tool writes can be fed back in to repeat the run.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Parser, Debug)]
#[command(name = "critinit", version, about = "Criticality of randomly initialized MLPs: theory and Monte Carlo")]
pub struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true, env = "CRITINIT_WORKERS")]
    pub workers: Option<usize>,
    /// Run on the calling thread only.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Infinite-width K, χ_J, χ_Δ, J and Θ per layer, as CSV.
    TheoryTrace(TraceArgs),
    /// Critical points (--point) or a critical line (--line), as CSV.
    Critical(CriticalArgs),
    /// χ* over a grid of (σ_w, σ_b), as CSV.
    PhaseDiagram(PhaseArgs),
    /// Finite-width ensemble measurements, as JSON.
    #[command(subcommand)]
    Mc(McCommand),
    /// Power-law or exponential fit to a CSV series, as JSON.
    Fit(FitArgs),
}

#[derive(Subcommand, Debug)]
pub enum McCommand {
    /// Ensemble J^{L−2,L−1} against χ*.
    Chi(McChiArgs),
    /// Ensemble J^{l0,l} for every layer.
    Profile(McProfileArgs),
    /// Ensemble empirical NTK at the output.
    Ntk(McNtkArgs),
    /// J^{0,2} against the finite-input-width correction.
    N0check(McN0Args),
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ModelArgs {
    /// relu, erf, gelu or scale-invariant:A+:A-.
    #[arg(long)]
    pub act: Option<String>,
    /// vanilla, pre-ln or post-ln.
    #[arg(long, default_value = "vanilla")]
    pub mode: String,
    /// Weight scale σ_w.
    #[arg(long)]
    pub sw: Option<f64>,
    /// Bias scale σ_b.
    #[arg(long, default_value_t = 0.0)]
    pub sb: f64,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct TraceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub depth: Option<usize>,
    /// First-layer kernel; defaults to σ_w²·q + σ_b².
    #[arg(long)]
    pub k1: Option<f64>,
    /// Mean squared input entry ‖x‖²/N₀.
    #[arg(long, default_value_t = 1.0)]
    pub q: f64,
    /// Source layer of the partial Jacobian column.
    #[arg(long, default_value_t = 0)]
    pub l0: usize,
    /// NTK recursion: derivation or boxed.
    #[arg(long, default_value = "derivation")]
    pub ntk: String,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct CriticalArgs {
    /// relu, erf, gelu or scale-invariant:A+:A-.
    #[arg(long)]
    pub act: Option<String>,
    #[arg(long, default_value = "vanilla")]
    pub mode: String,
    /// Report the critical points.
    #[arg(long, conflicts_with = "line")]
    pub point: bool,
    /// Report σ_b on the critical line for a sweep of σ_w.
    #[arg(long)]
    pub line: bool,
    #[arg(long, default_value_t = 0.5)]
    pub sw_min: f64,
    #[arg(long, default_value_t = 3.0)]
    pub sw_max: f64,
    /// Number of σ_w values in the sweep.
    #[arg(long, default_value_t = 26)]
    pub n: usize,
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct PhaseArgs {
    #[arg(long)]
    pub act: Option<String>,
    #[arg(long, default_value = "vanilla")]
    pub mode: String,
    #[arg(long, default_value_t = 0.5)]
    pub sw_min: f64,
    #[arg(long, default_value_t = 3.0)]
    pub sw_max: f64,
    #[arg(long, default_value_t = 26)]
    pub nw: usize,
    #[arg(long, default_value_t = 0.0)]
    pub sb_min: f64,
    #[arg(long, default_value_t = 2.0)]
    pub sb_max: f64,
    #[arg(long, default_value_t = 21)]
    pub nb: usize,
    /// Also write the χ* = 1 contour to this CSV file.
    #[arg(long)]
    pub contour: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct McCommon {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Normalization groups; 1 is LayerNorm.
    #[arg(long, default_value_t = 1)]
    pub groups: usize,
    #[arg(long, default_value_t = 1000)]
    pub width: usize,
    /// Input dimension N₀; defaults to the width.
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub depth: usize,
    /// Ensemble size.
    #[arg(long, default_value_t = 30)]
    pub n_init: usize,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub input_mean: f64,
    #[arg(long, default_value_t = 0.5)]
    pub input_std: f64,
    /// Raw little-endian f32 input vector; replaces the Gaussian input.
    #[arg(long)]
    pub input_file: Option<PathBuf>,
    /// Draw a fresh input for every ensemble member.
    #[arg(long)]
    pub per_init_input: bool,
    /// dense or projected.
    #[arg(long, default_value = "dense")]
    pub sampler: String,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct McChiArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: McCommon,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct McProfileArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: McCommon,
    #[arg(long, default_value_t = 0)]
    pub l0: usize,
    /// Write the per-layer series to this CSV file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct McNtkArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: McCommon,
    /// Lift the width and depth guard.
    #[arg(long)]
    pub allow_large: bool,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct McN0Args {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: McCommon,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct FitArgs {
    /// CSV file; the first column is the layer.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// power or exp.
    #[arg(long, default_value = "power")]
    pub kind: String,
    /// Fit layers strictly above this one.
    #[arg(long, default_value_t = 100)]
    pub l_min: usize,
    /// Column to fit; defaults to `J` if present, else the second column.
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub trait Configurable: Serialize + DeserializeOwned {
    fn config_path(&self) -> Option<&Path>;
}

macro_rules! configurable {
    ($($t:ty),*) => {$(
        impl Configurable for $t {
            fn config_path(&self) -> Option<&Path> {
                self.config.as_deref()
            }
        }
    )*};
}

configurable!(TraceArgs, CriticalArgs, PhaseArgs, McChiArgs, McProfileArgs, McNtkArgs, McN0Args, FitArgs);

/// Keys written into output headers that are not arguments.
const HEADER_KEYS: [&str; 2] = ["version", "command"];

/// Applies the `--config` file, if any, over the parsed flags.
pub fn resolve<T: Configurable>(args: T) -> Result<T, Failure> {
    let Some(path) = args.config_path().map(Path::to_path_buf) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    parse_config(args, &text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn parse_config<T: Configurable>(args: T, text: &str) -> Result<T, String> {
    let file: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let mut merged = toml::Table::try_from(&args).map_err(|e| e.to_string())?;
    for (k, v) in file.clone() {
        if !HEADER_KEYS.contains(&k.as_str()) {
            merged.insert(k, v);
        }
    }
    let out: T = merged.try_into().map_err(|e: toml::de::Error| e.to_string())?;
    let known = toml::Table::try_from(&out).map_err(|e| e.to_string())?;
    if let Some(k) = file.keys().find(|k| !known.contains_key(*k) && !HEADER_KEYS.contains(&k.as_str())) {
        return Err(format!("unknown key {k:?}"));
    }
    Ok(out)
}
