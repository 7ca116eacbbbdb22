//! Run configuration: defaults, an optional TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use itfit::encoder_fit::{PatchGrid, Pooling, DEFAULT_COMPONENTS};
use itfit::harmonizer::DEFAULT_LEVELS;
use serde::{Deserialize, Serialize};

/// Settings shared by every subcommand. Each field is optional so a flag can
/// be told apart from its default; the same struct is read from TOML.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigArgs {
    /// Dataset manifest (manifest.json)
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Start of the first time bin, ms [default: 50]
    #[arg(long, global = true)]
    pub bin_start: Option<f64>,
    /// End of the binned window, ms [default: 250]
    #[arg(long, global = true)]
    pub bin_end: Option<f64>,
    /// Bin width, ms [default: 40]
    #[arg(long, global = true)]
    pub bin_width: Option<f64>,
    /// Patch grid RxC; defaults to the grid matched to the fixation grid
    #[arg(long, global = true)]
    pub grid: Option<String>,
    /// Tile pooling: mean or flatten [default: mean]
    #[arg(long, global = true)]
    pub pooling: Option<String>,
    /// PLS components [default: 25]
    #[arg(long, global = true)]
    pub components: Option<usize>,
    /// Pyramid levels [default: 5]
    #[arg(long, global = true)]
    pub levels: Option<usize>,
    /// Alignment weight [default: 1]
    #[arg(long, global = true)]
    pub lambda1: Option<f64>,
    /// Weight decay [default: 0]
    #[arg(long, global = true)]
    pub lambda2: Option<f64>,
    /// Concept count [default: 10]
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Random seed [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Permutations for the null band [default: 200]
    #[arg(long, global = true)]
    pub permutations: Option<usize>,
    /// Recording subject to use when the manifest holds several
    #[arg(long, global = true)]
    pub subject: Option<String>,
}

impl ConfigArgs {
    /// Fields set in `over` replace those in `self`.
    pub fn overlay(self, over: ConfigArgs) -> ConfigArgs {
        macro_rules! pick {
            ($($f:ident),*) => { ConfigArgs { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(
            manifest,
            bin_start,
            bin_end,
            bin_width,
            grid,
            pooling,
            components,
            levels,
            lambda1,
            lambda2,
            k,
            seed,
            out,
            permutations,
            subject
        )
    }

    pub fn from_toml_file(path: &Path) -> Result<ConfigArgs> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Fully resolved settings, echoed into every run's metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub bin_start: f64,
    pub bin_end: f64,
    pub bin_width: f64,
    pub grid: Option<PatchGrid>,
    pub pooling: Pooling,
    pub components: usize,
    pub levels: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub k: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub permutations: usize,
    pub subject: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            bin_start: 50.0,
            bin_end: 250.0,
            bin_width: 40.0,
            grid: None,
            pooling: Pooling::Mean,
            components: DEFAULT_COMPONENTS,
            levels: DEFAULT_LEVELS,
            lambda1: 1.0,
            lambda2: 0.0,
            k: 10,
            seed: 0,
            out: PathBuf::from("out"),
            permutations: 200,
            subject: None,
        }
    }
}

fn parse_pooling(s: &str) -> Result<Pooling> {
    match s {
        "mean" => Ok(Pooling::Mean),
        "flatten" => Ok(Pooling::Flatten),
        other => bail!("unknown pooling {other:?}, expected mean or flatten"),
    }
}

impl RunConfig {
    /// Defaults, then `file`, then `flags`.
    pub fn resolve(file: Option<ConfigArgs>, flags: ConfigArgs) -> Result<RunConfig> {
        let a = file.unwrap_or_default().overlay(flags);
        let d = RunConfig::default();
        let cfg = RunConfig {
            manifest: a.manifest,
            bin_start: a.bin_start.unwrap_or(d.bin_start),
            bin_end: a.bin_end.unwrap_or(d.bin_end),
            bin_width: a.bin_width.unwrap_or(d.bin_width),
            grid: a
                .grid
                .as_deref()
                .map(str::parse)
                .transpose()
                .context("invalid --grid")?,
            pooling: a
                .pooling
                .as_deref()
                .map(parse_pooling)
                .transpose()?
                .unwrap_or(d.pooling),
            components: a.components.unwrap_or(d.components),
            levels: a.levels.unwrap_or(d.levels),
            lambda1: a.lambda1.unwrap_or(d.lambda1),
            lambda2: a.lambda2.unwrap_or(d.lambda2),
            k: a.k.unwrap_or(d.k),
            seed: a.seed.unwrap_or(d.seed),
            out: a.out.unwrap_or(d.out),
            permutations: a.permutations.unwrap_or(d.permutations),
            subject: a.subject,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width > 0.0)
            || !(self.bin_start < self.bin_end)
            || !self.bin_start.is_finite()
            || !self.bin_end.is_finite()
        {
            bail!("bins need width > 0 and start < end");
        }
        if self.components == 0 || self.levels == 0 || self.k == 0 || self.permutations == 0 {
            bail!("components, levels, k and permutations must be >= 1");
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            bail!("lambda1 and lambda2 must be >= 0");
        }
        Ok(())
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.manifest.as_deref().context("--manifest is required")
    }
}
