//! Settings resolution. Each value comes from the first source that sets it:
//! command-line flag, `DVP_*` environment variable, config file, built-in
//! default. Flags and variables are merged by clap; this module layers the
//! file and the defaults underneath.

use std::path::{Path, PathBuf};

use clap::builder::BoolishValueParser;
use clap::Args;
use serde::Deserialize;

use dvp_core::engine::{EngineConfig, ScoreWeights};
use dvp_core::layout::{GridSpec, StarPolicy, DEFAULT_CELL_PX};

use crate::CliError;

pub const DEFAULT_CONFIG_FILE: &str = "dvp.toml";
pub const DEFAULT_RUNS_DIR: &str = "runs";
pub const DEFAULT_SESSIONS_DIR: &str = "sessions";

/// Keys accepted in `dvp.toml`. All optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub grid: Option<String>,
    pub canvas: Option<String>,
    pub cell_px: Option<u32>,
    pub refs: Option<usize>,
    pub stars: Option<String>,
    pub weights: Option<String>,
    pub guidance_scale: Option<f64>,
    pub steps: Option<u32>,
    pub seed_per_arrangement: Option<bool>,
    pub border_px: Option<u32>,
    pub max_parallel: Option<usize>,
    pub mock_backends: Option<bool>,
    pub runs_dir: Option<PathBuf>,
    pub sessions_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub addr: Option<String>,
    pub max_concurrent_runs: Option<usize>,
    pub cors_origin: Option<String>,
}

impl FileConfig {
    /// Reads `explicit`, or `./dvp.toml` when present.
    pub fn load(explicit: Option<&Path>) -> Result<Self, CliError> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let p = PathBuf::from(DEFAULT_CONFIG_FILE);
                if !p.is_file() {
                    return Ok(Self::default());
                }
                p
            }
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Generation settings shared by `generate`, `refine`, `evaluate` and `serve`.
#[derive(Debug, Clone, Default, Args)]
pub struct EngineArgs {
    /// Generation seed [default: 0]
    #[arg(long, env = "DVP_SEED")]
    pub seed: Option<u64>,
    /// Key elements to extract [default: 3]
    #[arg(long, env = "DVP_N")]
    pub n: Option<usize>,
    /// Candidates per element [default: 3]
    #[arg(long, env = "DVP_K")]
    pub k: Option<usize>,
    /// Grid shape ROWSxCOLS [default: 3x3]
    #[arg(long, env = "DVP_GRID")]
    pub grid: Option<String>,
    /// Canvas: center, ROW,COL or ROW,COL:HxW [default: center]
    #[arg(long, env = "DVP_CANVAS")]
    pub canvas: Option<String>,
    /// Cell side in pixels [default: 512]
    #[arg(long, env = "DVP_CELL_PX")]
    pub cell_px: Option<u32>,
    /// Preset geometry with this many reference cells (1, 2, 4, 8 or 9); overrides --grid and --canvas [default: unset]
    #[arg(long, env = "DVP_REFS")]
    pub refs: Option<usize>,
    /// Star cells: auto, none or ROW,COL;ROW,COL [default: auto]
    #[arg(long, env = "DVP_STARS")]
    pub stars: Option<String>,
    /// Score weights TEXT,IMAGE,QUALITY [default: 0.5,0.5,0]
    #[arg(long, env = "DVP_WEIGHTS")]
    pub weights: Option<String>,
    /// Guidance scale [default: 30]
    #[arg(long, env = "DVP_GUIDANCE_SCALE")]
    pub guidance_scale: Option<f64>,
    /// Denoising steps [default: 50]
    #[arg(long, env = "DVP_STEPS")]
    pub steps: Option<u32>,
    /// Use seed+i for arrangement i [default: false]
    #[arg(long, env = "DVP_SEED_PER_ARRANGEMENT", num_args = 0..=1, default_missing_value = "true",
          value_parser = BoolishValueParser::new(), value_name = "BOOL")]
    pub seed_per_arrangement: Option<bool>,
    /// White border between cells in pixels [default: 0]
    #[arg(long, env = "DVP_BORDER_PX")]
    pub border_px: Option<u32>,
    /// Arrangements generated concurrently [default: 6]
    #[arg(long, env = "DVP_MAX_PARALLEL")]
    pub max_parallel: Option<usize>,
    /// Use the deterministic offline backends [default: false]
    #[arg(long, env = "DVP_MOCK_BACKENDS", num_args = 0..=1, default_missing_value = "true",
          value_parser = BoolishValueParser::new(), value_name = "BOOL")]
    pub mock_backends: Option<bool>,
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl EngineArgs {
    pub fn mock(&self, file: &FileConfig) -> bool {
        self.mock_backends.or(file.mock_backends).unwrap_or(false)
    }

    pub fn engine_config(&self, file: &FileConfig) -> Result<EngineConfig, CliError> {
        let d = EngineConfig::default();
        let cell_px = self.cell_px.or(file.cell_px).unwrap_or(DEFAULT_CELL_PX);
        let grid = match self.refs.or(file.refs) {
            Some(refs) => GridSpec::with_reference_count(refs, cell_px).map_err(usage)?,
            None => {
                let g = self.grid.clone().or_else(|| file.grid.clone()).unwrap_or_else(|| "3x3".into());
                let c = self.canvas.clone().or_else(|| file.canvas.clone()).unwrap_or_else(|| "center".into());
                GridSpec::parse(&g, &c, cell_px).map_err(usage)?
            }
        };
        let stars = match self.stars.as_ref().or(file.stars.as_ref()) {
            Some(s) => StarPolicy::parse(s).map_err(usage)?,
            None => StarPolicy::Auto,
        };
        stars.resolve(&grid).map_err(usage)?;
        let weights = match self.weights.as_ref().or(file.weights.as_ref()) {
            Some(w) => ScoreWeights::parse(w).map_err(usage)?,
            None => d.weights,
        };
        Ok(EngineConfig {
            n: self.n.or(file.n).unwrap_or(d.n),
            k: self.k.or(file.k).unwrap_or(d.k),
            elements: None,
            grid,
            stars,
            weights,
            guidance_scale: self.guidance_scale.or(file.guidance_scale).unwrap_or(d.guidance_scale),
            steps: self.steps.or(file.steps).unwrap_or(d.steps),
            seed: self.seed.or(file.seed).unwrap_or(d.seed),
            seed_per_arrangement: self
                .seed_per_arrangement
                .or(file.seed_per_arrangement)
                .unwrap_or(d.seed_per_arrangement),
            border_px: self.border_px.or(file.border_px).unwrap_or(d.border_px),
            max_parallel: self.max_parallel.or(file.max_parallel).unwrap_or(d.max_parallel).max(1),
        })
    }
}

/// Splits `a, b ,c` into trimmed non-empty items.
pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}
