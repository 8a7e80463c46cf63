use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dceseg_core::models::{Architecture, InputConfig, NetworkSpec};
use serde::{Deserialize, Serialize};

/// Training run described by a TOML file.
///
/// ```toml
/// architecture = "dilated_fcn"   # or "unet"
/// input_config = "III"           # I, II or III
/// phase = 2                      # configuration I only
/// iterations = 5000
/// learning_rate = 0.001
/// seed = 7
/// checkpoint_every = 1000
/// breath_hold_sizes = [1, 1, 1, 1, 1, 1]
///
/// [data]
/// train_dir = "phantoms"
/// out_dir = "run"
///
/// [desk]
/// width_divisor = 4
/// grid_size = 64
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub architecture: String,
    pub input_config: String,
    #[serde(default)]
    pub phase: Option<usize>,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    /// Acquisitions per breath hold, when the series holds raw acquisitions.
    #[serde(default)]
    pub breath_hold_sizes: Option<Vec<usize>>,
    pub data: DataPaths,
    #[serde(default)]
    pub desk: DeskScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train_dir: PathBuf,
    pub out_dir: PathBuf,
}

/// Reductions for running on a desktop; the defaults are full scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskScale {
    #[serde(default = "one")]
    pub width_divisor: usize,
    /// Expected in-plane size of the training volumes, if fixed.
    #[serde(default)]
    pub grid_size: Option<usize>,
}

impl Default for DeskScale {
    fn default() -> Self {
        DeskScale {
            width_divisor: 1,
            grid_size: None,
        }
    }
}

fn default_iterations() -> u64 {
    500_000
}

fn default_learning_rate() -> f64 {
    0.001
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train_dir, &mut cfg.data.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.network_spec()?;
        Ok(cfg)
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let arch: Architecture = self.architecture.parse()?;
        let input = InputConfig::parse(&self.input_config, self.phase)?;
        if self.phase.is_some() && !matches!(input, InputConfig::SinglePhase { .. }) {
            bail!("`phase` only applies to input configuration I");
        }
        if self.iterations == 0 {
            bail!("iterations must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!("learning_rate must be positive, got {}", self.learning_rate);
        }
        let spec = NetworkSpec::new(arch, input).with_width_divisor(self.desk.width_divisor);
        spec.validate()?;
        Ok(spec)
    }
}
