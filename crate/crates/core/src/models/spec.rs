use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of contrast phases after breath-hold averaging.
pub const NUM_PHASES: usize = 6;

/// Index of the late arterial phase, the single-phase default.
pub const LATE_ARTERIAL_PHASE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    DilatedFcn,
    Unet,
}

impl Architecture {
    pub const ALL: [Architecture; 2] = [Architecture::DilatedFcn, Architecture::Unet];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::DilatedFcn => "dilated_fcn",
            Architecture::Unet => "unet",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dilated_fcn" => Ok(Architecture::DilatedFcn),
            "unet" => Ok(Architecture::Unet),
            other => Err(Error::invalid(format!(
                "unknown architecture `{other}`; valid options: dilated_fcn, unet"
            ))),
        }
    }
}

/// How the DCE phases are presented to a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputConfig {
    /// I: one phase image.
    SinglePhase { phase: usize },
    /// II: every phase through one shared trunk, merged late by concatenation.
    SeparatePhases,
    /// III: the phases as channels of one image.
    MultiChannel,
}

impl InputConfig {
    pub fn single_default() -> Self {
        InputConfig::SinglePhase {
            phase: LATE_ARTERIAL_PHASE,
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            InputConfig::SinglePhase { .. } => 1,
            InputConfig::SeparatePhases | InputConfig::MultiChannel => NUM_PHASES,
        }
    }

    /// Trunk input channels: the phases of configuration II enter one at a time.
    pub fn trunk_in_channels(self) -> usize {
        match self {
            InputConfig::MultiChannel => NUM_PHASES,
            _ => 1,
        }
    }

    pub fn roman(self) -> &'static str {
        match self {
            InputConfig::SinglePhase { .. } => "I",
            InputConfig::SeparatePhases => "II",
            InputConfig::MultiChannel => "III",
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            InputConfig::SinglePhase { phase } if phase >= NUM_PHASES => Err(Error::invalid(format!(
                "phase index {phase} out of range 0..{NUM_PHASES}"
            ))),
            _ => Ok(()),
        }
    }

    /// Parses `I`, `II` or `III`; `phase` applies to `I` only.
    pub fn parse(s: &str, phase: Option<usize>) -> Result<Self> {
        let cfg = match s {
            "I" | "i" => InputConfig::SinglePhase {
                phase: phase.unwrap_or(LATE_ARTERIAL_PHASE),
            },
            "II" | "ii" => InputConfig::SeparatePhases,
            "III" | "iii" => InputConfig::MultiChannel,
            other => {
                return Err(Error::invalid(format!(
                    "unknown input configuration `{other}`; valid options: I, II, III"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for InputConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.roman())
    }
}

/// Kernel size and dilation of one layer in a sequential stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeom {
    pub kernel: usize,
    pub dilation: usize,
}

impl LayerGeom {
    pub fn new(kernel: usize, dilation: usize) -> Self {
        LayerGeom { kernel, dilation }
    }
}

/// Receptive field (height, width) of a sequential stride-1 stack:
/// `1 + Σ dilation·(kernel − 1)`.
pub fn receptive_field(layers: &[LayerGeom]) -> (usize, usize) {
    let rf = 1 + layers
        .iter()
        .map(|l| l.dilation * (l.kernel - 1))
        .sum::<usize>();
    (rf, rf)
}

/// Seven 3x3 layers with growing dilation, then a 1x1 classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DilatedFcnSpec {
    pub dilations: Vec<usize>,
    pub width: usize,
}

impl DilatedFcnSpec {
    pub const DILATIONS: [usize; 7] = [1, 1, 2, 4, 8, 16, 1];
    pub const WIDTH: usize = 32;

    pub fn with_divisor(width_divisor: usize) -> Result<Self> {
        Ok(DilatedFcnSpec {
            dilations: Self::DILATIONS.to_vec(),
            width: scaled(Self::WIDTH, width_divisor)?,
        })
    }

    /// All layers including the final 1x1.
    pub fn layers(&self) -> Vec<LayerGeom> {
        let mut l: Vec<_> = self.dilations.iter().map(|&d| LayerGeom::new(3, d)).collect();
        l.push(LayerGeom::new(1, 1));
        l
    }
}

impl Default for DilatedFcnSpec {
    fn default() -> Self {
        Self::with_divisor(1).expect("divisor 1 is valid")
    }
}

/// Four resolution stages with three skip connections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetSpec {
    pub widths: [usize; 4],
    pub convs_per_stage: usize,
}

impl UNetSpec {
    pub const WIDTHS: [usize; 4] = [16, 32, 64, 128];

    pub fn with_divisor(width_divisor: usize) -> Result<Self> {
        let mut widths = [0; 4];
        for (w, &full) in widths.iter_mut().zip(&Self::WIDTHS) {
            *w = scaled(full, width_divisor)?;
        }
        Ok(UNetSpec {
            widths,
            convs_per_stage: 2,
        })
    }

    /// Spatial dims must survive three 2x2 poolings.
    pub const SIZE_MULTIPLE: usize = 8;
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self::with_divisor(1).expect("divisor 1 is valid")
    }
}

fn scaled(width: usize, divisor: usize) -> Result<usize> {
    if divisor == 0 || width % divisor != 0 {
        return Err(Error::invalid(format!(
            "width divisor {divisor} must be a positive divisor of {width}"
        )));
    }
    Ok(width / divisor)
}

/// Declarative description of a network to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    pub input: InputConfig,
    #[serde(default = "one")]
    pub width_divisor: usize,
}

fn one() -> usize {
    1
}

impl NetworkSpec {
    pub fn new(architecture: Architecture, input: InputConfig) -> Self {
        NetworkSpec {
            architecture,
            input,
            width_divisor: 1,
        }
    }

    pub fn with_width_divisor(mut self, divisor: usize) -> Self {
        self.width_divisor = divisor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.input.validate()?;
        match self.architecture {
            Architecture::DilatedFcn => DilatedFcnSpec::with_divisor(self.width_divisor).map(|_| ()),
            Architecture::Unet => UNetSpec::with_divisor(self.width_divisor).map(|_| ()),
        }
    }
}
