//! Run configuration: an optional TOML file mirrors every training flag, the
//! flags override it, and the resolved result is echoed into the run
//! directory so a run is self-describing.

use anyhow::{bail, Context, Result};
use hfus_core::dataset::ConfounderMode;
use hfus_core::layers::NormKind;
use hfus_core::model::ModelVariant;
use hfus_core::train::AugmentationConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Training configuration file. Sections group keys by the module they
/// configure; unknown keys anywhere are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Option<String>,
    pub norm: Option<String>,
    pub input_size: Option<[usize; 2]>,
    pub widths: Option<Vec<usize>>,
    pub strides: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub fold: Option<usize>,
    pub folds: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub brightness: Option<[f64; 2]>,
    pub contrast: Option<[f64; 2]>,
    pub rotation_deg: Option<[f64; 2]>,
    pub scale: Option<[f64; 2]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub out: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
    }
}

/// Fully resolved training setup (file values overridden by flags, then
/// defaults). Serializes back to the same TOML layout for the provenance
/// echo.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSetup {
    pub data: DataEcho,
    pub model: ModelEcho,
    pub train: TrainEcho,
    pub augment: AugmentEcho,
    pub output: OutputEcho,
}

#[derive(Debug, Clone, Serialize)]
pub struct DataEcho {
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelEcho {
    pub variant: String,
    pub norm: String,
    pub input_size: [usize; 2],
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainEcho {
    pub fold: usize,
    pub folds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AugmentEcho {
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputEcho {
    pub out: PathBuf,
}

impl TrainSetup {
    pub fn variant(&self) -> Result<ModelVariant> {
        parse_variant(&self.model.variant)
    }

    pub fn norm(&self) -> Result<NormKind> {
        parse_norm(&self.model.norm)
    }

    pub fn augmentation(&self) -> AugmentationConfig {
        let pair = |a: [f64; 2]| (a[0], a[1]);
        AugmentationConfig {
            brightness: pair(self.augment.brightness),
            contrast: pair(self.augment.contrast),
            rotation_deg: pair(self.augment.rotation_deg),
            scale: pair(self.augment.scale),
        }
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.model.input_size[0], self.model.input_size[1])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn parse_variant(s: &str) -> Result<ModelVariant> {
    ModelVariant::parse(s).with_context(|| {
        let names: Vec<&str> = ModelVariant::ALL.iter().map(|v| v.as_str()).collect();
        format!("unknown variant {s:?}; expected one of {}", names.join(", "))
    })
}

pub fn parse_norm(s: &str) -> Result<NormKind> {
    NormKind::parse(s).with_context(|| format!("unknown norm {s:?}; expected instance or batch"))
}

pub fn parse_confounder(s: &str) -> Result<ConfounderMode> {
    ConfounderMode::parse(s)
        .with_context(|| format!("unknown confounder mode {s:?}; expected off, train, or flipped"))
}

/// Parse `HxW`, for example `64x64`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 2 {
        bail!("expected HxW, got {s:?}");
    }
    let h = parts[0].parse().with_context(|| format!("bad height in {s:?}"))?;
    let w = parts[1].parse().with_context(|| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

/// Parse a comma-separated list of positive integers, for example `16,32,64`.
pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad entry in list {s:?}")))
        .collect()
}

/// Parse `lo,hi`, for example `-0.1,0.1`.
pub fn parse_range(s: &str) -> Result<[f64; 2]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        bail!("expected lo,hi, got {s:?}");
    }
    let lo = parts[0].trim().parse().with_context(|| format!("bad lower bound in {s:?}"))?;
    let hi = parts[1].trim().parse().with_context(|| format!("bad upper bound in {s:?}"))?;
    Ok([lo, hi])
}
