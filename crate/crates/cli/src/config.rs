use std::path::{Path, PathBuf};

use mcan::dataset::DatasetSpec;
use mcan::robustness::SweepSpec;
use mcan::trainer::TrainConfig;
use mcan::NetConfig;
use serde::{Deserialize, Serialize};

/// Which part of a split dataset a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    #[default]
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
    pub subset: Subset,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
            subset: Subset::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n: f64,
    pub beta: f64,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: 1.0,
            beta: 0.0,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    /// Cap on the number of samples analysed; `None` uses the whole subset.
    pub max_samples: Option<usize>,
    /// Index (within the subset) of the sample whose masks are exported.
    pub mask_sample: usize,
    pub top_k: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            max_samples: Some(500),
            mask_sample: 0,
            top_k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveConfig {
    pub ns: Vec<f64>,
    pub betas: Vec<f64>,
    pub count: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            ns: vec![1.0],
            betas: vec![0.0],
            count: 101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub out: PathBuf,
    /// Exported dataset directory (attribute file plus images).
    pub data: Option<PathBuf>,
    /// CelebA-style attribute file; images are read from `image_dir`.
    pub attr_file: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything a command needs, resolved from a config file and flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub split: SplitConfig,
    pub eval: EvalConfig,
    pub analyze: AnalyzeConfig,
    pub sweep: SweepSpec,
    pub curve: CurveConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        std::fs::write(dir.join("run_config.json"), text + "\n")
    }
}
