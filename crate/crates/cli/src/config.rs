use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use hyperunmix::envi::Interleave;
use hyperunmix::neural::UnmixerConfig;
use hyperunmix::unmixer::UnmixSettings;
use serde::{Deserialize, Serialize};

use crate::InputError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub name: String,
    #[serde(default)]
    pub cube_path: Option<PathBuf>,
    #[serde(default)]
    pub truth_endmembers: Option<PathBuf>,
    #[serde(default)]
    pub truth_abundances: Option<PathBuf>,
    /// `[lines, samples, bands]`; taken from the registry when absent.
    #[serde(default)]
    pub expected_shape: Option<[usize; 3]>,
    #[serde(default)]
    pub class_count: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationStage {
    pub raw: Option<PathBuf>,
    pub dark: Option<PathBuf>,
    /// JSON list of `{reflectance, pixels: [[line, sample], ...]}`.
    pub panels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VcaStage {
    pub cube: Option<PathBuf>,
    pub endmembers: usize,
    pub seed: u64,
}

impl Default for VcaStage {
    fn default() -> Self {
        Self {
            cube: None,
            endmembers: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyStage {
    pub cube: Option<PathBuf>,
    pub endmembers: Option<PathBuf>,
    pub sigma_factor: f64,
    pub seed: u64,
}

impl Default for ClassifyStage {
    fn default() -> Self {
        Self {
            cube: None,
            endmembers: None,
            sigma_factor: hyperunmix::groundtruth::DEFAULT_SIGMA_FACTOR,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerStage {
    pub cube: Option<PathBuf>,
    pub classmap: Option<PathBuf>,
    pub kernel: usize,
}

impl Default for MixerStage {
    fn default() -> Self {
        Self {
            cube: None,
            classmap: None,
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnmixStage {
    pub method: String,
    pub cube: Option<PathBuf>,
    /// Starting point for `train`, trained model for `unmix --method unet`.
    pub checkpoint: Option<PathBuf>,
    /// Fixed endmembers for fcls; reference endmembers for the network.
    pub known_endmembers: Option<PathBuf>,
    pub endmembers: usize,
    pub seed: u64,
    pub nmf_iterations: usize,
    pub network: UnmixerConfig,
}

impl Default for UnmixStage {
    fn default() -> Self {
        let s = UnmixSettings::default();
        Self {
            method: "unet".into(),
            cube: None,
            checkpoint: None,
            known_endmembers: None,
            endmembers: s.endmembers,
            seed: s.seed,
            nmf_iterations: s.nmf_iterations,
            network: s.network,
        }
    }
}

impl UnmixStage {
    pub fn settings(&self) -> UnmixSettings {
        UnmixSettings {
            endmembers: self.endmembers,
            seed: self.seed,
            nmf_iterations: self.nmf_iterations,
            network: self.network.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateStage {
    pub abundances: Option<PathBuf>,
    pub endmembers: Option<PathBuf>,
    /// Class mean and sigma for the within-variance check.
    pub class_stats: Option<PathBuf>,
    pub sigma_factor: f64,
    pub epochs: Option<usize>,
    pub with_reference: bool,
}

impl Default for EvaluateStage {
    fn default() -> Self {
        Self {
            abundances: None,
            endmembers: None,
            class_stats: None,
            sigma_factor: hyperunmix::groundtruth::DEFAULT_SIGMA_FACTOR,
            epochs: None,
            with_reference: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderStage {
    pub cube: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<DatasetDescriptor>,
    pub calibration: CalibrationStage,
    pub vca: VcaStage,
    pub classify: ClassifyStage,
    pub mixer: MixerStage,
    pub unmix: UnmixStage,
    pub evaluate: EvaluateStage,
    pub render: RenderStage,
    /// Interleave of every cube written.
    pub output_interleave: Interleave,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| InputError(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = serde_json::from_str(&text)
            .map_err(|e| InputError(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Every seed in the config set to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.vca.seed = seed;
        self.classify.seed = seed;
        self.unmix.seed = seed;
        self.unmix.network.seed = seed;
        self
    }

    pub fn canonical_json(&self) -> anyhow::Result<Vec<u8>> {
        serde_json::to_vec(self).context("serializing config")
    }
}
