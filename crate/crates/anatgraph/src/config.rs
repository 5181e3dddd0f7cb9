//! Run configuration: one JSON document covering every subcommand, with
//! defaults for all fields and unknown keys rejected. The resolved config is
//! hashed (SHA-256 of its canonical JSON) and that hash is embedded in every
//! artifact a command writes.

use anatgraph_core::augment::AugmentConfig;
use anatgraph_core::encoders::ModelConfig;
use anatgraph_core::error::{Error, Result};
use anatgraph_core::patch_graph::default_rho_mm;
use anatgraph_core::synth::{ClassTexture, SynthConfig};
use anatgraph_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for data-parallel stages; 0 means all available cores.
    pub workers: usize,
    pub data: DataSection,
    pub grid: GridSection,
    pub model: ModelSection,
    pub augment: AugmentSection,
    pub train: TrainSection,
    pub probe: ProbeSection,
    pub synth: SynthSection,
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Treat volume files as raw Hounsfield units and window them to [-1, 1].
    pub hu_window: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub patch_size: usize,
    pub step: usize,
    /// Edge threshold in mm; derived from the step when absent.
    pub rho_mm: Option<f32>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { patch_size: 16, step: 16, rho_mm: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub conv_channels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub feature_dim: usize,
    pub momentum: f32,
    pub normalize_embeddings: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let desk = ModelConfig::desk_scale();
        ModelSection {
            conv_channels: desk.conv_channels,
            conv_strides: desk.conv_strides,
            feature_dim: desk.feature_dim,
            momentum: desk.momentum,
            normalize_embeddings: desk.normalize_embeddings,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub elastic_grid: usize,
    pub elastic_sigma: f32,
    pub noise_sigma: f32,
    pub gamma_lo: f32,
    pub gamma_hi: f32,
    pub apply_prob: f32,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentConfig::default();
        AugmentSection {
            elastic_grid: d.elastic_grid,
            elastic_sigma: d.elastic_sigma,
            noise_sigma: d.noise_sigma,
            gamma_lo: d.gamma_range.0,
            gamma_hi: d.gamma_range.1,
            apply_prob: d.apply_prob,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub t_max: Option<u64>,
    pub t_l: u64,
    pub t_g: u64,
    pub b_l: usize,
    pub b_g: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub epochs: u64,
    pub tau: f32,
    pub patch_queue: usize,
    pub graph_queue: usize,
    pub ordered_regions: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            t_max: d.t_max,
            t_l: d.t_l,
            t_g: d.t_g,
            b_l: d.b_l,
            b_g: d.b_g,
            lr: d.lr,
            beta1: d.beta1,
            beta2: d.beta2,
            weight_decay: d.weight_decay,
            epochs: d.epochs,
            tau: d.tau,
            patch_queue: d.patch_queue_capacity,
            graph_queue: d.graph_queue_capacity,
            ordered_regions: d.ordered_regions,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub lambda: f64,
    pub k: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection { lambda: anatgraph_core::probe::DEFAULT_LAMBDA, k: 5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassSection {
    pub frequency: f32,
    pub amplitude: f32,
}

impl Default for ClassSection {
    fn default() -> Self {
        ClassSection { frequency: 0.12, amplitude: 0.05 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub subjects: usize,
    pub atlas_dim: usize,
    pub spacing: f32,
    pub classes: Vec<ClassSection>,
    pub lesion_min_mm: [f32; 3],
    pub lesion_max_mm: [f32; 3],
    pub deformation_grid: usize,
    pub deformation_sigma: f32,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            subjects: d.subjects,
            atlas_dim: d.atlas_dim,
            spacing: d.spacing,
            classes: d
                .classes
                .iter()
                .map(|c| ClassSection { frequency: c.frequency, amplitude: c.amplitude })
                .collect(),
            lesion_min_mm: d.lesion_min_mm,
            lesion_max_mm: d.lesion_max_mm,
            deformation_grid: d.deformation_grid,
            deformation_sigma: d.deformation_sigma,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON serialization, hex-encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Raw hash bytes, for embedding in checkpoints as a named tensor.
    pub fn hash_bytes(&self) -> [u8; 32] {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            patch_size: self.grid.patch_size,
            conv_channels: self.model.conv_channels.clone(),
            conv_strides: self.model.conv_strides.clone(),
            feature_dim: self.model.feature_dim,
            momentum: self.model.momentum,
            normalize_embeddings: self.model.normalize_embeddings,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            elastic_grid: self.augment.elastic_grid,
            elastic_sigma: self.augment.elastic_sigma,
            noise_sigma: self.augment.noise_sigma,
            gamma_range: (self.augment.gamma_lo, self.augment.gamma_hi),
            apply_prob: self.augment.apply_prob,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            t_max: self.train.t_max,
            t_l: self.train.t_l,
            t_g: self.train.t_g,
            b_l: self.train.b_l,
            b_g: self.train.b_g,
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            weight_decay: self.train.weight_decay,
            epochs: self.train.epochs,
            tau: self.train.tau,
            patch_queue_capacity: self.train.patch_queue,
            graph_queue_capacity: self.train.graph_queue,
            ordered_regions: self.train.ordered_regions,
            augment: self.augment_config(),
            seed: self.seed,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            atlas_dim: self.synth.atlas_dim,
            spacing: self.synth.spacing,
            subjects: self.synth.subjects,
            classes: self
                .synth
                .classes
                .iter()
                .map(|c| ClassTexture { frequency: c.frequency, amplitude: c.amplitude })
                .collect(),
            lesion_min_mm: self.synth.lesion_min_mm,
            lesion_max_mm: self.synth.lesion_max_mm,
            deformation_grid: self.synth.deformation_grid,
            deformation_sigma: self.synth.deformation_sigma,
            patch_size: self.grid.patch_size,
            step: self.grid.step,
            seed: self.seed,
        }
    }

    pub fn rho_mm(&self, spacing: f32) -> f32 {
        self.grid.rho_mm.unwrap_or_else(|| default_rho_mm(self.grid.step, spacing))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_hash_stably() {
        let a = RunConfig::default();
        let b = RunConfig::from_json("{}").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json("{\"grids\": {}}").is_err());
        assert!(RunConfig::from_json("{\"train\": {\"momentum\": 0.9}}").is_err());
    }

    #[test]
    fn any_field_change_changes_the_hash() {
        let base = RunConfig::default().hash();
        let mut cfg = RunConfig::default();
        cfg.seed = 1;
        assert_ne!(cfg.hash(), base);
        let mut cfg = RunConfig::default();
        cfg.synth.subjects = 7;
        assert_ne!(cfg.hash(), base);
        let mut cfg = RunConfig::default();
        cfg.train.lr = 0.01;
        assert_ne!(cfg.hash(), base);
    }

    #[test]
    fn sections_convert_to_core_configs() {
        let cfg = RunConfig::default();
        cfg.model_config().validate().unwrap();
        cfg.train_config().validate().unwrap();
        cfg.synth_config().validate().unwrap();
        assert!((cfg.rho_mm(1.0) - 17.6).abs() < 1e-5);
    }
}
