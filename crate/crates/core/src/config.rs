//! Versioned JSON run configuration and the ablation switch mapping.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::patch_layout;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::PropagationConfig;
use crate::model::{BackboneConfig, ModelConfig};
use crate::synth::SynthTaskConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Generate clips in memory from this config.
    Synthetic(SynthTaskConfig),
    /// Load a dataset directory written by `gen-data`.
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub propagation: PropagationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_batch() -> usize {
    8
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

/// Switches can only remove stages that the model section enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Transformer encoder and positional encoding.
    pub use_te: bool,
    /// Intra-frame fully connected edges.
    pub use_if_fc: bool,
    /// Time-aligned temporal edges.
    pub use_tat: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        AblationRow::Full.switches()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationRow {
    B,
    BTe,
    BTeIfFc,
    BTeTat,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        AblationRow::B,
        AblationRow::BTe,
        AblationRow::BTeIfFc,
        AblationRow::BTeTat,
        AblationRow::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::B => "B",
            AblationRow::BTe => "B+TE",
            AblationRow::BTeIfFc => "B+TE+IF-FC",
            AblationRow::BTeTat => "B+TE+TAT",
            AblationRow::Full => "FULL",
        }
    }

    /// Directory-safe form of the label.
    pub fn slug(self) -> &'static str {
        match self {
            AblationRow::B => "b",
            AblationRow::BTe => "b-te",
            AblationRow::BTeIfFc => "b-te-if-fc",
            AblationRow::BTeTat => "b-te-tat",
            AblationRow::Full => "full",
        }
    }

    pub fn switches(self) -> Ablation {
        let (use_te, use_if_fc, use_tat) = match self {
            AblationRow::B => (false, false, false),
            AblationRow::BTe => (true, false, false),
            AblationRow::BTeIfFc => (true, true, false),
            AblationRow::BTeTat => (true, false, true),
            AblationRow::Full => (true, true, true),
        };
        Ablation {
            use_te,
            use_if_fc,
            use_tat,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub run_id: String,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub data: DataConfig,
    pub model: ModelSection,
    pub optim: OptimConfig,
    #[serde(default)]
    pub ablation: Ablation,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// The acceptance recipe on the 4-class rotation task.
    pub fn acceptance(seed: u64) -> Self {
        Self {
            version: CONFIG_VERSION,
            run_id: format!("acceptance-s{seed}"),
            seed,
            precision: Precision::F32,
            data: DataConfig::Synthetic(SynthTaskConfig::acceptance(seed)),
            model: ModelSection {
                dim: 64,
                backbone: BackboneConfig { patch: [4, 4], depth: 0 },
                encoder: EncoderConfig {
                    layers: 2,
                    heads: 4,
                    ffn_dim: 128,
                    ..EncoderConfig::default()
                },
                propagation: PropagationConfig::default(),
            },
            optim: OptimConfig {
                lr_max: 2e-3,
                lr_min: 1e-5,
                epochs: 8,
                batch_size: default_batch(),
                beta1: default_beta1(),
                beta2: default_beta2(),
                eps: default_adam_eps(),
            },
            ablation: Ablation::default(),
            output_dir: PathBuf::from("runs"),
        }
    }

    /// Two frames of 2x2 single-pixel patches, C = 8: small enough for
    /// finite differences over every weight.
    pub fn tiny(seed: u64) -> Self {
        let mut data = SynthTaskConfig::acceptance(seed);
        data.num_classes = 3;
        data.rotation_extents = vec![0.25, 0.5, 1.0];
        data.t_frames = 2;
        data.resolution = [2, 2];
        data.segment.length_px = 1.0;
        data.segment.width_px = 1.0;
        data.jitter.position_px = 0.2;
        data.samples_per_class.train = 4;
        data.samples_per_class.val = 2;
        data.samples_per_class.test = 2;
        Self {
            run_id: format!("tiny-s{seed}"),
            precision: Precision::F64,
            data: DataConfig::Synthetic(data),
            model: ModelSection {
                dim: 8,
                backbone: BackboneConfig { patch: [1, 1], depth: 0 },
                encoder: EncoderConfig {
                    layers: 1,
                    heads: 2,
                    ffn_dim: 16,
                    ..EncoderConfig::default()
                },
                propagation: PropagationConfig::default(),
            },
            optim: OptimConfig {
                epochs: 2,
                lr_max: 1e-2,
                ..Self::acceptance(seed).optim
            },
            ..Self::acceptance(seed)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\', ',', '\n']) {
            return Err(Error::Config(format!("run_id {:?} must be a plain name", self.run_id)));
        }
        let o = &self.optim;
        if o.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(o.lr_max >= 0.0 && o.lr_min >= 0.0 && o.lr_min <= o.lr_max) {
            return Err(Error::Config(format!("need 0 <= lr_min <= lr_max, got {} and {}", o.lr_min, o.lr_max)));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        let m = &self.model;
        m.encoder.validate(m.dim)?;
        m.propagation.validate()?;
        if let DataConfig::Synthetic(s) = &self.data {
            s.validate()?;
            self.resolve_model(s.num_classes, s.clip_shape())?;
        }
        Ok(())
    }

    /// Model config for clips of `clip_shape` with the ablation switches applied.
    pub fn resolve_model(&self, num_classes: usize, clip_shape: [usize; 4]) -> Result<ModelConfig> {
        patch_layout(&clip_shape, self.model.backbone.patch).map_err(|e| Error::Config(e.to_string()))?;
        let mut encoder = self.model.encoder.clone();
        if !self.ablation.use_te {
            encoder.layers = 0;
            encoder.positional_encoding = false;
        }
        let mut propagation = self.model.propagation;
        propagation.use_intra &= self.ablation.use_if_fc;
        propagation.use_temp &= self.ablation.use_tat;
        let cfg = ModelConfig {
            clip_shape,
            num_classes,
            dim: self.model.dim,
            backbone: self.model.backbone.clone(),
            encoder,
            propagation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_row(&self, row: AblationRow) -> Self {
        Self {
            run_id: format!("{}-{}", self.run_id, row.slug()),
            ablation: row.switches(),
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.seed = seed;
        out
    }
}
