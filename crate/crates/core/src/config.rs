//! Run and model configuration, read from JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Video];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Audio => "a",
            Modality::Video => "v",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySet {
    pub text: bool,
    pub audio: bool,
    pub video: bool,
}

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet {
        text: true,
        audio: true,
        video: true,
    };

    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Video => self.video,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.text || self.audio || self.video)
    }

    /// Short label such as `T & A`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.text, "T"), (self.audio, "A"), (self.video, "V")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, s)| *s)
            .collect();
        parts.join(" & ")
    }
}

impl Default for ModalitySet {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Cross-attention of modality features against their explanation.
    #[default]
    #[serde(alias = "ca")]
    CrossAttention,
    /// A single linear projection of the modality features.
    Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalVariant {
    /// Gated convolutional residual block on both sides, then concatenation.
    #[default]
    Full,
    Concat,
    Tca,
    Mamba,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    #[default]
    Smoe,
    Transformer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateActivation {
    #[default]
    Sigmoid,
    Silu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub layers: usize,
    /// Expert hidden width; `None` means `4 * d`.
    pub hidden: Option<usize>,
    /// Weight of the optional load-balancing term; 0 disables it.
    pub balance_coef: f64,
}

impl Default for SmoeConfig {
    fn default() -> Self {
        Self {
            num_experts: 4,
            top_k: 2,
            layers: 3,
            hidden: None,
            balance_coef: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Model width of every aligned modality; fused sequences are `2d` wide.
    pub d: usize,
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    /// Hidden width of the classifier MLP; `None` means `4 * d`.
    pub head_hidden: Option<usize>,
    pub conv_width: usize,
    pub norm_eps: f64,
    /// Divide attention scores by `sqrt(d)`.
    pub attention_scale: bool,
    pub align: AlignMode,
    pub temporal: TemporalVariant,
    pub fusion: FusionVariant,
    pub smoe: SmoeConfig,
    pub gating: bool,
    pub gate_activation: GateActivation,
    pub modalities: ModalitySet,
    pub explanations: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 8,
            d_t: 8,
            d_a: 8,
            d_v: 8,
            head_hidden: None,
            conv_width: 3,
            norm_eps: 1e-5,
            attention_scale: false,
            align: AlignMode::CrossAttention,
            temporal: TemporalVariant::Full,
            fusion: FusionVariant::Smoe,
            smoe: SmoeConfig::default(),
            gating: true,
            gate_activation: GateActivation::Sigmoid,
            modalities: ModalitySet::ALL,
            explanations: true,
        }
    }
}

impl ModelConfig {
    pub fn expert_hidden(&self) -> usize {
        self.smoe.hidden.unwrap_or(4 * self.d)
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden.unwrap_or(4 * self.d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_t == 0 || self.d_a == 0 || self.d_v == 0 {
            return Err(Error::Config("all feature and model widths must be positive".into()));
        }
        if self.conv_width.is_multiple_of(2) {
            return Err(Error::Config(format!("conv_width must be odd, got {}", self.conv_width)));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        let s = &self.smoe;
        if s.top_k == 0 || s.top_k > s.num_experts {
            return Err(Error::Config(format!(
                "top_k = {} must lie in 1..={}",
                s.top_k, s.num_experts
            )));
        }
        if s.layers == 0 {
            return Err(Error::Config("SMoE needs at least one layer".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("modality subset must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Stop once train MAE falls below this value.
    pub target_train_mae: Option<f64>,
    /// Restore the parameters of the epoch with the lowest validation MAE.
    pub keep_best_val: bool,
    pub manifest: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            epochs: 50,
            batch_size: 16,
            seed: 0,
            shuffle: true,
            target_train_mae: None,
            keep_best_val: false,
            manifest: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(Error::at_path(path))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        if let (Some(m), Some(dir)) = (&cfg.manifest, path.parent()) {
            if m.is_relative() {
                cfg.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.optimizer.lr < 0.0 {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if let Some(m) = &self.manifest {
            if !m.is_file() {
                return Err(Error::Config(format!("manifest {} does not exist", m.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.model.smoe.layers, 3);
        assert_eq!(cfg.model.expert_hidden(), 32);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"model": {"temporal": "mamba", "align": "ca"}, "seed": 3}"#).unwrap();
        assert_eq!(cfg.model.temporal, TemporalVariant::Mamba);
        assert_eq!(cfg.model.align, AlignMode::CrossAttention);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.optimizer.lr, 1e-3);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.smoe.top_k = 5;
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            modalities: ModalitySet {
                text: false,
                audio: false,
                video: false,
            },
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            conv_width: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_manifest_path_fails_validation() {
        let cfg = RunConfig {
            manifest: Some("/definitely/not/here.json".into()),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
