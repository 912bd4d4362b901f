//! Experiment configuration: a TOML file with one section per concern,
//! every key mirrored by a CLI flag. Flag values override file values; the
//! merged result is what lands in the run manifest.

use gazeshift_core::data::PairMode;
use gazeshift_core::model::ModelConfig;
use gazeshift_core::objectives::LossKind;
use gazeshift_core::syntheye::SamplerConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown model variant {0} (expected synth, vr, or remote)")]
    UnknownVariant(String),
    #[error("unknown value {value} for {key}")]
    UnknownValue { key: &'static str, value: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub subjects: usize,
    pub frames: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub both_eyes: bool,
    pub off_axis_warp: bool,
    pub fixation_frames: (usize, usize),
    pub pursuit_frames: (usize, usize),
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        SynthSection {
            subjects: 4,
            frames: 400,
            seed: 0,
            height: s.image_height,
            width: s.image_width,
            noise_sigma: s.noise_sigma,
            both_eyes: s.both_eyes,
            off_axis_warp: s.off_axis_warp,
            fixation_frames: s.fixation_frames,
            pursuit_frames: s.pursuit_frames,
        }
    }
}

impl SynthSection {
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            image_height: self.height,
            image_width: self.width,
            fixation_frames: self.fixation_frames,
            pursuit_frames: self.pursuit_frames,
            both_eyes: self.both_eyes,
            brightness_jitter: SamplerConfig::default().brightness_jitter,
            noise_sigma: self.noise_sigma,
            off_axis_warp: self.off_axis_warp,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// synth | vr | remote
    pub variant: String,
    pub c_g: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: "synth".into(),
            c_g: None,
        }
    }
}

impl ModelSection {
    /// Build the model config; the synth variant adapts to the dataset's
    /// image size.
    pub fn model_config(&self, data_hw: (usize, usize)) -> Result<ModelConfig, ConfigError> {
        let mut cfg = match self.variant.as_str() {
            "synth" => ModelConfig::synth(data_hw.0, data_hw.1),
            "vr" => ModelConfig::vr(),
            "remote" => ModelConfig::remote(),
            other => return Err(ConfigError::UnknownVariant(other.to_string())),
        };
        if let Some(c_g) = self.c_g {
            cfg.c_g = c_g;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub pairs_per_epoch: usize,
    /// mse | gaze_focused
    pub loss: String,
    pub gamma: f64,
    pub weight_stop_gradient: bool,
    /// near_eye | remote_temporal | remote_headpose | remote_flip
    pub pair_mode: String,
    pub window: i64,
    /// Ablation row 1-4 (4 = full method).
    pub row: usize,
    pub grad_clip: Option<f64>,
    /// gazeshift | vae | siamese
    pub model_kind: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 20,
            batch_size: 30,
            lr: 1e-4,
            weight_decay: 0.05,
            seed: 0,
            pairs_per_epoch: 3000,
            loss: "gaze_focused".into(),
            gamma: 1.0,
            weight_stop_gradient: true,
            pair_mode: "near_eye".into(),
            window: 30,
            row: 4,
            grad_clip: None,
            model_kind: "gazeshift".into(),
        }
    }
}

impl TrainSection {
    pub fn pair_mode(&self) -> Result<PairMode, ConfigError> {
        Ok(match self.pair_mode.as_str() {
            "near_eye" => PairMode::NearEye,
            "remote_temporal" => PairMode::RemoteTemporal,
            "remote_headpose" => PairMode::RemoteHeadpose,
            "remote_flip" => PairMode::RemoteFlip,
            other => {
                return Err(ConfigError::UnknownValue {
                    key: "pair_mode",
                    value: other.to_string(),
                })
            }
        })
    }

    pub fn train_config(&self) -> Result<crate::trainer::TrainConfig, ConfigError> {
        let mut flags = gazeshift_core::model::AblationFlags::row(self.row.clamp(1, 4));
        let loss_kind = match self.loss.as_str() {
            "mse" => LossKind::Mse,
            "gaze_focused" => LossKind::GazeFocused,
            other => {
                return Err(ConfigError::UnknownValue {
                    key: "loss",
                    value: other.to_string(),
                })
            }
        };
        if loss_kind == LossKind::Mse {
            flags.gaze_focused_loss = false;
        }
        Ok(crate::trainer::TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            loss: gazeshift_core::objectives::LossConfig {
                kind: loss_kind,
                gamma: self.gamma,
                weight_stop_gradient: self.weight_stop_gradient,
                upsample: gazeshift_core::tensor::ResizeMode::Bilinear,
            },
            pair_mode: self.pair_mode()?,
            window: self.window,
            pairs_per_epoch: self.pairs_per_epoch,
            flags,
            deterministic: true,
            grad_clip: self.grad_clip,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateSection {
    /// per_person | person_agnostic
    pub protocol: String,
    pub k: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub lambda: f64,
    /// ridge | mlp
    pub regressor: String,
    pub binocular: bool,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        CalibrateSection {
            protocol: "per_person".into(),
            k: vec![17, 30, 40, 50, 60],
            repeats: 10,
            seed: 0,
            lambda: 1e-3,
            regressor: "ridge".into(),
            binocular: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    pub k: usize,
    pub repeats: usize,
    pub lambda: f64,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            seeds: vec![0, 1, 2],
            k: 17,
            repeats: 5,
            lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GammaSection {
    pub values: Vec<f64>,
    pub k: usize,
    pub repeats: usize,
    pub lambda: f64,
}

impl Default for GammaSection {
    fn default() -> Self {
        GammaSection {
            values: vec![0.5, 1.0, 2.0, 4.0],
            k: 17,
            repeats: 5,
            lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeSection {
    pub frames: usize,
    pub n_appearance: usize,
    pub n_gaze: usize,
    pub interp_steps: usize,
    pub seed: u64,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection {
            frames: 8,
            n_appearance: 100,
            n_gaze: 80,
            interp_steps: 7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpConfig {
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub calibrate: CalibrateSection,
    pub ablate: AblateSection,
    pub gamma: GammaSection,
    pub analyze: AnalyzeSection,
}

impl ExpConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_toml() {
        let cfg: ExpConfig = toml::from_str(
            r#"
            [train]
            epochs = 3
            loss = "mse"
            [synth]
            subjects = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 30, "untouched keys keep defaults");
        assert_eq!(cfg.synth.subjects, 2);
        let tc = cfg.train.train_config().unwrap();
        assert!(!tc.flags.gaze_focused_loss, "mse loss clears the flag");
    }

    #[test]
    fn bad_values_are_named() {
        let cfg: ExpConfig = toml::from_str("[train]\npair_mode = \"sideways\"\n").unwrap();
        let err = cfg.train.pair_mode().unwrap_err();
        assert!(err.to_string().contains("sideways"));
    }
}
