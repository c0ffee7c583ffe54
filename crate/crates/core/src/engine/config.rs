use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::SrfbConfig;
use crate::distill::TeacherSource;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::{Ablation, AblationFlags, BackboneSpec, ModelConfig, LEVELS};

/// Values of γ swept in the loss-balance experiment.
pub const GAMMA_SWEEP: [f64; 5] = [0.01, 0.05, 0.1, 1.0, 5.0];

/// Training run configuration; every field has a default so a config file
/// only needs the values it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Square training resolution.
    pub input_size: usize,
    pub max_iterations: u64,
    pub seed: u64,
    pub weight_decay: f64,
    /// Random horizontal flips.
    pub augment: bool,
    pub loss: LossWeights,
    pub flags: AblationFlags,
    pub backbone: BackboneSpec,
    pub decoder_channels: [usize; LEVELS],
    pub srfb: SrfbConfig,
    /// Depth source for samples that carry no depth of their own.
    pub teacher: TeacherSource,
    /// Named-array archive with `encoder.*` weights.
    pub pretrained: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint period in iterations; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// JSON-lines training log.
    pub log: Option<PathBuf>,
    /// Console progress period in iterations; 0 disables.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::standard();
        Self {
            lr: 0.005,
            momentum: 0.9,
            batch_size: 6,
            input_size: 320,
            max_iterations: 10_000,
            seed: 0,
            weight_decay: 5e-4,
            augment: true,
            loss: LossWeights::default(),
            flags: model.flags,
            backbone: model.backbone,
            decoder_channels: model.decoder_channels,
            srfb: model.srfb,
            teacher: TeacherSource::default(),
            pretrained: None,
            checkpoint: None,
            checkpoint_every: 1000,
            log: None,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    /// Scratch backbone at a small resolution, for CPU-scale runs.
    pub fn tiny(input_size: usize) -> Self {
        let model = ModelConfig::tiny(input_size);
        Self {
            input_size,
            backbone: model.backbone,
            decoder_channels: model.decoder_channels,
            srfb: model.srfb,
            ..Self::default()
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.flags = ablation.flags();
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            decoder_channels: self.decoder_channels,
            srfb: self.srfb.clone(),
            input_size: (self.input_size, self.input_size),
            flags: self.flags,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a non-negative number, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("momentum", self.momentum)?;
        positive("weight_decay", self.weight_decay)?;
        positive("loss.gamma", self.loss.gamma)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.model_config().validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// The five ablation columns built from `base` by flags alone.
pub fn ablation_manifest(base: &TrainConfig) -> Vec<(Ablation, TrainConfig)> {
    Ablation::ALL
        .iter()
        .map(|&a| (a, base.clone().with_ablation(a)))
        .collect()
}

/// `base` with each γ of [`GAMMA_SWEEP`].
pub fn gamma_manifest(base: &TrainConfig) -> Vec<(f64, TrainConfig)> {
    GAMMA_SWEEP
        .iter()
        .map(|&g| {
            let mut c = base.clone();
            c.loss.gamma = g;
            (g, c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_setup() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.momentum, c.batch_size, c.input_size), (0.005, 0.9, 6, 320));
        assert_eq!(c.weight_decay, 5e-4);
        assert_eq!(c.loss, LossWeights::default());
        assert_eq!(c.backbone, BackboneSpec::resnext101());
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig::tiny(64);
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("lr = 0.01\nseed = 7\n").unwrap();
        assert_eq!((partial.lr, partial.seed, partial.batch_size), (0.01, 7, 6));
        assert!(TrainConfig::from_toml("learning_rate = 0.01\n").is_err());
        assert!(TrainConfig::from_toml("input_size = 100\n").is_err());
    }

    #[test]
    fn manifests() {
        let base = TrainConfig::tiny(32);
        let g: Vec<f64> = gamma_manifest(&base)
            .iter()
            .map(|(g, c)| {
                assert_eq!(c.loss.gamma, *g);
                *g
            })
            .collect();
        assert_eq!(g, GAMMA_SWEEP);
        let a = ablation_manifest(&base);
        assert_eq!(a.len(), 5);
        assert!(!a[0].1.flags.use_depth_head);
        assert_eq!(a[4].1.flags, AblationFlags::default());
    }
}
