//! Run configuration, read from TOML. Section and key names mirror the
//! configuration structs; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::encoder::{EncoderConfig, InjectionSpec};
use crate::error::{Error, Result};
use crate::losses::{GammaMode, LossWeights};
use crate::metrics::SplitSpec;
use crate::noise::{PerturbationKind, WeakNoiseConfig};
use crate::optim::Schedule;
use crate::prompting::PROMPT_INIT_SCALE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Learnable prompt tokens `K`; must equal `injection.prompt_count`.
    pub tokens: usize,
    /// Noise prompt strength `ε`.
    pub epsilon: f64,
    pub init_scale: f64,
    /// Words placed before the class name in every class prompt.
    pub context: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            tokens: 5,
            epsilon: 0.001,
            init_scale: PROMPT_INIT_SCALE,
            context: "a photo of a".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 10,
            batch_size: 4,
            optimizer: OptimizerKind::Adam,
            schedule: Schedule::Constant,
        }
    }
}

/// On/off switches for the three method components.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    /// Fuse a noise caption into the frozen text feature (`α > 0`).
    pub text_noise: bool,
    /// Weight the alignment loss by `γ`; off means `γ = 0`.
    pub wa_loss: bool,
    /// Add clustered noise prompts to the learnable tokens (`ε > 0`).
    pub anti_prompt: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            text_noise: true,
            wa_loss: true,
            anti_prompt: true,
        }
    }
}

/// Source of the per-class noisy text features during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingNoise {
    pub kind: PerturbationKind,
    /// Token fraction affected by the token-level kinds.
    pub rate: f64,
}

impl Default for TrainingNoise {
    fn default() -> Self {
        Self {
            kind: PerturbationKind::WeakFusion,
            rate: 0.25,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Folder-per-class dataset; the synthetic task is generated when absent.
    pub path: Option<PathBuf>,
    pub synthetic_seed: u64,
    pub synthetic: SyntheticSpec,
    pub split: SplitSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseBenchConfig {
    pub perturbations: Vec<PerturbationKind>,
    /// Fusion coefficient of the weak perturbation.
    pub alpha: f64,
    /// Token fraction for the token-level perturbations.
    pub rate: f64,
    pub seed: u64,
}

impl Default for NoiseBenchConfig {
    fn default() -> Self {
        Self {
            perturbations: vec![
                PerturbationKind::WeakFusion,
                PerturbationKind::Drop,
                PerturbationKind::Mask,
                PerturbationKind::Shuffle,
                PerturbationKind::SynonymReplace,
            ],
            alpha: 0.01,
            rate: 0.25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub injection: InjectionSpec,
    pub weak_noise: WeakNoiseConfig,
    pub prompts: PromptConfig,
    pub losses: LossWeights,
    pub optim: OptimConfig,
    pub components: Components,
    pub training_noise: TrainingNoise,
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub noise_bench: NoiseBenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            injection: InjectionSpec::default(),
            weak_noise: WeakNoiseConfig::default(),
            prompts: PromptConfig::default(),
            losses: LossWeights::default(),
            optim: OptimConfig::default(),
            components: Components::default(),
            training_noise: TrainingNoise::default(),
            seeds: vec![0, 1, 2],
            dataset: DatasetConfig::default(),
            noise_bench: NoiseBenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Parse {
            location: "config".into(),
            reason: e.to_string(),
        })?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::Config {
                field: if field == "." { "config".into() } else { field },
                reason: e.into_inner().message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    /// Sets the prompt token count in both places it appears.
    pub fn set_prompt_count(&mut self, k: usize) {
        self.prompts.tokens = k;
        self.injection.prompt_count = k;
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.injection.validate(self.encoder.num_layers)?;
        self.weak_noise.validate()?;
        self.losses.validate()?;
        if self.prompts.tokens != self.injection.prompt_count {
            return Err(Error::config(
                "prompts.tokens",
                format!(
                    "must equal injection.prompt_count ({})",
                    self.injection.prompt_count
                ),
            ));
        }
        if !(self.prompts.epsilon >= 0.0 && self.prompts.epsilon.is_finite()) {
            return Err(Error::config("prompts.epsilon", "must be a nonnegative number"));
        }
        if !(self.prompts.init_scale >= 0.0 && self.prompts.init_scale.is_finite()) {
            return Err(Error::config("prompts.init_scale", "must be a nonnegative number"));
        }
        if self.prompts.context.trim().is_empty() {
            return Err(Error::config("prompts.context", "must contain at least one word"));
        }
        if !(self.optim.learning_rate > 0.0 && self.optim.learning_rate.is_finite()) {
            return Err(Error::config("optim.learning_rate", "must be positive"));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if !(0.0..=1.0).contains(&self.training_noise.rate) {
            return Err(Error::config("training_noise.rate", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.noise_bench.rate) {
            return Err(Error::config("noise_bench.rate", "must lie in [0, 1]"));
        }
        if !(self.noise_bench.alpha >= 0.0 && self.noise_bench.alpha.is_finite()) {
            return Err(Error::config("noise_bench.alpha", "must be a nonnegative number"));
        }
        if self.dataset.split.shots_per_class == 0 {
            return Err(Error::config("dataset.split.shots_per_class", "must be positive"));
        }
        if self.dataset.path.is_none() {
            self.dataset.synthetic.validate()?;
        }
        Ok(())
    }

    /// Fusion coefficient after the component switch.
    pub fn effective_alpha(&self) -> f64 {
        if self.components.text_noise {
            self.weak_noise.alpha
        } else {
            0.0
        }
    }

    /// Noise prompt strength after the component switch.
    pub fn effective_epsilon(&self) -> f64 {
        if self.components.anti_prompt {
            self.prompts.epsilon
        } else {
            0.0
        }
    }

    /// Loss weights after the component switch.
    pub fn effective_losses(&self) -> LossWeights {
        let mut w = self.losses.clone();
        if !self.components.wa_loss {
            w.gamma_mode = GammaMode::Fixed;
            w.gamma_fixed = 0.0;
        }
        w
    }

    pub fn effective_weak_noise(&self) -> WeakNoiseConfig {
        WeakNoiseConfig {
            alpha: self.effective_alpha(),
            ..self.weak_noise.clone()
        }
    }
}
