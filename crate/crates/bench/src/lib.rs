//! Shared fixtures for the kernel benchmarks.

use anprompt::config::RunConfig;
use anprompt::encoder::{DualEncoder, EncoderConfig, InjectionSpec};
use anprompt::params::gaussian;
use anprompt::prompting::{build_anti_noise_prompts, project_prompts, AntiNoisePrompts, LearnablePrompts, ProjectionHeads};
use anprompt::{seed, Matrix};

pub fn random_matrix(rows: usize, cols: usize, seed_value: u64) -> Matrix {
    gaussian(rows, cols, 1.0, &mut seed::rng(&[seed_value]))
}

/// The default encoder with its default injection range.
pub fn default_encoder() -> (DualEncoder, InjectionSpec) {
    let cfg = RunConfig::default();
    (DualEncoder::new(cfg.encoder).expect("default encoder"), cfg.injection)
}

/// Projected prompts with a nonzero noise offset.
pub fn prompts(spec: &InjectionSpec, width: usize) -> AntiNoisePrompts {
    let mut rng = seed::rng(&[11]);
    let lp = LearnablePrompts::init(spec.prompt_count, width, 0.02, &mut rng);
    let noise = gaussian(spec.prompt_count, width, 1.0, &mut rng);
    let pa = build_anti_noise_prompts(&lp, &noise, 0.001).expect("matching shapes");
    project_prompts(&pa, &ProjectionHeads::identity(width)).expect("identity heads")
}

/// A random image in `[0, 1]` of the encoder's input size.
pub fn image(cfg: &EncoderConfig, seed_value: u64) -> Matrix {
    let [h, w] = cfg.image_size;
    random_matrix(h, w, seed_value).map(|x| 1.0 / (1.0 + (-x).exp()))
}
