#![allow(dead_code)]

use anprompt::config::RunConfig;
use anprompt::encoder::{EncoderConfig, InjectionSpec};
use anprompt::train::RunContext;

/// A configuration small enough to train in well under a second.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.encoder = EncoderConfig {
        embed_dim: 16,
        num_layers: 4,
        num_heads: 2,
        patch_grid: [2, 2],
        image_size: [8, 8],
        vocab_size: 256,
        max_text_len: 32,
        temperature: 0.01,
        mlp_ratio: 2,
        init_seed: 0,
    };
    c.injection = InjectionSpec::new(2, 4, 2);
    c.prompts.tokens = 2;
    c.optim.epochs = 2;
    c.seeds = vec![0, 1];
    c.dataset.synthetic.num_classes = 4;
    c.dataset.synthetic.train_per_class = 4;
    c.dataset.synthetic.test_per_class = 4;
    c.dataset.split.shots_per_class = 4;
    c
}

pub fn tiny_context() -> RunContext {
    RunContext::new(tiny_config()).unwrap()
}
