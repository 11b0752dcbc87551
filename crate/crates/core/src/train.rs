//! Run setup and the training loop.
//!
//! Each epoch rebuilds the weak-noise feature bank for the training
//! classes, clusters it into noise prompts and pairs them with the
//! learnable tokens. Each batch then encodes both modalities with the
//! resulting prompts, evaluates the objective and takes one optimizer
//! step on the prompt state. The frozen backbone is shared read-only.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_synthetic, DatasetBundle, Sample};
use crate::encoder::{ClassPrompt, DualEncoder};
use crate::error::{Error, Result};
use crate::metrics::SplitSpec;
use crate::model::AnPromptModel;
use crate::noise::{build_weak_feature_bank, CaptionCache, NoiseSource, Perturbation, SynonymTable};
use crate::optim::Adam;
use crate::params::ParamRole;
use crate::prompting::{kmeans_cluster, KMeansParams};
use crate::seed;
use crate::tensor::Matrix;
use crate::text::Vocab;

/// Everything a run needs besides the seed: the dataset, its vocabulary
/// and captions, and the frozen encoder.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub config: RunConfig,
    pub dataset: Arc<DatasetBundle>,
    pub vocab: Arc<Vocab>,
    pub captions: Arc<CaptionCache>,
    pub synonyms: Arc<SynonymTable>,
    pub encoder: Arc<DualEncoder>,
    /// Split with defaults filled in.
    pub split: SplitSpec,
    /// Class prompt of every class, by label.
    pub class_prompts: Vec<ClassPrompt>,
}

impl RunContext {
    /// Loads the configured dataset (or generates the synthetic one).
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dataset = match &config.dataset.path {
            Some(p) => DatasetBundle::load(p)?,
            None => generate_synthetic(
                &config.dataset.synthetic,
                config.encoder.image_size,
                config.dataset.synthetic_seed,
            )?,
        };
        Self::with_dataset(config, Arc::new(dataset))
    }

    pub fn with_dataset(config: RunConfig, dataset: Arc<DatasetBundle>) -> Result<Self> {
        let encoder = Arc::new(DualEncoder::new(config.encoder.clone())?);
        Self::assemble(config, dataset, encoder)
    }

    /// A context for a modified configuration that reuses this dataset and,
    /// when the encoder settings are unchanged, this encoder and its caches.
    pub fn derive(&self, config: RunConfig) -> Result<Self> {
        if config.dataset != self.config.dataset {
            return Err(Error::Input(
                "a derived run must use the same dataset settings".into(),
            ));
        }
        let encoder = if config.encoder == self.config.encoder {
            self.encoder.clone()
        } else {
            Arc::new(DualEncoder::new(config.encoder.clone())?)
        };
        Self::assemble(config, self.dataset.clone(), encoder)
    }

    fn assemble(config: RunConfig, dataset: Arc<DatasetBundle>, encoder: Arc<DualEncoder>) -> Result<Self> {
        config.validate()?;
        let vocab = dataset.vocab(&[config.prompts.context.as_str()], config.encoder.vocab_size)?;
        let captions = CaptionCache::new(&dataset.class_names, &dataset.captions, &vocab)?;
        let synonyms = SynonymTable::from_words(&dataset.synonyms, &vocab);
        let split = config.dataset.split.resolve(dataset.num_classes())?;
        let context = vocab.encode(&config.prompts.context);
        let class_prompts = dataset
            .class_names
            .iter()
            .map(|n| ClassPrompt {
                context: context.clone(),
                name: vocab.encode(n),
            })
            .collect();
        Ok(Self {
            config,
            dataset,
            vocab: Arc::new(vocab),
            captions: Arc::new(captions),
            synonyms: Arc::new(synonyms),
            encoder,
            split,
            class_prompts,
        })
    }

    pub fn prompts_for(&self, classes: &[usize]) -> Vec<ClassPrompt> {
        classes.iter().map(|&c| self.class_prompts[c].clone()).collect()
    }

    /// Noise source used for the training bank.
    pub fn training_noise_source(&self) -> Result<NoiseSource> {
        let tn = &self.config.training_noise;
        Ok(match tn.kind {
            crate::noise::PerturbationKind::WeakFusion => NoiseSource::WeakFusion,
            kind => {
                let p = Perturbation::new(kind, tn.rate).with_synonyms(self.synonyms.clone());
                p.validate()?;
                NoiseSource::Strong(p)
            }
        })
    }

    /// Untrained model for `seed`.
    pub fn fresh_model(&self, seed: u64) -> Result<AnPromptModel> {
        AnPromptModel::new(
            self.encoder.clone(),
            self.config.injection,
            self.config.effective_epsilon(),
            self.config.prompts.init_scale,
            seed,
        )
    }

    /// Few-shot training samples of the base classes.
    pub fn training_samples(&self) -> Vec<&Sample> {
        let base = &self.split.base_classes;
        self.dataset
            .few_shot(self.split.shots_per_class)
            .into_iter()
            .filter(|s| base.contains(&s.label))
            .collect()
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub ce: f64,
    pub sim: f64,
    pub wa: f64,
    pub gamma: f64,
    pub total: f64,
    pub lr: f64,
}

/// Diagnostic line written when the loss stops being finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub step: usize,
    pub epoch: usize,
    pub diverged: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    Step(StepRecord),
    Diverged(DivergenceRecord),
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub initial: AnPromptModel,
    pub model: AnPromptModel,
    pub records: Vec<StepRecord>,
}

/// Trains the prompt state for one seed. `on_event` sees every log line
/// as it is produced, including the divergence diagnostic.
pub fn train(
    ctx: &RunContext,
    seed_value: u64,
    mut on_event: impl FnMut(&TrainEvent) -> Result<()>,
) -> Result<TrainResult> {
    let cfg = &ctx.config;
    let weights = cfg.effective_losses();
    let wn = cfg.effective_weak_noise();
    let source = ctx.training_noise_source()?;
    let base = &ctx.split.base_classes;
    let classes = ctx.prompts_for(base);
    let samples = ctx.training_samples();
    if samples.is_empty() {
        return Err(Error::Input("no training samples for the base classes".into()));
    }
    let local_label = |label: usize| base.iter().position(|&b| b == label).expect("base sample");

    let initial = ctx.fresh_model(seed_value)?;
    let mut model = initial.clone();
    let mut adam = Adam::default();
    let bs = cfg.optim.batch_size;
    let steps_per_epoch = samples.len().div_ceil(bs);
    let total_steps = steps_per_epoch * cfg.optim.epochs;
    let mut records = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..cfg.optim.epochs {
        let bank_seed = seed::derive(&[seed_value, epoch as u64, 0xBA4C]);
        let bank = build_weak_feature_bank(&ctx.captions, &ctx.encoder, &wn, &source, base, bank_seed)?;
        let km = kmeans_cluster(
            &bank.rows,
            cfg.injection.prompt_count,
            seed::derive(&[seed_value, epoch as u64, 0xC1A5]),
            &KMeansParams::default(),
        )?;
        model.set_noise_prompts(&km.centers)?;

        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seed::rng(&[seed_value, epoch as u64, 0x0DE7]));
        for chunk in order.chunks(bs) {
            let images: Vec<&Matrix> = chunk.iter().map(|&i| &samples[i].image).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| local_label(samples[i].label)).collect();
            let lr = cfg.optim.schedule.lr(cfg.optim.learning_rate, step, total_steps);
            let out = model.step(&images, &labels, &classes, &bank.per_class, &weights);
            let out = match out {
                Ok(o) if o.report.total.is_finite() && o.grads.iter().all(|(_, g)| g.all_finite()) => o,
                other => {
                    let detail = match other {
                        Ok(o) => format!("non-finite loss or gradient (total = {})", o.report.total),
                        Err(e) => e.to_string(),
                    };
                    on_event(&TrainEvent::Diverged(DivergenceRecord {
                        step,
                        epoch,
                        diverged: true,
                        detail: detail.clone(),
                    }))?;
                    return Err(Error::Diverged { step, detail });
                }
            };
            adam.step(model.state_mut(), &out.grads, lr)?;
            let r = out.report;
            let rec = StepRecord {
                step,
                epoch,
                ce: r.ce,
                sim: r.sim,
                wa: r.wa,
                gamma: r.gamma,
                total: r.total,
                lr,
            };
            on_event(&TrainEvent::Step(rec))?;
            records.push(rec);
            step += 1;
        }
    }
    Ok(TrainResult {
        initial,
        model,
        records,
    })
}

/// Names of frozen parameters that differ between two models.
pub fn frozen_changes(before: &AnPromptModel, after: &AnPromptModel) -> Vec<String> {
    Checkpoint::from_model(before).diff(&Checkpoint::from_model(after), ParamRole::Frozen)
}

/// Writes a list of serializable records as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
