//! Base-to-novel evaluation and the text-noise robustness metrics.
//!
//! * Text shift: mean squared L2 distance between the frozen embeddings of
//!   clean and perturbed captions.
//! * Logit preservation rate: fraction of test images whose predicted class
//!   is unchanged when the class-side text features are perturbed.
//! * Accuracy shift: absolute change in top-1 accuracy, in points.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encoder::{ClassPrompt, DualEncoder};
use crate::error::{Error, Result};
use crate::model::{AnPromptModel, ClassFeatures};
use crate::noise::{
    build_weak_feature_bank, class_rng, fuse_weak_noise, perturb_strong, sample_pair, CaptionCache,
    NoiseSource, Perturbation, PerturbationKind, WeakNoiseConfig,
};
use crate::seed;
use crate::tensor::{normalized, Matrix};
use crate::train::RunContext;

/// Which classes are trained on and which are held out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Empty lists select the first half of the sorted classes as base and
    /// the rest as novel.
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub shots_per_class: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            base_classes: Vec::new(),
            novel_classes: Vec::new(),
            shots_per_class: 16,
        }
    }
}

impl SplitSpec {
    pub fn halves(num_classes: usize, shots_per_class: usize) -> Self {
        let half = num_classes / 2;
        Self {
            base_classes: (0..half).collect(),
            novel_classes: (half..num_classes).collect(),
            shots_per_class,
        }
    }

    /// Fills in the default halves and checks that the two sets are sorted,
    /// disjoint and cover every label.
    pub fn resolve(&self, num_classes: usize) -> Result<Self> {
        if self.base_classes.is_empty() && self.novel_classes.is_empty() {
            return Ok(Self::halves(num_classes, self.shots_per_class));
        }
        let mut all: Vec<usize> = self.base_classes.iter().chain(&self.novel_classes).copied().collect();
        all.sort_unstable();
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.base_classes) || !sorted(&self.novel_classes) {
            return Err(Error::config("dataset.split", "class lists must be sorted and unique"));
        }
        if all != (0..num_classes).collect::<Vec<_>>() {
            return Err(Error::config(
                "dataset.split",
                format!("base and novel classes must partition 0..{num_classes}"),
            ));
        }
        if self.base_classes.is_empty() || self.novel_classes.is_empty() {
            return Err(Error::config("dataset.split", "both class sets must be nonempty"));
        }
        Ok(self.clone())
    }
}

/// Top-1 accuracy in percent.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Input("empty evaluation split".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// `2ab / (a + b)` for accuracies in `(0, 100]`.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    for (name, v) in [("base", base), ("novel", novel)] {
        if !(v > 0.0 && v <= 100.0) {
            return Err(Error::Input(format!("{name} accuracy {v} outside (0, 100]")));
        }
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Harmonic mean that takes its limit value 0 when either accuracy is 0.
pub fn harmonic_mean_or_zero(base: f64, novel: f64) -> f64 {
    if base <= 0.0 || novel <= 0.0 {
        0.0
    } else {
        harmonic_mean(base, novel).unwrap_or(0.0)
    }
}

fn eval_seed(seed_value: u64) -> u64 {
    seed::derive(&[seed_value, 0xE7A1])
}

/// Prompted and weak-noise text features of `classes`.
pub fn class_features(ctx: &RunContext, model: &AnPromptModel, classes: &[usize], seed_value: u64) -> Result<ClassFeatures> {
    let f_t = model.text_features(&ctx.prompts_for(classes))?;
    let bank = build_weak_feature_bank(
        &ctx.captions,
        model.encoder(),
        &ctx.config.effective_weak_noise(),
        &NoiseSource::WeakFusion,
        classes,
        eval_seed(seed_value),
    )?;
    Ok(ClassFeatures {
        f_t,
        f_w: bank.per_class,
    })
}

/// Test samples whose label is in `classes`, with labels mapped to their
/// position in `classes`.
fn restricted<'a>(samples: &'a [Sample], classes: &[usize]) -> (Vec<&'a Matrix>, Vec<usize>) {
    samples
        .iter()
        .filter_map(|s| {
            classes
                .iter()
                .position(|&c| c == s.label)
                .map(|i| (&s.image, i))
        })
        .unzip()
}

/// Accuracy of the final logits on `samples` restricted to `classes`.
pub fn evaluate_accuracy(
    ctx: &RunContext,
    model: &AnPromptModel,
    samples: &[Sample],
    classes: &[usize],
    seed_value: u64,
) -> Result<f64> {
    let (images, labels) = restricted(samples, classes);
    if images.is_empty() {
        return Err(Error::Input("empty evaluation split".into()));
    }
    let cf = class_features(ctx, model, classes, seed_value)?;
    let f_v = model.image_features(&images)?;
    let preds = model.predict(&f_v, &cf, ctx.config.losses.theta)?;
    accuracy(&preds, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub n_base: usize,
    pub n_novel: usize,
}

/// Base accuracy, novel accuracy and their harmonic mean on the test split.
pub fn evaluate_base_novel(ctx: &RunContext, model: &AnPromptModel, seed_value: u64) -> Result<EvalReport> {
    let test = &ctx.dataset.test;
    let base = &ctx.split.base_classes;
    let novel = &ctx.split.novel_classes;
    let base_acc = evaluate_accuracy(ctx, model, test, base, seed_value)?;
    let novel_acc = evaluate_accuracy(ctx, model, test, novel, seed_value)?;
    Ok(EvalReport {
        seed: seed_value,
        base_acc,
        novel_acc,
        hm: harmonic_mean_or_zero(base_acc, novel_acc),
        n_base: test.iter().filter(|s| base.contains(&s.label)).count(),
        n_novel: test.iter().filter(|s| novel.contains(&s.label)).count(),
    })
}

/// A perturbation as used by the noise metrics: token-level kinds act on
/// captions and class prompts, weak fusion adds `alpha` times the frozen
/// feature of another caption of the same class.
#[derive(Clone, Debug)]
pub struct NoiseProbe {
    pub perturbation: Perturbation,
    pub alpha: f64,
}

impl NoiseProbe {
    pub fn kind(&self) -> PerturbationKind {
        self.perturbation.kind
    }

    pub fn label(&self) -> String {
        match self.kind() {
            PerturbationKind::WeakFusion => format!("weak_fusion(alpha={})", self.alpha),
            PerturbationKind::Identity => "identity".into(),
            _ => self.perturbation.label(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseMetricReport {
    pub perturbation: PerturbationKind,
    pub label: String,
    pub ts: f64,
    pub lpr: f64,
    pub as_: f64,
    pub n_samples: usize,
}

/// Mean squared L2 distance between matching rows.
pub fn mean_squared_shift(clean: &Matrix, perturbed: &Matrix) -> Result<f64> {
    if clean.shape() != perturbed.shape() {
        return Err(Error::dim("clean and perturbed embeddings differ in shape"));
    }
    if clean.rows() == 0 {
        return Err(Error::Input("empty corpus".into()));
    }
    let total: f64 = clean
        .iter_rows()
        .zip(perturbed.iter_rows())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum();
    Ok(total / clean.rows() as f64)
}

fn map_ordered<T: Send, F: Fn(usize) -> Result<T> + Sync + Send>(n: usize, f: F) -> Result<Vec<T>> {
    if seed::parallel_enabled() {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Frozen embedding of a caption of `class` other than `skip`, chosen by `rng`.
fn other_caption_feature(
    cache: &CaptionCache,
    encoder: &DualEncoder,
    class: usize,
    skip: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<f64>> {
    use rand::Rng;
    let pool = cache.sentences(class)?;
    let mut j = rng.random_range(0..pool.len() - 1);
    if j >= skip {
        j += 1;
    }
    encoder.encode_text_frozen(&pool[j].tokens)
}

/// Text shift of `probe` over every caption of `classes`.
pub fn text_shift(
    encoder: &DualEncoder,
    cache: &CaptionCache,
    classes: &[usize],
    probe: &NoiseProbe,
    seed_value: u64,
) -> Result<f64> {
    let mut items = Vec::new();
    for &c in classes {
        for i in 0..cache.sentences(c)?.len() {
            items.push((c, i));
        }
    }
    if items.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let pairs = map_ordered(items.len(), |n| {
        let (class, i) = items[n];
        let sentence = &cache.sentences(class)?[i];
        let clean = encoder.encode_text_frozen(&sentence.tokens)?;
        let mut rng = seed::rng(&[seed_value, 0x75, class as u64, i as u64]);
        let perturbed = match probe.kind() {
            PerturbationKind::Identity => clean.clone(),
            PerturbationKind::WeakFusion => {
                let noise = other_caption_feature(cache, encoder, class, i, &mut rng)?;
                fuse(&clean, &noise, probe.alpha)?
            }
            _ => encoder.encode_text_frozen(&perturb_strong(&sentence.tokens, &probe.perturbation, &mut rng)?)?,
        };
        Ok((clean, perturbed))
    })?;
    let (clean, perturbed): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    mean_squared_shift(&Matrix::from_rows(&clean)?, &Matrix::from_rows(&perturbed)?)
}

fn fuse(main: &[f64], noise: &[f64], alpha: f64) -> Result<Vec<f64>> {
    fuse_weak_noise(
        main,
        noise,
        &WeakNoiseConfig {
            alpha,
            renormalize: true,
            ..Default::default()
        },
    )
}

/// Class features with `probe` applied to the class-side text: the class
/// prompt tokens (prompted features) and the main caption (weak-noise
/// features). Identity returns `clean` unchanged.
pub fn perturbed_class_features(
    ctx: &RunContext,
    model: &AnPromptModel,
    classes: &[usize],
    clean: &ClassFeatures,
    probe: &NoiseProbe,
    seed_value: u64,
) -> Result<ClassFeatures> {
    let encoder = model.encoder();
    let cache = &ctx.captions;
    let wn = ctx.config.effective_weak_noise();
    match probe.kind() {
        PerturbationKind::Identity => Ok(clean.clone()),
        PerturbationKind::WeakFusion => {
            let mut f_t = Vec::new();
            let mut f_w = Vec::new();
            for (row, &class) in classes.iter().enumerate() {
                let mut rng = seed::rng(&[seed_value, 0x1F, class as u64]);
                let n1 = other_caption_feature(cache, encoder, class, usize::MAX, &mut rng)?;
                let n2 = other_caption_feature(cache, encoder, class, usize::MAX, &mut rng)?;
                f_t.push(fuse(clean.f_t.row(row), &n1, probe.alpha)?);
                f_w.push(fuse(clean.f_w.row(row), &n2, probe.alpha)?);
            }
            Ok(ClassFeatures {
                f_t: Matrix::from_rows(&f_t)?,
                f_w: Matrix::from_rows(&f_w)?,
            })
        }
        _ => {
            let mut prompts = Vec::new();
            let mut f_w = Vec::new();
            for &class in classes {
                let mut rng = seed::rng(&[seed_value, 0x1F, class as u64]);
                let content = ctx.class_prompts[class].content();
                prompts.push(ClassPrompt {
                    context: perturb_strong(&content, &probe.perturbation, &mut rng)?,
                    name: Vec::new(),
                });
                // same pair as the clean weak-noise feature of this class
                let mut pair_rng = class_rng(&wn, class, eval_seed(seed_value));
                let (main, noise) = sample_pair(cache, class, &mut pair_rng)?;
                let main = encoder.encode_text_frozen(&perturb_strong(&main.tokens, &probe.perturbation, &mut rng)?)?;
                let noise = encoder.encode_text_frozen(&noise.tokens)?;
                f_w.push(fuse_weak_noise(&main, &noise, &wn)?);
            }
            Ok(ClassFeatures {
                f_t: model.text_features(&prompts)?,
                f_w: Matrix::from_rows(&f_w)?,
            })
        }
    }
}

/// Fraction of positions where the two prediction lists agree.
pub fn logit_preservation_rate(clean: &[usize], perturbed: &[usize]) -> Result<f64> {
    if clean.is_empty() || clean.len() != perturbed.len() {
        return Err(Error::Input("prediction lists must be nonempty and equally long".into()));
    }
    let same = clean.iter().zip(perturbed).filter(|(a, b)| a == b).count();
    Ok(same as f64 / clean.len() as f64)
}

/// `|clean − perturbed|` in accuracy points.
pub fn accuracy_shift(clean_acc: f64, perturbed_acc: f64) -> f64 {
    (clean_acc - perturbed_acc).abs()
}

/// Text shift, preservation rate and accuracy shift of each probe over the
/// whole test split and all classes.
pub fn noise_bench(
    ctx: &RunContext,
    model: &AnPromptModel,
    probes: &[NoiseProbe],
    seed_value: u64,
) -> Result<Vec<NoiseMetricReport>> {
    if probes.is_empty() {
        return Err(Error::Input("no perturbations requested".into()));
    }
    let classes: Vec<usize> = (0..ctx.dataset.num_classes()).collect();
    let (images, labels) = restricted(&ctx.dataset.test, &classes);
    if images.is_empty() {
        return Err(Error::Input("empty evaluation split".into()));
    }
    let theta = ctx.config.losses.theta;
    let clean = class_features(ctx, model, &classes, seed_value)?;
    let f_v = model.image_features(&images)?;
    let clean_preds = model.predict(&f_v, &clean, theta)?;
    let clean_acc = accuracy(&clean_preds, &labels)?;
    probes
        .iter()
        .map(|probe| {
            let ts = text_shift(model.encoder(), &ctx.captions, &classes, probe, seed_value)?;
            let pert = perturbed_class_features(ctx, model, &classes, &clean, probe, seed_value)?;
            let preds = model.predict(&f_v, &pert, theta)?;
            Ok(NoiseMetricReport {
                perturbation: probe.kind(),
                label: probe.label(),
                ts,
                lpr: logit_preservation_rate(&clean_preds, &preds)?,
                as_: accuracy_shift(clean_acc, accuracy(&preds, &labels)?),
                n_samples: images.len(),
            })
        })
        .collect()
}

/// Probes for `kinds` using the configured rate and fusion coefficient.
pub fn probes_from_config(ctx: &RunContext, kinds: &[PerturbationKind]) -> Result<Vec<NoiseProbe>> {
    let nb = &ctx.config.noise_bench;
    kinds
        .iter()
        .map(|&kind| {
            let perturbation = match kind {
                PerturbationKind::Identity | PerturbationKind::WeakFusion => Perturbation::new(kind, 0.0),
                _ => Perturbation::new(kind, nb.rate).with_synonyms(ctx.synonyms.clone()),
            };
            if !matches!(kind, PerturbationKind::WeakFusion | PerturbationKind::Identity) {
                perturbation.validate()?;
            }
            Ok(NoiseProbe {
                perturbation,
                alpha: nb.alpha,
            })
        })
        .collect()
}

/// Unit-normalized copy of every row, used by tests and callers holding
/// raw features.
pub fn normalize_all(rows: &[Vec<f64>]) -> Result<Matrix> {
    let rows = rows.iter().map(|r| normalized(r)).collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}
