//! Weak semantic noise: intra-class caption pairs fused in the frozen text
//! feature space, plus the token-level strong perturbations they are
//! compared against.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{normalized, Matrix};
use crate::text::{TokenId, Vocab, MASK_ID};

/// One caption with its token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub tokens: Vec<TokenId>,
}

/// Per-class caption pools, indexed by class id.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionCache {
    entries: Vec<Vec<Sentence>>,
    min_per_class: usize,
}

/// On-disk caption file: class name → captions.
pub type CaptionFile = BTreeMap<String, Vec<String>>;

impl CaptionCache {
    pub const MIN_PER_CLASS: usize = 2;

    /// Builds the cache for `class_names` (class id = position) from a
    /// name → captions map. Every class needs at least two captions.
    pub fn new(class_names: &[String], captions: &CaptionFile, vocab: &Vocab) -> Result<Self> {
        let mut entries = Vec::with_capacity(class_names.len());
        for name in class_names {
            let list = captions
                .get(name)
                .ok_or_else(|| Error::Cache(format!("no captions for class `{name}`")))?;
            if list.len() < Self::MIN_PER_CLASS {
                return Err(Error::Cache(format!(
                    "class `{name}` has {} caption(s); at least {} are required",
                    list.len(),
                    Self::MIN_PER_CLASS
                )));
            }
            let sentences = list
                .iter()
                .map(|t| {
                    let tokens = vocab.encode(t);
                    if tokens.is_empty() {
                        return Err(Error::Cache(format!("empty caption for class `{name}`")));
                    }
                    Ok(Sentence {
                        text: t.clone(),
                        tokens,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push(sentences);
        }
        Ok(Self {
            entries,
            min_per_class: Self::MIN_PER_CLASS,
        })
    }

    pub fn load(path: &Path, class_names: &[String], vocab: &Vocab) -> Result<Self> {
        let file = read_caption_file(path)?;
        Self::new(class_names, &file, vocab)
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn min_per_class(&self) -> usize {
        self.min_per_class
    }

    pub fn sentences(&self, class_id: usize) -> Result<&[Sentence]> {
        self.entries
            .get(class_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Cache(format!("class id {class_id} is not in the cache")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Sentence)> {
        self.entries
            .iter()
            .enumerate()
            .flat_map(|(c, s)| s.iter().map(move |x| (c, x)))
    }
}

pub fn read_caption_file(path: &Path) -> Result<CaptionFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        reason: e.to_string(),
    })
}

/// Weak-noise fusion settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeakNoiseConfig {
    /// Fusion scale `α` in `f_w = f_m + α·f_n`.
    pub alpha: f64,
    pub seed: u64,
    /// L2-normalize the fused feature.
    pub renormalize: bool,
    /// Main/noise pairs drawn per class for the clustering bank.
    pub pairs_per_class: usize,
}

impl Default for WeakNoiseConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            seed: 0,
            renormalize: true,
            pairs_per_class: 4,
        }
    }
}

impl WeakNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("weak_noise.alpha", "must be a nonnegative number"));
        }
        if self.pairs_per_class == 0 {
            return Err(Error::config("weak_noise.pairs_per_class", "must be positive"));
        }
        Ok(())
    }
}

/// Draws a (main, noise) pair of distinct captions uniformly without
/// replacement.
pub fn sample_pair<'a>(
    cache: &'a CaptionCache,
    class_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(&'a Sentence, &'a Sentence)> {
    let pool = cache.sentences(class_id)?;
    if pool.len() < 2 {
        return Err(Error::Cache(format!(
            "class {class_id} has fewer than two captions"
        )));
    }
    let i = rng.random_range(0..pool.len());
    let mut j = rng.random_range(0..pool.len() - 1);
    if j >= i {
        j += 1;
    }
    Ok((&pool[i], &pool[j]))
}

/// `f_m + α·f_n`, renormalized when configured.
///
/// With `α = 0` the main feature is returned as is. Frozen caption features
/// are already unit length, and renormalizing them again could flip the last
/// bit of some entries.
pub fn fuse_weak_noise(main: &[f64], noise: &[f64], cfg: &WeakNoiseConfig) -> Result<Vec<f64>> {
    if main.len() != noise.len() {
        return Err(Error::dim(format!(
            "main feature has length {} but noise feature has length {}",
            main.len(),
            noise.len()
        )));
    }
    if cfg.alpha == 0.0 {
        return Ok(main.to_vec());
    }
    let fused: Vec<f64> = main
        .iter()
        .zip(noise)
        .map(|(m, n)| m + cfg.alpha * n)
        .collect();
    if cfg.renormalize {
        normalized(&fused)
    } else {
        Ok(fused)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Drop,
    Mask,
    Shuffle,
    SynonymReplace,
    WeakFusion,
    Identity,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 6] = [
        PerturbationKind::Drop,
        PerturbationKind::Mask,
        PerturbationKind::Shuffle,
        PerturbationKind::SynonymReplace,
        PerturbationKind::WeakFusion,
        PerturbationKind::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Drop => "drop",
            PerturbationKind::Mask => "mask",
            PerturbationKind::Shuffle => "shuffle",
            PerturbationKind::SynonymReplace => "synonym_replace",
            PerturbationKind::WeakFusion => "weak_fusion",
            PerturbationKind::Identity => "identity",
        }
    }
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown perturbation `{s}`")))
    }
}

/// Synonyms keyed by token id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynonymTable {
    map: HashMap<TokenId, Vec<TokenId>>,
}

impl SynonymTable {
    /// Resolves a word → words map through the vocabulary. Words outside the
    /// vocabulary are skipped so replacements never leave it.
    pub fn from_words(table: &BTreeMap<String, Vec<String>>, vocab: &Vocab) -> Self {
        let mut map = HashMap::new();
        for (word, syns) in table {
            let Some(id) = vocab.id(word) else {
                log::warn!("synonym key `{word}` is not in the vocabulary; skipped");
                continue;
            };
            let ids: Vec<TokenId> = syns.iter().filter_map(|s| vocab.id(s)).collect();
            if !ids.is_empty() {
                map.insert(id, ids);
            }
        }
        Self { map }
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self> {
        Ok(Self::from_words(&read_caption_file(path)?, vocab))
    }

    pub fn get(&self, id: TokenId) -> Option<&[TokenId]> {
        self.map.get(&id).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }
}

/// A text perturbation and its strength.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    /// Fraction of tokens affected (drop, mask, synonym replacement), or
    /// the fusion scale for weak fusion.
    pub rate: f64,
    pub synonym_table: Option<Arc<SynonymTable>>,
}

impl Perturbation {
    pub fn new(kind: PerturbationKind, rate: f64) -> Self {
        Self {
            kind,
            rate,
            synonym_table: None,
        }
    }

    pub fn identity() -> Self {
        Self::new(PerturbationKind::Identity, 0.0)
    }

    pub fn with_synonyms(mut self, table: Arc<SynonymTable>) -> Self {
        self.synonym_table = Some(table);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::config("rate", format!("{} is outside [0, 1]", self.rate)));
        }
        if self.kind == PerturbationKind::SynonymReplace
            && self.synonym_table.as_ref().is_none_or(|t| t.is_empty())
        {
            return Err(Error::config(
                "synonym_table",
                "synonym replacement needs a non-empty synonym table",
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            PerturbationKind::Identity | PerturbationKind::Shuffle => self.kind.name().to_string(),
            _ => format!("{}@{}", self.kind.name(), self.rate),
        }
    }
}

fn affected(rate: f64, len: usize) -> usize {
    ((rate * len as f64).ceil() as usize).min(len)
}

/// Applies a token-level perturbation to a sentence's content tokens.
/// Start and end markers are added by the encoder and are never touched.
///
/// Dropping always keeps at least one token so the sentence stays
/// encodable.
pub fn perturb_strong(sentence: &[TokenId], p: &Perturbation, rng: &mut ChaCha8Rng) -> Result<Vec<TokenId>> {
    if sentence.is_empty() {
        return Err(Error::Input("cannot perturb an empty sentence".into()));
    }
    p.validate()?;
    let len = sentence.len();
    let out = match p.kind {
        PerturbationKind::Identity => sentence.to_vec(),
        PerturbationKind::Drop => {
            let n = affected(p.rate, len).min(len - 1);
            let mut gone = vec![false; len];
            for i in index::sample(rng, len, n).iter() {
                gone[i] = true;
            }
            sentence
                .iter()
                .zip(&gone)
                .filter(|(_, &g)| !g)
                .map(|(&t, _)| t)
                .collect()
        }
        PerturbationKind::Mask => {
            let mut out = sentence.to_vec();
            for i in index::sample(rng, len, affected(p.rate, len)).iter() {
                out[i] = MASK_ID;
            }
            out
        }
        PerturbationKind::Shuffle => {
            let mut out = sentence.to_vec();
            out.shuffle(rng);
            out
        }
        PerturbationKind::SynonymReplace => {
            let table = p.synonym_table.as_ref().expect("validated");
            let candidates: Vec<usize> = (0..len).filter(|&i| table.get(sentence[i]).is_some()).collect();
            let n = affected(p.rate, len).min(candidates.len());
            let mut out = sentence.to_vec();
            for pick in index::sample(rng, candidates.len(), n).iter() {
                let i = candidates[pick];
                let syns = table.get(sentence[i]).expect("candidate");
                out[i] = syns[rng.random_range(0..syns.len())];
            }
            out
        }
        PerturbationKind::WeakFusion => {
            return Err(Error::Input(
                "weak fusion perturbs features, not tokens".into(),
            ))
        }
    };
    Ok(out)
}

/// How the per-class noisy text feature is produced.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseSource {
    /// `f_m + α·f_n` in frozen feature space.
    WeakFusion,
    /// Frozen encoding of a token-perturbed main caption.
    Strong(Perturbation),
}

/// Weak-noise features for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct WeakFeatureBank {
    /// All fused rows, `pairs_per_class` per class, ordered by class.
    pub rows: Matrix,
    /// Class id of each row of `rows`.
    pub row_class: Vec<usize>,
    /// One row per class (the first pair), used as `f_w` in the logits.
    pub per_class: Matrix,
}

/// Generator behind the caption pairs of `class` in a bank built with
/// `seed`; its first draw is the pair behind `per_class`.
pub fn class_rng(cfg: &WeakNoiseConfig, class: usize, seed: u64) -> ChaCha8Rng {
    seed::rng(&[seed, cfg.seed, class as u64])
}

/// Samples main/noise pairs for every class in `classes`, encodes them
/// with the frozen text encoder and fuses them. Each class draws from its
/// own generator derived from `seed`, so the result does not depend on
/// evaluation order.
pub fn build_weak_feature_bank(
    cache: &CaptionCache,
    encoder: &DualEncoder,
    cfg: &WeakNoiseConfig,
    source: &NoiseSource,
    classes: &[usize],
    seed: u64,
) -> Result<WeakFeatureBank> {
    cfg.validate()?;
    let per_class = |&class: &usize| -> Result<Vec<Vec<f64>>> {
        let mut rng = class_rng(cfg, class, seed);
        (0..cfg.pairs_per_class)
            .map(|_| {
                let (main, noise) = sample_pair(cache, class, &mut rng)?;
                match source {
                    NoiseSource::WeakFusion => {
                        let fm = encoder.encode_text_frozen(&main.tokens)?;
                        let fnoise = encoder.encode_text_frozen(&noise.tokens)?;
                        fuse_weak_noise(&fm, &fnoise, cfg)
                    }
                    NoiseSource::Strong(p) => {
                        let toks = perturb_strong(&main.tokens, p, &mut rng)?;
                        encoder.encode_text_frozen(&toks)
                    }
                }
            })
            .collect()
    };
    let groups: Vec<Vec<Vec<f64>>> = if seed::parallel_enabled() {
        classes.par_iter().map(per_class).collect::<Result<_>>()?
    } else {
        classes.iter().map(per_class).collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    let mut row_class = Vec::new();
    let mut firsts = Vec::new();
    for (&class, group) in classes.iter().zip(groups) {
        firsts.push(group[0].clone());
        for r in group {
            rows.push(r);
            row_class.push(class);
        }
    }
    Ok(WeakFeatureBank {
        rows: Matrix::from_rows(&rows)?,
        row_class,
        per_class: Matrix::from_rows(&firsts)?,
    })
}
