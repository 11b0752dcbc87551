//! Miniature dual encoder: a vision transformer over image patches and a
//! text transformer over word tokens, both frozen, with deep prompt
//! injection over a configurable layer range.
//!
//! Vision sequences are laid out as `{prompts, class token, patches}` and
//! text sequences as `{start, prompts, context words, class name, end}`.
//! Prompt slots enter the sequence at the first injected layer; every later
//! injected layer overwrites those slots with its own prompts, so the
//! sequence length stays fixed from the first injection onward. After the
//! last injected layer the slots are carried forward like any other token.
//!
//! Layers before the first injected layer do not depend on any trainable
//! value, so their output is memoized per input.

mod config;
mod transformer;

use std::collections::HashMap;
use std::sync::RwLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{EncoderConfig, InjectionSpec};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{gaussian, Binder, ParamRole, ParamStore};
use crate::prompting::AntiNoisePrompts;
use crate::tensor::{normalized, Matrix};
use crate::text::{TokenId, EOS_ID, SOS_ID};

pub const VISION: &str = "vision";
pub const TEXT: &str = "text";

const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.29;

/// Role of one position in an encoder input sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Start,
    Prompt,
    ClassName,
    Content,
    Patch,
    ClassToken,
    End,
}

/// An encoder input sequence together with the role of each position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Matrix,
    pub role_tags: Vec<TokenRole>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.role_tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.role_tags.is_empty()
    }
}

/// Word tokens of a class prompt: context words followed by the class name.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ClassPrompt {
    pub context: Vec<TokenId>,
    pub name: Vec<TokenId>,
}

impl ClassPrompt {
    pub fn content(&self) -> Vec<TokenId> {
        let mut v = self.context.clone();
        v.extend_from_slice(&self.name);
        v
    }
}

/// Per-layer prompt tokens placed on a tape, one `(K, C)` variable per
/// injected layer in ascending layer order.
#[derive(Clone, Copy, Debug)]
pub struct Injection<'a> {
    pub spec: &'a InjectionSpec,
    pub layer_prompts: &'a [Var],
}

/// Tape outputs of the vision tower.
#[derive(Clone, Copy, Debug)]
pub struct ImageEncoding {
    /// Unit-norm `1 x C` image feature from the class token.
    pub feature: Var,
    /// Projected prompt-slot outputs, `(K, C)`, when prompts were injected.
    pub prompt_tokens: Option<Var>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum PrefixKey {
    Image(usize, Vec<u64>),
    Text(usize, Vec<TokenId>),
}

/// Frozen dual encoder with its memo tables.
///
/// The backbone store is never handed out mutably, which is what keeps the
/// frozen weights bitwise unchanged across training.
pub struct DualEncoder {
    config: EncoderConfig,
    backbone: ParamStore,
    frozen_text: RwLock<HashMap<Vec<TokenId>, Vec<f64>>>,
    prefixes: RwLock<HashMap<PrefixKey, Matrix>>,
}

impl std::fmt::Debug for DualEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualEncoder")
            .field("config", &self.config)
            .field("parameters", &self.backbone.len())
            .finish()
    }
}

impl DualEncoder {
    /// Randomly initialized backbone, seeded by `config.init_seed`.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let c = config.embed_dim;
        let mut store = ParamStore::new();
        let frozen = ParamRole::Frozen;

        let p = config.patch_pixels();
        let m = config.num_patches();
        store.insert("vision.patch.w", gaussian(p, c, 1.0 / (p as f64).sqrt(), &mut rng), frozen);
        store.insert("vision.patch.b", Matrix::zeros(1, c), frozen);
        store.insert("vision.cls", gaussian(1, c, 0.02, &mut rng), frozen);
        store.insert("vision.pos", gaussian(1 + m, c, 0.1, &mut rng), frozen);
        for layer in 1..=config.num_layers {
            transformer::init_block(&mut store, VISION, layer, &config, &mut rng);
        }
        store.insert("vision.ln_post.g", Matrix::filled(1, c, 1.0), frozen);
        store.insert("vision.ln_post.b", Matrix::zeros(1, c), frozen);
        store.insert("vision.proj", gaussian(c, c, 1.0 / (c as f64).sqrt(), &mut rng), frozen);

        store.insert("text.tok", gaussian(config.vocab_size, c, 1.0, &mut rng), frozen);
        store.insert("text.pos", gaussian(config.max_text_len, c, 0.1, &mut rng), frozen);
        for layer in 1..=config.num_layers {
            transformer::init_block(&mut store, TEXT, layer, &config, &mut rng);
        }
        store.insert("text.ln_final.g", Matrix::filled(1, c, 1.0), frozen);
        store.insert("text.ln_final.b", Matrix::zeros(1, c), frozen);
        store.insert("text.proj", gaussian(c, c, 1.0 / (c as f64).sqrt(), &mut rng), frozen);

        Ok(Self::with_backbone(config, store))
    }

    /// Rebuilds an encoder around previously saved backbone weights.
    pub fn from_backbone(config: EncoderConfig, backbone: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone())?;
        for (name, entry) in reference.backbone.iter() {
            let got = backbone.get(name)?;
            if got.shape() != entry.value.shape() {
                return Err(Error::dim(format!(
                    "backbone `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    entry.value.shape()
                )));
            }
        }
        let mut store = ParamStore::new();
        for (name, _) in reference.backbone.iter() {
            store.insert(name, backbone.get(name)?.clone(), ParamRole::Frozen);
        }
        Ok(Self::with_backbone(config, store))
    }

    fn with_backbone(config: EncoderConfig, backbone: ParamStore) -> Self {
        Self {
            config,
            backbone,
            frozen_text: RwLock::new(HashMap::new()),
            prefixes: RwLock::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn backbone(&self) -> &ParamStore {
        &self.backbone
    }

    /// Number of sentences held in the frozen-text cache.
    pub fn frozen_cache_len(&self) -> usize {
        self.frozen_text.read().expect("cache lock").len()
    }

    pub fn frozen_cache_contains(&self, sentence: &[TokenId]) -> bool {
        self.frozen_text.read().expect("cache lock").contains_key(sentence)
    }

    // ----- input embedding -------------------------------------------------

    fn check_image(&self, image: &Matrix) -> Result<()> {
        let [h, w] = self.config.image_size;
        if image.shape() != (h, w) {
            return Err(Error::dim(format!(
                "image is {:?} but the encoder expects {h}x{w}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Pixels are standardized with fixed statistics of `[0, 1]` images
    /// before the patch projection.
    fn patchify(&self, image: &Matrix) -> Matrix {
        let [gh, gw] = self.config.patch_grid;
        let [h, w] = self.config.image_size;
        let (ph, pw) = (h / gh, w / gw);
        let mut out = Matrix::zeros(gh * gw, ph * pw);
        for gi in 0..gh {
            for gj in 0..gw {
                let row = out.row_mut(gi * gw + gj);
                for y in 0..ph {
                    for x in 0..pw {
                        row[y * pw + x] = (image.get(gi * ph + y, gj * pw + x) - PIXEL_MEAN) / PIXEL_STD;
                    }
                }
            }
        }
        out
    }

    /// `{class token, patches}` input embeddings with positions added.
    fn image_embedding(&self, image: &Matrix) -> Result<Matrix> {
        self.check_image(image)?;
        let b = &self.backbone;
        let mut patches = self.patchify(image).matmul(b.get("vision.patch.w")?);
        let bias = b.get("vision.patch.b")?.row(0).to_vec();
        for r in 0..patches.rows() {
            for (x, bb) in patches.row_mut(r).iter_mut().zip(&bias) {
                *x += bb;
            }
        }
        let mut seq = Matrix::vstack(&[b.get("vision.cls")?, &patches])?;
        seq.add_assign(b.get("vision.pos")?);
        Ok(seq)
    }

    fn check_tokens(&self, content: &[TokenId], prompt_count: usize) -> Result<()> {
        if content.is_empty() {
            return Err(Error::Input("empty sentence".into()));
        }
        if let Some(&bad) = content.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside the vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let len = content.len() + 2 + prompt_count;
        if len > self.config.max_text_len {
            return Err(Error::Truncation {
                len,
                max: self.config.max_text_len,
            });
        }
        Ok(())
    }

    /// `{start, content, end}` input embeddings with positions added.
    fn text_embedding(&self, content: &[TokenId]) -> Result<Matrix> {
        let tok = self.backbone.get("text.tok")?;
        let pos = self.backbone.get("text.pos")?;
        let ids: Vec<usize> = std::iter::once(SOS_ID)
            .chain(content.iter().copied())
            .chain(std::iter::once(EOS_ID))
            .map(|t| t as usize)
            .collect();
        let mut seq = tok.select_rows(&ids);
        for r in 0..seq.rows() {
            for (x, p) in seq.row_mut(r).iter_mut().zip(pos.row(r)) {
                *x += p;
            }
        }
        Ok(seq)
    }

    /// The input-level vision sequence with role tags; prompts (if given)
    /// occupy the leading slots.
    pub fn image_sequence(&self, image: &Matrix, prompts: Option<&Matrix>) -> Result<TokenSequence> {
        let emb = self.image_embedding(image)?;
        let mut tags = Vec::new();
        let tokens = match prompts {
            Some(p) => {
                self.check_prompt_width(p)?;
                tags.extend(std::iter::repeat_n(TokenRole::Prompt, p.rows()));
                Matrix::vstack(&[p, &emb])?
            }
            None => emb,
        };
        tags.push(TokenRole::ClassToken);
        tags.extend(std::iter::repeat_n(TokenRole::Patch, self.config.num_patches()));
        Ok(TokenSequence {
            tokens,
            role_tags: tags,
        })
    }

    /// The input-level text sequence with role tags; prompts (if given)
    /// follow the start token.
    pub fn text_sequence(&self, prompt: &ClassPrompt, prompts: Option<&Matrix>) -> Result<TokenSequence> {
        let content = prompt.content();
        let k = prompts.map_or(0, Matrix::rows);
        self.check_tokens(&content, k)?;
        let emb = self.text_embedding(&content)?;
        let mut tags = vec![TokenRole::Start];
        let tokens = match prompts {
            Some(p) => {
                self.check_prompt_width(p)?;
                tags.extend(std::iter::repeat_n(TokenRole::Prompt, k));
                let head = emb.slice_rows(0, 1);
                let tail = emb.slice_rows(1, emb.rows() - 1);
                Matrix::vstack(&[&head, p, &tail])?
            }
            None => emb,
        };
        tags.extend(std::iter::repeat_n(TokenRole::Content, prompt.context.len()));
        tags.extend(std::iter::repeat_n(TokenRole::ClassName, prompt.name.len()));
        tags.push(TokenRole::End);
        Ok(TokenSequence {
            tokens,
            role_tags: tags,
        })
    }

    fn check_prompt_width(&self, p: &Matrix) -> Result<()> {
        if p.cols() != self.config.embed_dim {
            return Err(Error::dim(format!(
                "prompt width {} does not match embed_dim {}",
                p.cols(),
                self.config.embed_dim
            )));
        }
        Ok(())
    }

    // ----- towers ------------------------------------------------------------

    /// Output of layers `1..upto` (exclusive) on a constant input, memoized.
    fn prefix(&self, tower: &str, key: PrefixKey, input: Matrix, upto: usize) -> Matrix {
        if upto <= 1 {
            return input;
        }
        if let Some(hit) = self.prefixes.read().expect("prefix lock").get(&key) {
            return hit.clone();
        }
        let mut tape = Tape::new();
        let mut bind = Binder::inference(&self.backbone);
        let mut x = tape.constant(input);
        for layer in 1..upto {
            x = transformer::block(&mut tape, &mut bind, tower, layer, &self.config, x);
        }
        let out = tape.value(x).clone();
        self.prefixes
            .write()
            .expect("prefix lock")
            .insert(key, out.clone());
        out
    }

    fn check_injection(&self, inj: &Injection<'_>) -> Result<()> {
        inj.spec.validate(self.config.num_layers)?;
        let n = inj.spec.layer_end - inj.spec.layer_start + 1;
        if inj.layer_prompts.len() != n {
            return Err(Error::dim(format!(
                "{} prompt sets supplied for {n} injected layers",
                inj.layer_prompts.len()
            )));
        }
        Ok(())
    }

    fn check_layer_prompts(&self, tape: &Tape, inj: &Injection<'_>) -> Result<()> {
        for &p in inj.layer_prompts {
            let v = tape.value(p);
            if v.rows() != inj.spec.prompt_count {
                return Err(Error::dim(format!(
                    "{} prompt tokens supplied but prompt_count is {}",
                    v.rows(),
                    inj.spec.prompt_count
                )));
            }
            self.check_prompt_width(v)?;
        }
        Ok(())
    }

    /// Runs the vision tower on the tape. Prompt slots lead the sequence.
    pub fn forward_image(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        image: &Matrix,
        injection: Option<Injection<'_>>,
    ) -> Result<ImageEncoding> {
        let emb = self.image_embedding(image)?;
        let layers = self.config.num_layers;
        let (start, k) = match &injection {
            Some(inj) => {
                self.check_injection(inj)?;
                self.check_layer_prompts(tape, inj)?;
                (inj.spec.layer_start, inj.spec.prompt_count)
            }
            None => (layers + 1, 0),
        };
        let key = PrefixKey::Image(start, image.data().iter().map(|x| x.to_bits()).collect());
        let prefix = self.prefix(VISION, key, emb, start.min(layers + 1));
        let mut x = tape.constant(prefix);
        let mut inserted = false;
        for layer in start.min(layers + 1)..=layers {
            if let Some(inj) = &injection {
                if inj.spec.injects(layer) {
                    let p = inj.layer_prompts[layer - inj.spec.layer_start];
                    x = if inserted {
                        let n = tape.value(x).rows();
                        let rest = tape.slice_rows(x, k, n - k);
                        tape.concat_rows(&[p, rest])
                    } else {
                        inserted = true;
                        tape.concat_rows(&[p, x])
                    };
                }
            }
            x = transformer::block(tape, bind, VISION, layer, &self.config, x);
        }
        let g = bind.var(tape, "vision.ln_post.g");
        let b = bind.var(tape, "vision.ln_post.b");
        let proj = bind.var(tape, "vision.proj");
        let cls = tape.slice_rows(x, k, 1);
        let cls = tape.layer_norm(cls, g, b);
        let cls = tape.matmul(cls, proj);
        if tape.value(cls).frobenius_norm() == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let feature = tape.normalize_rows(cls);
        let prompt_tokens = if k > 0 {
            let pt = tape.slice_rows(x, 0, k);
            let pt = tape.layer_norm(pt, g, b);
            Some(tape.matmul(pt, proj))
        } else {
            None
        };
        Ok(ImageEncoding {
            feature,
            prompt_tokens,
        })
    }

    /// Runs the text tower on the tape and returns the unit-norm `1 x C`
    /// feature of the end token. Prompt slots follow the start token.
    pub fn forward_text(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        content: &[TokenId],
        injection: Option<Injection<'_>>,
    ) -> Result<Var> {
        let layers = self.config.num_layers;
        let (start, k) = match &injection {
            Some(inj) => {
                self.check_injection(inj)?;
                self.check_layer_prompts(tape, inj)?;
                (inj.spec.layer_start, inj.spec.prompt_count)
            }
            None => (layers + 1, 0),
        };
        self.check_tokens(content, k)?;
        let emb = self.text_embedding(content)?;
        let key = PrefixKey::Text(start, content.to_vec());
        let prefix = self.prefix(TEXT, key, emb, start.min(layers + 1));
        let mut x = tape.constant(prefix);
        let mut inserted = false;
        for layer in start.min(layers + 1)..=layers {
            if let Some(inj) = &injection {
                if inj.spec.injects(layer) {
                    let p = inj.layer_prompts[layer - inj.spec.layer_start];
                    let n = tape.value(x).rows();
                    let head = tape.slice_rows(x, 0, 1);
                    let skip = if inserted { 1 + k } else { 1 };
                    let rest = tape.slice_rows(x, skip, n - skip);
                    inserted = true;
                    x = tape.concat_rows(&[head, p, rest]);
                }
            }
            x = transformer::block(tape, bind, TEXT, layer, &self.config, x);
        }
        let n = tape.value(x).rows();
        let eos = tape.slice_rows(x, n - 1, 1);
        let g = bind.var(tape, "text.ln_final.g");
        let b = bind.var(tape, "text.ln_final.b");
        let proj = bind.var(tape, "text.proj");
        let eos = tape.layer_norm(eos, g, b);
        let eos = tape.matmul(eos, proj);
        if tape.value(eos).frobenius_norm() == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(tape.normalize_rows(eos))
    }

    // ----- inference entry points ---------------------------------------------

    fn injected_views(&self, view: Option<&Matrix>, spec: &InjectionSpec) -> Result<Matrix> {
        let view = view.ok_or_else(|| {
            Error::Input("anti-noise prompts have not been projected".into())
        })?;
        spec.validate(self.config.num_layers)?;
        self.check_prompt_width(view)?;
        if view.rows() != spec.prompt_count {
            return Err(Error::dim(format!(
                "{} prompt tokens supplied but prompt_count is {}",
                view.rows(),
                spec.prompt_count
            )));
        }
        Ok(view.clone())
    }

    /// Unit-norm image feature with the projected image-view prompts
    /// injected at every layer of `spec`. No gradients are recorded.
    pub fn encode_image_prompted(
        &self,
        image: &Matrix,
        prompts: &AntiNoisePrompts,
        spec: &InjectionSpec,
    ) -> Result<Vec<f64>> {
        let view = self.injected_views(prompts.image_view.as_ref(), spec)?;
        let mut tape = Tape::new();
        let mut bind = Binder::inference(&self.backbone);
        let p = tape.constant(view);
        let per_layer = vec![p; spec.layer_end - spec.layer_start + 1];
        let enc = self.forward_image(
            &mut tape,
            &mut bind,
            image,
            Some(Injection {
                spec,
                layer_prompts: &per_layer,
            }),
        )?;
        Ok(tape.value(enc.feature).row(0).to_vec())
    }

    /// Unit-norm end-token feature of a class prompt with the projected
    /// text-view prompts injected.
    pub fn encode_text_prompted(
        &self,
        class_tokens: &[TokenId],
        prompts: &AntiNoisePrompts,
        spec: &InjectionSpec,
    ) -> Result<Vec<f64>> {
        let view = self.injected_views(prompts.text_view.as_ref(), spec)?;
        let mut tape = Tape::new();
        let mut bind = Binder::inference(&self.backbone);
        let p = tape.constant(view);
        let per_layer = vec![p; spec.layer_end - spec.layer_start + 1];
        let f = self.forward_text(
            &mut tape,
            &mut bind,
            class_tokens,
            Some(Injection {
                spec,
                layer_prompts: &per_layer,
            }),
        )?;
        Ok(tape.value(f).row(0).to_vec())
    }

    /// Frozen, prompt-free encoding of a sentence. Results are cached by
    /// token ids; the cache tolerates concurrent readers.
    pub fn encode_text_frozen(&self, sentence: &[TokenId]) -> Result<Vec<f64>> {
        if let Some(hit) = self.frozen_text.read().expect("cache lock").get(sentence) {
            return Ok(hit.clone());
        }
        let mut tape = Tape::new();
        let mut bind = Binder::inference(&self.backbone);
        let f = self.forward_text(&mut tape, &mut bind, sentence, None)?;
        let v = tape.value(f).row(0).to_vec();
        self.frozen_text
            .write()
            .expect("cache lock")
            .insert(sentence.to_vec(), v.clone());
        Ok(v)
    }

    /// Frozen encodings of many sentences, stacked as rows.
    pub fn encode_text_frozen_batch(&self, sentences: &[Vec<TokenId>]) -> Result<Matrix> {
        let rows = sentences
            .iter()
            .map(|s| self.encode_text_frozen(s))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }
}

/// Softmax over cosine similarities scaled by `1/temperature`.
pub fn zero_shot_classify(feature: &[f64], class_features: &Matrix, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature", "must be positive"));
    }
    if class_features.cols() != feature.len() {
        return Err(Error::dim(format!(
            "feature of length {} against class features of width {}",
            feature.len(),
            class_features.cols()
        )));
    }
    if class_features.rows() == 0 {
        return Err(Error::Input("no class features".into()));
    }
    let f = normalized(feature)?;
    let w = class_features.normalize_rows()?;
    let logits: Vec<f64> = w
        .iter_rows()
        .map(|row| crate::tensor::dot(&f, row) / temperature)
        .collect();
    Ok(crate::tensor::softmax(&logits))
}
