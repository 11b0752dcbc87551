//! The prompt-tuned model: a frozen dual encoder plus the trainable prompt
//! state, wired together on the autograd tape.
//!
//! Trainable state is the learnable prompt tokens, the two projection heads
//! and one learned position offset per injected layer and tower. The
//! clustered noise prompts are stored next to them as a buffer.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::autograd::{Gradients, Tape, Var};
use crate::encoder::{ClassPrompt, DualEncoder, Injection, InjectionSpec};
use crate::error::{Error, Result};
use crate::losses::{self, FeatureVars, LogitBundle, LossReport, LossWeights};
use crate::params::{gaussian, Binder, ParamRole, ParamStore};
use crate::prompting::{
    build_anti_noise_prompts, paired_noise, project_prompts, Affine, AntiNoisePrompts,
    LearnablePrompts, ProjectionHeads,
};
use crate::seed;
use crate::tensor::Matrix;

pub const PROMPT_TOKENS: &str = "prompt.tokens";
pub const PROMPT_NOISE: &str = "prompt.noise";
pub const TO_IMAGE_W: &str = "prompt.to_image.w";
pub const TO_IMAGE_B: &str = "prompt.to_image.b";
pub const TO_TEXT_W: &str = "prompt.to_text.w";
pub const TO_TEXT_B: &str = "prompt.to_text.b";

pub fn vision_pos_name(layer: usize) -> String {
    format!("vision.prompt_pos.{layer}")
}

pub fn text_pos_name(layer: usize) -> String {
    format!("text.prompt_pos.{layer}")
}

/// Per-layer prompt variables on a tape.
#[derive(Clone, Debug)]
pub struct LayerPrompts {
    pub combined: Var,
    pub image: Vec<Var>,
    pub text: Vec<Var>,
}

/// Result of one forward/backward pass over a batch.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub report: LossReport,
    pub logits: LogitBundle,
    /// Gradient of the total loss for every trainable entry, in store order.
    pub grads: Vec<(String, Matrix)>,
}

/// Class-side features used for prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassFeatures {
    /// `(classes, C)` prompted text features.
    pub f_t: Matrix,
    /// `(classes, C)` weak-noise frozen text features.
    pub f_w: Matrix,
}

#[derive(Clone, Debug)]
pub struct AnPromptModel {
    encoder: Arc<DualEncoder>,
    spec: InjectionSpec,
    epsilon: f64,
    state: ParamStore,
}

impl AnPromptModel {
    /// Fresh prompt state: Gaussian prompt tokens, identity heads, zero
    /// positions and zero noise prompts.
    pub fn new(
        encoder: Arc<DualEncoder>,
        spec: InjectionSpec,
        epsilon: f64,
        init_scale: f64,
        init_seed: u64,
    ) -> Result<Self> {
        let c = encoder.config().embed_dim;
        let k = spec.prompt_count;
        let mut rng = seed::rng(&[init_seed, 0x50]);
        let pc = LearnablePrompts::init(k, c, init_scale, &mut rng);
        let mut state = ParamStore::new();
        let t = ParamRole::Trainable;
        state.insert(PROMPT_TOKENS, pc.tokens, t);
        state.insert(PROMPT_NOISE, Matrix::zeros(k, c), ParamRole::Buffer);
        state.insert(TO_IMAGE_W, Matrix::identity(c), t);
        state.insert(TO_IMAGE_B, Matrix::zeros(1, c), t);
        state.insert(TO_TEXT_W, Matrix::identity(c), t);
        state.insert(TO_TEXT_B, Matrix::zeros(1, c), t);
        for l in spec.layers() {
            state.insert(vision_pos_name(l), Matrix::zeros(k, c), t);
        }
        for l in spec.layers() {
            state.insert(text_pos_name(l), Matrix::zeros(k, c), t);
        }
        Self::from_parts(encoder, spec, epsilon, state)
    }

    /// Reassembles a model from saved state, checking names and shapes.
    pub fn from_parts(
        encoder: Arc<DualEncoder>,
        spec: InjectionSpec,
        epsilon: f64,
        state: ParamStore,
    ) -> Result<Self> {
        spec.validate(encoder.config().num_layers)?;
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::config("prompts.epsilon", "must be a nonnegative number"));
        }
        let c = encoder.config().embed_dim;
        let k = spec.prompt_count;
        let mut expected = vec![
            (PROMPT_TOKENS.to_string(), (k, c)),
            (PROMPT_NOISE.to_string(), (k, c)),
            (TO_IMAGE_W.to_string(), (c, c)),
            (TO_IMAGE_B.to_string(), (1, c)),
            (TO_TEXT_W.to_string(), (c, c)),
            (TO_TEXT_B.to_string(), (1, c)),
        ];
        for l in spec.layers() {
            expected.push((vision_pos_name(l), (k, c)));
            expected.push((text_pos_name(l), (k, c)));
        }
        for (name, shape) in &expected {
            let m = state.get(name)?;
            if m.shape() != *shape {
                return Err(Error::dim(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
        }
        if state.len() != expected.len() {
            return Err(Error::Input(format!(
                "prompt state has {} entries, expected {}",
                state.len(),
                expected.len()
            )));
        }
        Ok(Self {
            encoder,
            spec,
            epsilon,
            state,
        })
    }

    pub fn encoder(&self) -> &Arc<DualEncoder> {
        &self.encoder
    }

    pub fn spec(&self) -> &InjectionSpec {
        &self.spec
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn state(&self) -> &ParamStore {
        &self.state
    }

    /// Mutable access to trainable and buffer entries. The frozen backbone
    /// lives in the encoder and cannot be reached from here.
    pub fn state_mut(&mut self) -> &mut ParamStore {
        &mut self.state
    }

    pub fn learnable(&self) -> LearnablePrompts {
        LearnablePrompts {
            tokens: self.state.get(PROMPT_TOKENS).expect("registered").clone(),
            init_scale: 0.0,
        }
    }

    pub fn noise_prompts(&self) -> &Matrix {
        self.state.get(PROMPT_NOISE).expect("registered")
    }

    pub fn heads(&self) -> ProjectionHeads {
        let get = |n: &str| self.state.get(n).expect("registered").clone();
        ProjectionHeads {
            to_image: Affine {
                weight: get(TO_IMAGE_W),
                bias: get(TO_IMAGE_B),
            },
            to_text: Affine {
                weight: get(TO_TEXT_W),
                bias: get(TO_TEXT_B),
            },
        }
    }

    /// Pairs fresh cluster centers with the learnable tokens and stores
    /// them as the noise buffer.
    pub fn set_noise_prompts(&mut self, centers: &Matrix) -> Result<()> {
        let paired = paired_noise(&self.learnable().tokens, centers)?;
        *self.state.get_mut(PROMPT_NOISE)? = paired;
        Ok(())
    }

    /// Combined and projected anti-noise prompts, computed off the tape.
    pub fn anti_noise_prompts(&self) -> Result<AntiNoisePrompts> {
        let pa = build_anti_noise_prompts(&self.learnable(), self.noise_prompts(), self.epsilon)?;
        project_prompts(&pa, &self.heads())
    }

    /// Places the per-layer prompts of both towers on the tape.
    pub fn layer_prompts(&self, tape: &mut Tape, bind: &mut Binder) -> LayerPrompts {
        let pc = bind.var(tape, PROMPT_TOKENS);
        let pw = bind.var(tape, PROMPT_NOISE);
        let noise = tape.scale(pw, self.epsilon);
        let combined = tape.add(pc, noise);
        let (iw, ib) = (bind.var(tape, TO_IMAGE_W), bind.var(tape, TO_IMAGE_B));
        let (tw, tb) = (bind.var(tape, TO_TEXT_W), bind.var(tape, TO_TEXT_B));
        let image_view = tape.linear(combined, iw, ib);
        let text_view = tape.linear(combined, tw, tb);
        let mut image = Vec::new();
        let mut text = Vec::new();
        for l in self.spec.layers() {
            let vp = bind.var(tape, &vision_pos_name(l));
            image.push(tape.add(image_view, vp));
            let tp = bind.var(tape, &text_pos_name(l));
            text.push(tape.add(text_view, tp));
        }
        LayerPrompts {
            combined,
            image,
            text,
        }
    }

    /// Prompted image features `(B, C)` and prototypes `(B, C)`.
    pub fn encode_images_on(
        &self,
        tape: &mut Tape,
        lp: &LayerPrompts,
        images: &[&Matrix],
    ) -> Result<(Var, Var)> {
        if images.is_empty() {
            return Err(Error::Input("empty image batch".into()));
        }
        let mut bb = Binder::inference(self.encoder.backbone());
        let injection = Injection {
            spec: &self.spec,
            layer_prompts: &lp.image,
        };
        let mut feats = Vec::with_capacity(images.len());
        let mut protos = Vec::with_capacity(images.len());
        for image in images {
            let enc = self.encoder.forward_image(tape, &mut bb, image, Some(injection))?;
            let tokens = enc.prompt_tokens.expect("prompts are always injected");
            feats.push(enc.feature);
            protos.push(losses::nrvpp_var(tape, tokens)?);
        }
        Ok((tape.concat_rows(&feats), tape.concat_rows(&protos)))
    }

    /// Prompted text features `(classes, C)`.
    pub fn encode_classes_on(
        &self,
        tape: &mut Tape,
        lp: &LayerPrompts,
        classes: &[ClassPrompt],
    ) -> Result<Var> {
        if classes.is_empty() {
            return Err(Error::Input("no classes to encode".into()));
        }
        let mut bb = Binder::inference(self.encoder.backbone());
        let injection = Injection {
            spec: &self.spec,
            layer_prompts: &lp.text,
        };
        let rows = classes
            .iter()
            .map(|c| {
                self.encoder
                    .forward_text(tape, &mut bb, &c.content(), Some(injection))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat_rows(&rows))
    }

    /// Forward pass, losses and gradients for one batch. `labels` index
    /// into `classes`, whose weak-noise features are the rows of `f_w`.
    pub fn step(
        &self,
        images: &[&Matrix],
        labels: &[usize],
        classes: &[ClassPrompt],
        f_w: &Matrix,
        weights: &LossWeights,
    ) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let mut bind = Binder::new(&self.state);
        let lp = self.layer_prompts(&mut tape, &mut bind);
        let (f_v, f_n) = self.encode_images_on(&mut tape, &lp, images)?;
        let f_t = self.encode_classes_on(&mut tape, &lp, classes)?;
        let f_w = tape.constant(f_w.clone());
        let fv = FeatureVars { f_v, f_t, f_w, f_n };
        let temperature = self.encoder.config().temperature;
        let (total, report, lv) = losses::total_loss_var(&mut tape, &fv, labels, weights, temperature)?;
        let grads: Gradients = tape.backward(total);
        let grads = bind
            .trainable_vars()
            .into_iter()
            .map(|(name, v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(tape.value(v).rows(), tape.value(v).cols()));
                (name, g)
            })
            .collect();
        let logits = LogitBundle {
            l_a: tape.value(lv.l_a).clone(),
            l_r: tape.value(lv.l_r).clone(),
            l_w: tape.value(lv.l_w).clone(),
            l_final: tape.value(lv.l_final).clone(),
            theta: weights.theta,
        };
        Ok(StepOutput {
            report,
            logits,
            grads,
        })
    }

    fn inference_prompts(&self, tape: &mut Tape) -> LayerPrompts {
        let mut bind = Binder::inference(&self.state);
        self.layer_prompts(tape, &mut bind)
    }

    /// Unit-norm prompted image features, one row per image. Images are
    /// processed in parallel unless deterministic mode is forced; the row
    /// order is always the input order.
    pub fn image_features(&self, images: &[&Matrix]) -> Result<Matrix> {
        let one = |image: &&Matrix| -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let lp = self.inference_prompts(&mut tape);
            let (f, _) = self.encode_images_on(&mut tape, &lp, &[*image])?;
            Ok(tape.value(f).row(0).to_vec())
        };
        let rows: Vec<Vec<f64>> = if seed::parallel_enabled() {
            images.par_iter().map(one).collect::<Result<_>>()?
        } else {
            images.iter().map(one).collect::<Result<_>>()?
        };
        Matrix::from_rows(&rows)
    }

    /// Unit-norm prompted text features, one row per class.
    pub fn text_features(&self, classes: &[ClassPrompt]) -> Result<Matrix> {
        let one = |class: &ClassPrompt| -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let lp = self.inference_prompts(&mut tape);
            let f = self.encode_classes_on(&mut tape, &lp, std::slice::from_ref(class))?;
            Ok(tape.value(f).row(0).to_vec())
        };
        let rows: Vec<Vec<f64>> = if seed::parallel_enabled() {
            classes.par_iter().map(one).collect::<Result<_>>()?
        } else {
            classes.iter().map(one).collect::<Result<_>>()?
        };
        Matrix::from_rows(&rows)
    }

    /// `θ·f_v·f_tᵀ + (1−θ)·f_v·f_wᵀ` for precomputed image features.
    pub fn final_logits(&self, f_v: &Matrix, classes: &ClassFeatures, theta: f64) -> Result<Matrix> {
        if classes.f_t.shape() != classes.f_w.shape() || f_v.cols() != classes.f_t.cols() {
            return Err(Error::dim("image and class feature shapes disagree"));
        }
        let l_a = f_v.matmul_t(&classes.f_t);
        let l_r = f_v.matmul_t(&classes.f_w);
        Ok(l_a.zip_map(&l_r, |a, r| theta * a + (1.0 - theta) * r))
    }

    /// Argmax of the final logits for each image.
    pub fn predict(&self, f_v: &Matrix, classes: &ClassFeatures, theta: f64) -> Result<Vec<usize>> {
        let logits = self.final_logits(f_v, classes, theta)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Random perturbation of all trainable entries, used to move tests away
/// from the symmetric initial point.
pub fn jitter_trainable<R: Rng>(model: &mut AnPromptModel, scale: f64, rng: &mut R) {
    let names = model.state().names_with_role(ParamRole::Trainable);
    for name in names {
        let m = model.state_mut().get_mut(&name).expect("listed");
        let noise = gaussian(m.rows(), m.cols(), scale, rng);
        m.add_assign(&noise);
    }
}
