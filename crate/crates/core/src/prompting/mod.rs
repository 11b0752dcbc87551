//! Anti-noise prompt construction.
//!
//! Weak-noise text features are clustered into `K` noise prompts, each
//! paired one-to-one with a learnable prompt token, added at strength `ε`
//! and mapped into the image and text encoders by two affine heads.

mod assignment;
mod kmeans;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use assignment::min_cost_assignment;
pub use kmeans::{kmeans_cluster, KMeansParams, NoisePromptBank};

use crate::error::{Error, Result};
use crate::params::gaussian;
use crate::tensor::Matrix;

/// Default standard deviation of learnable prompt initialization.
pub const PROMPT_INIT_SCALE: f64 = 0.02;

/// Trainable prompt tokens `P_c`, shape `(K, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnablePrompts {
    pub tokens: Matrix,
    pub init_scale: f64,
}

impl LearnablePrompts {
    pub fn init<R: Rng>(count: usize, width: usize, init_scale: f64, rng: &mut R) -> Self {
        Self {
            tokens: gaussian(count, width, init_scale, rng),
            init_scale,
        }
    }

    pub fn count(&self) -> usize {
        self.tokens.rows()
    }
}

/// `P_a = P_c + ε·P_w`, optionally with its per-modality projections.
#[derive(Clone, Debug, PartialEq)]
pub struct AntiNoisePrompts {
    pub combined: Matrix,
    pub epsilon: f64,
    pub image_view: Option<Matrix>,
    pub text_view: Option<Matrix>,
}

impl AntiNoisePrompts {
    /// Prompts that are already in encoder space and shared by both towers.
    pub fn from_views(view: Matrix) -> Self {
        Self {
            combined: view.clone(),
            epsilon: 0.0,
            image_view: Some(view.clone()),
            text_view: Some(view),
        }
    }
}

/// Row-wise affine map `x ↦ x·W + b` with `W` of shape `(in, out)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Affine {
    pub fn identity(width: usize) -> Self {
        Self {
            weight: Matrix::identity(width),
            bias: Matrix::zeros(1, width),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.weight.rows() {
            return Err(Error::dim(format!(
                "affine map expects width {} but got {}",
                self.weight.rows(),
                x.cols()
            )));
        }
        let mut y = x.matmul(&self.weight);
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(self.bias.row(0)) {
                *v += b;
            }
        }
        Ok(y)
    }
}

/// The two modality-specific heads, shared across injected layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHeads {
    pub to_image: Affine,
    pub to_text: Affine,
}

impl ProjectionHeads {
    pub fn identity(width: usize) -> Self {
        Self {
            to_image: Affine::identity(width),
            to_text: Affine::identity(width),
        }
    }
}

/// Combines learnable prompts with (already paired) noise prompts.
pub fn build_anti_noise_prompts(
    learnable: &LearnablePrompts,
    noise: &Matrix,
    epsilon: f64,
) -> Result<AntiNoisePrompts> {
    if learnable.tokens.shape() != noise.shape() {
        return Err(Error::dim(format!(
            "learnable prompts are {:?} but noise prompts are {:?}",
            learnable.tokens.shape(),
            noise.shape()
        )));
    }
    let scaled = noise.scaled(epsilon);
    let combined = learnable.tokens.zip_map(&scaled, |p, w| p + w);
    Ok(AntiNoisePrompts {
        combined,
        epsilon,
        image_view: None,
        text_view: None,
    })
}

/// Fills the image and text views of `prompts`.
pub fn project_prompts(prompts: &AntiNoisePrompts, heads: &ProjectionHeads) -> Result<AntiNoisePrompts> {
    Ok(AntiNoisePrompts {
        image_view: Some(heads.to_image.apply(&prompts.combined)?),
        text_view: Some(heads.to_text.apply(&prompts.combined)?),
        ..prompts.clone()
    })
}

/// Pairs each learnable prompt row with a distinct noise prompt row by
/// minimum total Euclidean distance. `perm[i]` is the noise row paired with
/// learnable row `i`.
pub fn pair_rows(learnable: &Matrix, noise: &Matrix) -> Result<Vec<usize>> {
    if learnable.shape() != noise.shape() {
        return Err(Error::dim(format!(
            "cannot pair {:?} prompts with {:?} noise prompts",
            learnable.shape(),
            noise.shape()
        )));
    }
    let k = learnable.rows();
    let mut cost = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let d: f64 = learnable
                .row(i)
                .iter()
                .zip(noise.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            cost.set(i, j, d.sqrt());
        }
    }
    Ok(min_cost_assignment(&cost))
}

/// Noise prompts reordered so that row `i` pairs with learnable row `i`.
pub fn paired_noise(learnable: &Matrix, noise: &Matrix) -> Result<Matrix> {
    let perm = pair_rows(learnable, noise)?;
    Ok(noise.select_rows(&perm))
}
