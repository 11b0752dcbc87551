//! Logit heads and the training objective.
//!
//! Four logit matrices are formed from unit-norm features: alignment
//! (`f_v·f_tᵀ`), robustness (`f_v·f_wᵀ`), weak-noise (`f_N·f_wᵀ`) and the
//! final mix `θ·ℓ_A + (1−θ)·ℓ_R` used for prediction. Training minimizes
//! `CE(ℓ_A/τ) + λ·L_sim + γ·L_WA`, where `γ` is computed from the value of
//! `ℓ_R` and enters the backward pass as a constant.
//!
//! Every loss is written once against the [`Tape`]; the plain-matrix
//! functions in this module evaluate the same graph on constants.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax, Matrix};

/// Distance used inside the weak alignment loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaDistance {
    Kl,
    L1,
    Mse,
    Cosine,
}

impl WaDistance {
    pub fn name(self) -> &'static str {
        match self {
            WaDistance::Kl => "kl",
            WaDistance::L1 => "l1",
            WaDistance::Mse => "mse",
            WaDistance::Cosine => "cosine",
        }
    }
}

/// How the weak-alignment weight `γ` is derived from `ℓ_R`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    VarianceAdaptive,
    Log,
    Mean,
    SoftmaxEntropy,
    Fixed,
}

impl GammaMode {
    pub fn name(self) -> &'static str {
        match self {
            GammaMode::VarianceAdaptive => "variance_adaptive",
            GammaMode::Log => "log",
            GammaMode::Mean => "mean",
            GammaMode::SoftmaxEntropy => "softmax_entropy",
            GammaMode::Fixed => "fixed",
        }
    }
}

/// Whether the standard deviation in `γ` spans the whole logit matrix or
/// is averaged over per-row values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdScope {
    Global,
    PerRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_sim: f64,
    pub theta: f64,
    pub eps0: f64,
    pub gamma_mode: GammaMode,
    /// Value of `γ` in [`GammaMode::Fixed`].
    pub gamma_fixed: f64,
    pub std_scope: StdScope,
    pub wa_distance: WaDistance,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sim: 1.0,
            theta: 0.7,
            eps0: 1e-8,
            gamma_mode: GammaMode::VarianceAdaptive,
            gamma_fixed: 1.0,
            std_scope: StdScope::Global,
            wa_distance: WaDistance::Kl,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sim >= 0.0 && self.lambda_sim.is_finite()) {
            return Err(Error::config("losses.lambda_sim", "must be a nonnegative number"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::config("losses.theta", "must lie in [0, 1]"));
        }
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(Error::config("losses.eps0", "must be a small positive number"));
        }
        if !(self.gamma_fixed >= 0.0 && self.gamma_fixed.is_finite()) {
            return Err(Error::config("losses.gamma_fixed", "must be a nonnegative number"));
        }
        Ok(())
    }
}

/// Per-step loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub sim: f64,
    pub wa: f64,
    pub gamma: f64,
    pub total: f64,
}

/// Features of one batch, as plain matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `(B, C)` prompted image features.
    pub f_v: Matrix,
    /// `(classes, C)` prompted text features.
    pub f_t: Matrix,
    /// `(classes, C)` weak-noise frozen text features.
    pub f_w: Matrix,
    /// `(B, C)` noise-resistant visual prompt prototypes.
    pub f_n: Matrix,
    /// Per image, the `(N_tok, C)` visual prompt token outputs.
    pub f_v_tokens: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogitBundle {
    pub l_a: Matrix,
    pub l_r: Matrix,
    pub l_w: Matrix,
    pub l_final: Matrix,
    pub theta: f64,
}

/// Features of one batch, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub f_v: Var,
    pub f_t: Var,
    pub f_w: Var,
    pub f_n: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LogitVars {
    pub l_a: Var,
    pub l_r: Var,
    pub l_w: Var,
    pub l_final: Var,
}

// ----- tape-level graph ------------------------------------------------------

/// Mean-pools prompt token outputs into one unit-norm `1 x C` row.
pub fn nrvpp_var(tape: &mut Tape, tokens: Var) -> Result<Var> {
    if tape.value(tokens).rows() == 0 {
        return Err(Error::Input("no visual prompt tokens to pool".into()));
    }
    let mean = tape.mean_rows(tokens);
    if tape.value(mean).frobenius_norm() == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(tape.normalize_rows(mean))
}

pub fn logits_var(tape: &mut Tape, fv: &FeatureVars, theta: f64) -> Result<LogitVars> {
    let (fvv, ftv, fwv, fnv) = (
        tape.value(fv.f_v),
        tape.value(fv.f_t),
        tape.value(fv.f_w),
        tape.value(fv.f_n),
    );
    let c = fvv.cols();
    if ftv.cols() != c || fwv.cols() != c || fnv.cols() != c {
        return Err(Error::dim("feature widths differ"));
    }
    if ftv.rows() != fwv.rows() {
        return Err(Error::dim(format!(
            "{} prompted text rows but {} weak-noise rows",
            ftv.rows(),
            fwv.rows()
        )));
    }
    if fvv.rows() != fnv.rows() {
        return Err(Error::dim(format!(
            "{} image rows but {} prototype rows",
            fvv.rows(),
            fnv.rows()
        )));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::config("losses.theta", "must lie in [0, 1]"));
    }
    let l_a = tape.matmul_t(fv.f_v, fv.f_t);
    let l_r = tape.matmul_t(fv.f_v, fv.f_w);
    let l_w = tape.matmul_t(fv.f_n, fv.f_w);
    let a = tape.scale(l_a, theta);
    let r = tape.scale(l_r, 1.0 - theta);
    let l_final = tape.add(a, r);
    Ok(LogitVars {
        l_a,
        l_r,
        l_w,
        l_final,
    })
}

fn check_logits(a: &Matrix, w: &Matrix) -> Result<()> {
    if a.shape() != w.shape() {
        return Err(Error::dim(format!(
            "logit shapes {:?} and {:?} differ",
            a.shape(),
            w.shape()
        )));
    }
    if !a.all_finite() || !w.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(())
}

/// Weak alignment loss between the row distributions of two logit
/// matrices (softmax at temperature 1), averaged over rows.
pub fn waloss_var(tape: &mut Tape, l_a: Var, l_w: Var, distance: WaDistance) -> Result<Var> {
    check_logits(tape.value(l_a), tape.value(l_w))?;
    let rows = tape.value(l_a).rows() as f64;
    Ok(match distance {
        WaDistance::Kl => {
            let p = tape.softmax(l_a);
            let log_p = tape.log_softmax(l_a);
            let log_q = tape.log_softmax(l_w);
            let diff = tape.sub(log_p, log_q);
            let terms = tape.mul(p, diff);
            let s = tape.sum_all(terms);
            tape.scale(s, 1.0 / rows)
        }
        WaDistance::L1 => {
            let p = tape.softmax(l_a);
            let q = tape.softmax(l_w);
            let d = tape.sub(p, q);
            let d = tape.abs(d);
            tape.mean_all(d)
        }
        WaDistance::Mse => {
            let p = tape.softmax(l_a);
            let q = tape.softmax(l_w);
            let d = tape.sub(p, q);
            let d = tape.mul(d, d);
            tape.mean_all(d)
        }
        WaDistance::Cosine => {
            let p = tape.softmax(l_a);
            let q = tape.softmax(l_w);
            let p = tape.normalize_rows(p);
            let q = tape.normalize_rows(q);
            let cos = tape.mul(p, q);
            let cos = tape.row_sum(cos);
            let mean = tape.mean_all(cos);
            let neg = tape.scale(mean, -1.0);
            tape.add_const(neg, 1.0)
        }
    })
}

/// Mean of `1 − cos` between paired rows.
pub fn sim_loss_var(tape: &mut Tape, f_v: Var, f_t_assigned: Var) -> Result<Var> {
    if tape.value(f_v).shape() != tape.value(f_t_assigned).shape() {
        return Err(Error::dim(format!(
            "image features {:?} vs assigned text features {:?}",
            tape.value(f_v).shape(),
            tape.value(f_t_assigned).shape()
        )));
    }
    let a = tape.normalize_rows(f_v);
    let b = tape.normalize_rows(f_t_assigned);
    let cos = tape.mul(a, b);
    let cos = tape.row_sum(cos);
    let mean = tape.mean_all(cos);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_const(neg, 1.0))
}

/// Mean negative log-likelihood of `labels` under `softmax(ℓ_A/τ)`.
pub fn ce_loss_var(tape: &mut Tape, l_a: Var, labels: &[usize], temperature: f64) -> Result<Var> {
    let (rows, classes) = tape.value(l_a).shape();
    if labels.len() != rows {
        return Err(Error::dim(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!(
            "label {bad} outside [0, {classes})"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("encoder.temperature", "must be positive"));
    }
    let scaled = tape.scale(l_a, 1.0 / temperature);
    let log_p = tape.log_softmax(scaled);
    let picked = tape.gather(log_p, labels);
    let mean = tape.mean_all(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Builds `CE + λ·L_sim + γ·L_WA` on the tape.
pub fn total_loss_var(
    tape: &mut Tape,
    features: &FeatureVars,
    labels: &[usize],
    weights: &LossWeights,
    temperature: f64,
) -> Result<(Var, LossReport, LogitVars)> {
    weights.validate()?;
    let logits = logits_var(tape, features, weights.theta)?;
    let ce = ce_loss_var(tape, logits.l_a, labels, temperature)?;
    let assigned = {
        let ft = tape.value(features.f_t).clone();
        // gather rows of f_t by label through a one-hot product so the
        // gradient reaches f_t
        let mut onehot = Matrix::zeros(labels.len(), ft.rows());
        for (i, &l) in labels.iter().enumerate() {
            onehot.set(i, l, 1.0);
        }
        let oh = tape.constant(onehot);
        tape.matmul(oh, features.f_t)
    };
    let sim = sim_loss_var(tape, features.f_v, assigned)?;
    let wa = waloss_var(tape, logits.l_a, logits.l_w, weights.wa_distance)?;
    let g = gamma(tape.value(logits.l_r), weights.gamma_mode, weights.eps0, weights)?;

    let sim_term = tape.scale(sim, weights.lambda_sim);
    let wa_term = tape.scale(wa, g);
    let partial = tape.add(ce, sim_term);
    let total = tape.add(partial, wa_term);
    let report = LossReport {
        ce: tape.value(ce).item(),
        sim: tape.value(sim).item(),
        wa: tape.value(wa).item(),
        gamma: g,
        total: tape.value(total).item(),
    };
    Ok((total, report, logits))
}

// ----- plain-matrix entry points ---------------------------------------------

/// Mean-pools each image's prompt tokens and unit-normalizes the result.
pub fn compute_nrvpp(f_v_tokens: &[Matrix]) -> Result<Matrix> {
    let mut rows = Vec::with_capacity(f_v_tokens.len());
    for tokens in f_v_tokens {
        let mut tape = Tape::new();
        let t = tape.constant(tokens.clone());
        let f = nrvpp_var(&mut tape, t)?;
        rows.push(tape.value(f).row(0).to_vec());
    }
    Matrix::from_rows(&rows)
}

pub fn compute_logits(fb: &FeatureBundle, theta: f64) -> Result<LogitBundle> {
    let mut tape = Tape::new();
    let fv = FeatureVars {
        f_v: tape.constant(fb.f_v.clone()),
        f_t: tape.constant(fb.f_t.clone()),
        f_w: tape.constant(fb.f_w.clone()),
        f_n: tape.constant(fb.f_n.clone()),
    };
    let l = logits_var(&mut tape, &fv, theta)?;
    Ok(LogitBundle {
        l_a: tape.value(l.l_a).clone(),
        l_r: tape.value(l.l_r).clone(),
        l_w: tape.value(l.l_w).clone(),
        l_final: tape.value(l.l_final).clone(),
        theta,
    })
}

pub fn waloss(l_a: &Matrix, l_w: &Matrix, distance: WaDistance) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(l_a.clone());
    let w = tape.constant(l_w.clone());
    let v = waloss_var(&mut tape, a, w, distance)?;
    Ok(tape.value(v).item())
}

pub fn sim_loss(f_v: &Matrix, f_t_assigned: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(f_v.clone());
    let b = tape.constant(f_t_assigned.clone());
    let v = sim_loss_var(&mut tape, a, b)?;
    Ok(tape.value(v).item())
}

pub fn ce_loss(l_a: &Matrix, labels: &[usize], temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(l_a.clone());
    let v = ce_loss_var(&mut tape, a, labels, temperature)?;
    Ok(tape.value(v).item())
}

pub fn total_loss(fb: &FeatureBundle, labels: &[usize], weights: &LossWeights, temperature: f64) -> Result<LossReport> {
    let mut tape = Tape::new();
    let fv = FeatureVars {
        f_v: tape.constant(fb.f_v.clone()),
        f_t: tape.constant(fb.f_t.clone()),
        f_w: tape.constant(fb.f_w.clone()),
        f_n: tape.constant(fb.f_n.clone()),
    };
    let (_, report, _) = total_loss_var(&mut tape, &fv, labels, weights, temperature)?;
    Ok(report)
}

fn population_std(values: &[f64]) -> f64 {
    if values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn logit_std(l_r: &Matrix, scope: StdScope) -> f64 {
    match scope {
        StdScope::Global => population_std(l_r.data()),
        StdScope::PerRow => {
            l_r.iter_rows().map(population_std).sum::<f64>() / l_r.rows() as f64
        }
    }
}

/// Weight of the weak alignment loss. Always finite and positive (or the
/// configured fixed value).
///
/// * variance-adaptive: `1 / (std·n + ε₀)`
/// * log: `1 / (ln(std + 1.1)·n)`
/// * mean: `1 / ((std / (|mean| + ε₀))·n + ε₀)`
/// * softmax-entropy: `1 / (H(softmax(ℓ_R))·n + ε₀)` over the flattened matrix
///
/// where `n` is the element count of `ℓ_R`.
pub fn gamma(l_r: &Matrix, mode: GammaMode, eps0: f64, weights: &LossWeights) -> Result<f64> {
    if l_r.is_empty() {
        return Err(Error::Input("empty robustness logits".into()));
    }
    if !l_r.all_finite() {
        return Err(Error::Numeric("non-finite robustness logits".into()));
    }
    let n = l_r.len() as f64;
    let std = || logit_std(l_r, weights.std_scope);
    let g = match mode {
        GammaMode::VarianceAdaptive => 1.0 / (std() * n + eps0),
        GammaMode::Log => 1.0 / ((std() + 1.1).ln() * n),
        GammaMode::Mean => {
            let mean = l_r.sum() / n;
            if mean.abs() < eps0 {
                log::warn!("mean-normalized gamma: |mean(l_R)| = {:e} is below eps0", mean.abs());
            }
            1.0 / ((std() / (mean.abs() + eps0)) * n + eps0)
        }
        GammaMode::SoftmaxEntropy => {
            let p = softmax(l_r.data());
            let h: f64 = -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            1.0 / (h.max(0.0) * n + eps0)
        }
        GammaMode::Fixed => weights.gamma_fixed,
    };
    if !g.is_finite() {
        return Err(Error::Numeric(format!("gamma evaluated to {g}")));
    }
    Ok(g)
}
