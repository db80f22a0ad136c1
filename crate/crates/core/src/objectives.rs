//! Similarity logits, symmetric contrastive loss, and the prior-guided
//! semantic loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::prior::PriorMatrix;

pub const INITIAL_TEMPERATURE: f64 = 0.07;
pub const MIN_TEMPERATURE: f64 = 0.01;
pub const SEMANTIC_TEMPERATURE: f64 = 0.07;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the semantic term in the total loss.
    pub lambda: f64,
    /// Share of the MSE term inside the semantic loss.
    pub alpha_s: f64,
    /// Temperature of the semantic softmaxes.
    pub tau2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.2,
            alpha_s: 0.6,
            tau2: SEMANTIC_TEMPERATURE,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Validation(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha_s) {
            return Err(Error::Validation(format!("alpha_s must lie in [0, 1], got {}", self.alpha_s)));
        }
        if !(self.tau2 > 0.0 && self.tau2.is_finite()) {
            return Err(Error::Validation(format!("tau2 must be positive, got {}", self.tau2)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_clip: f64,
    pub l_mse: f64,
    pub l_kl: f64,
    pub l_semantic: f64,
    pub l_total: f64,
    pub tau: f64,
}

/// Row-normalised image and text embeddings and their cosine matrix.
#[derive(Clone, Copy, Debug)]
pub struct BatchEmbeddings {
    pub image: Var,
    pub text: Var,
    pub cosine: Var,
}

impl BatchEmbeddings {
    pub fn new(tape: &mut Tape, image: Var, text: Var) -> Result<Self> {
        let (bi, di) = tape.value(image).shape();
        let (bt, dt) = tape.value(text).shape();
        if (bi, di) != (bt, dt) {
            return Err(Error::dim("embeddings", format!("image {bi}x{di} vs text {bt}x{dt}")));
        }
        let image = tape.l2_normalize(image, NORM_EPS)?;
        let text = tape.l2_normalize(text, NORM_EPS)?;
        let text_t = tape.transpose(text)?;
        let cosine = tape.matmul(image, text_t)?;
        Ok(BatchEmbeddings { image, text, cosine })
    }
}

/// `max(exp(rho), MIN_TEMPERATURE)`; the floor blocks the gradient.
pub fn temperature(tape: &mut Tape, log_tau: Var) -> Result<Var> {
    let tau = tape.exp(log_tau)?;
    tape.clamp(tau, MIN_TEMPERATURE, f64::INFINITY)
}

pub fn similarity_logits(tape: &mut Tape, cosine: Var, tau: Var) -> Result<Var> {
    tape.div_scalar(cosine, tau)
}

/// Mean of the row-wise and column-wise cross-entropies against the diagonal.
pub fn clip_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (r, c) = tape.value(logits).shape();
    if r != c || r == 0 {
        return Err(Error::dim("clip_loss", format!("logits must be square and non-empty, got {r}x{c}")));
    }
    let rows = tape.log_softmax_rows(logits)?;
    let row_diag = tape.trace(rows)?;
    let transposed = tape.transpose(logits)?;
    let cols = tape.log_softmax_rows(transposed)?;
    let col_diag = tape.trace(cols)?;
    let both = tape.add(row_diag, col_diag)?;
    tape.scale(both, -1.0 / (2.0 * r as f64))
}

/// Returns `(mse, kl, semantic)` handles. The prior is a constant.
pub fn semantic_loss(
    tape: &mut Tape,
    cosine: Var,
    prior: &PriorMatrix,
    tau2: f64,
    alpha_s: f64,
) -> Result<(Var, Var, Var)> {
    let b = tape.value(cosine).rows();
    if tape.value(cosine).shape() != (prior.size(), prior.size()) {
        return Err(Error::dim(
            "semantic_loss",
            format!("cosine {:?} vs prior {}x{}", tape.value(cosine).shape(), prior.size(), prior.size()),
        ));
    }
    if tau2.is_nan() || tau2 <= 0.0 || !(0.0..=1.0).contains(&alpha_s) {
        return Err(Error::InvalidArgument(format!(
            "semantic loss needs tau2 > 0 and alpha_s in [0, 1], got {tau2}, {alpha_s}"
        )));
    }
    let target = tape.constant(prior.matrix().clone())?;
    let clamped = tape.clamp(cosine, 0.0, 1.0)?;
    let diff = tape.sub(clamped, target)?;
    let sq = tape.mul(diff, diff)?;
    let sq_sum = tape.sum(sq)?;
    let mse = tape.scale(sq_sum, 1.0 / (b * b) as f64)?;

    let scaled = tape.scale(cosine, 1.0 / tau2)?;
    let log_p = tape.log_softmax_rows(scaled)?;
    let p = tape.row_softmax(scaled)?;
    let mut log_q = prior.matrix().map(|v| v / tau2);
    for r in 0..b {
        crate::autodiff::log_softmax_in_place(log_q.row_mut(r));
    }
    let log_q = tape.constant(log_q)?;
    let log_ratio = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, log_ratio)?;
    let kl_sum = tape.sum(terms)?;
    let kl = tape.scale(kl_sum, 1.0 / b as f64)?;

    let a = tape.scale(mse, alpha_s)?;
    let k = tape.scale(kl, 1.0 - alpha_s)?;
    let semantic = tape.add(a, k)?;
    Ok((mse, kl, semantic))
}

/// Loss handles produced by [`total_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub clip: Var,
    pub semantic: Option<(Var, Var, Var)>,
    pub total: Var,
    pub tau: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        let (l_mse, l_kl, l_semantic) = self.semantic.map_or((0.0, 0.0, 0.0), |(m, k, s)| (v(m), v(k), v(s)));
        LossBreakdown {
            l_clip: v(self.clip),
            l_mse,
            l_kl,
            l_semantic,
            l_total: v(self.total),
            tau: v(self.tau),
        }
    }
}

/// `clip + lambda * semantic`. With `lambda == 0` the semantic branch is not
/// built and `prior` may be `None`.
pub fn total_loss(
    tape: &mut Tape,
    emb: &BatchEmbeddings,
    prior: Option<&PriorMatrix>,
    log_tau: Var,
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let tau = temperature(tape, log_tau)?;
    let logits = similarity_logits(tape, emb.cosine, tau)?;
    let clip = clip_loss(tape, logits)?;
    if weights.lambda == 0.0 {
        return Ok(LossVars {
            clip,
            semantic: None,
            total: clip,
            tau,
        });
    }
    let prior = prior.ok_or_else(|| Error::InvalidArgument("semantic loss requested without a prior".into()))?;
    let sem = semantic_loss(tape, emb.cosine, prior, weights.tau2, weights.alpha_s)?;
    let weighted = tape.scale(sem.2, weights.lambda)?;
    let total = tape.add(clip, weighted)?;
    Ok(LossVars {
        clip,
        semantic: Some(sem),
        total,
        tau,
    })
}

/// Plain-float symmetric contrastive loss, used for reporting.
pub fn clip_loss_value(logits: &Tensor) -> f64 {
    let n = logits.rows();
    let mut total = 0.0;
    let mut rows = logits.clone();
    let mut cols = logits.transpose();
    for i in 0..n {
        crate::autodiff::log_softmax_in_place(rows.row_mut(i));
        crate::autodiff::log_softmax_in_place(cols.row_mut(i));
        total += rows.get(i, i) + cols.get(i, i);
    }
    -total / (2.0 * n as f64)
}
