//! Loss terms for the generator, discriminator and classifier.
//!
//! Adversarial and classification terms are sums over the batch; callers
//! divide by the batch size. The content loss is already a mean.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Probabilities must lie in [0, 1]; anything else (including NaN) means an
/// upstream bug, so it is reported instead of clamped.
fn check_probs(context: &str, p: &Tensor) -> Result<()> {
    if let Some((index, &value)) = p.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::NonFinite {
            context: format!("{context}: probability outside [0, 1]"),
            index,
            value,
        });
    }
    Ok(())
}

fn neg_log(p: &Tensor) -> Tensor {
    p.clamp_min(PROB_FLOOR).log().neg()
}

fn check_column(op: &'static str, p: &Tensor) -> Result<()> {
    let s = p.shape();
    if s.len() != 2 || s[1] != 1 {
        return Err(Error::invalid_shape(op, s, "expected [N, 1]"));
    }
    Ok(())
}

/// Mean squared error over every element of the batch.
pub fn content_mse(sr: &Tensor, hr: &Tensor) -> Result<Tensor> {
    if sr.shape() != hr.shape() {
        return Err(Error::ShapeMismatch {
            op: "content_mse",
            lhs: sr.shape().to_vec(),
            rhs: hr.shape().to_vec(),
        });
    }
    Ok(sr.sub(hr)?.square().mean())
}

/// `sum -log D(G(x))`, the non-saturating generator objective.
pub fn generator_adversarial_loss(d_fake: &Tensor) -> Result<Tensor> {
    check_column("generator_adversarial_loss", d_fake)?;
    check_probs("generator_adversarial_loss", d_fake)?;
    Ok(neg_log(d_fake).sum())
}

/// `-(1/N) sum [log D(real) + log(1 - D(fake))]`.
pub fn discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    check_column("discriminator_loss", d_real)?;
    check_column("discriminator_loss", d_fake)?;
    if d_real.shape() != d_fake.shape() {
        return Err(Error::ShapeMismatch {
            op: "discriminator_loss",
            lhs: d_real.shape().to_vec(),
            rhs: d_fake.shape().to_vec(),
        });
    }
    check_probs("discriminator_loss real", d_real)?;
    check_probs("discriminator_loss fake", d_fake)?;
    let n = d_real.shape()[0] as f64;
    let real = neg_log(d_real).sum();
    let fake = neg_log(&d_fake.rsub_scalar(1.0)).sum();
    Ok(real.add(&fake)?.mul_scalar(1.0 / n))
}

/// Summed cross-entropy of class probabilities against integer labels.
fn cross_entropy(op: &'static str, probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::invalid_shape(op, s, format!("expected [{}, K]", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::LabelOutOfRange { label, classes: s[1] });
    }
    check_probs(op, probs)?;
    Ok(neg_log(&probs.gather_rows(labels)?).sum())
}

/// Cross-entropy of the classifier on reconstructed images.
pub fn classification_loss_sr(c_probs_on_sr: &Tensor, labels: &[usize]) -> Result<Tensor> {
    cross_entropy("classification_loss_sr", c_probs_on_sr, labels)
}

/// Cross-entropy of the classifier on true high-resolution images; the
/// classifier's own supervised term.
pub fn classifier_supervised_loss(c_probs_on_hr: &Tensor, labels: &[usize]) -> Result<Tensor> {
    cross_entropy("classifier_supervised_loss", c_probs_on_hr, labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_mse: f64,
    pub w_adv: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_mse: 1.0,
            w_adv: 1e-3,
            alpha: 5e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_mse", self.w_mse), ("w_adv", self.w_adv), ("alpha", self.alpha)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// Differentiable generator objective `w_mse*mse + w_adv*adv + alpha*cla`
    /// summed left to right. Terms with zero weight are left out of the
    /// graph entirely, so their inputs receive no gradient at all.
    pub fn generator_objective(&self, mse: &Tensor, adv: Option<&Tensor>, cla: Option<&Tensor>) -> Result<Tensor> {
        let mut total = mse.mul_scalar(self.w_mse);
        for (w, term, name) in [(self.w_adv, adv, "adv"), (self.alpha, cla, "cla")] {
            if w == 0.0 {
                continue;
            }
            let t = term.ok_or_else(|| Error::Config(format!("loss term {name} has weight {w} but was not computed")))?;
            total = total.add(&t.mul_scalar(w))?;
        }
        Ok(total)
    }
}

/// Per-sample loss values for one step, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub mse: f64,
    pub adv: f64,
    pub cla: f64,
    pub r_c: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub mse: f64,
    pub adv: f64,
    pub cla: f64,
    pub r_c: f64,
    /// What the generator descends: `w_mse*mse + w_adv*adv + alpha*cla`.
    pub generator_total: f64,
    /// `generator_total + r_c`.
    pub total: f64,
}

/// Weighted totals in the fixed order mse, adv, cla, r_c.
pub fn total_generator_loss(c: LossComponents, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("mse", c.mse), ("adv", c.adv), ("cla", c.cla), ("r_c", c.r_c)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss component {name}"),
                index: 0,
                value: v,
            });
        }
    }
    let generator_total = w.w_mse * c.mse + w.w_adv * c.adv + w.alpha * c.cla;
    Ok(LossBreakdown {
        mse: c.mse,
        adv: c.adv,
        cla: c.cla,
        r_c: c.r_c,
        generator_total,
        total: generator_total + c.r_c,
    })
}
