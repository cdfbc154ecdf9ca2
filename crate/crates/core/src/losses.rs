//! Adversarial, reconstruction, feature-matching and real gradient penalty
//! terms.

use kshot_tensor::{grad, Float, Params, Var};
use serde::{Deserialize, Serialize};

use crate::discriminator::{select_class_score, Discriminator};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvForm {
    #[default]
    Hinge,
    /// Non-saturating logistic form.
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub recon_weight: f64,
    pub feature_match_weight: f64,
    /// Applied as `weight / 2 * penalty`.
    pub gradient_penalty_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon_weight: 0.1,
            feature_match_weight: 1.0,
            gradient_penalty_weight: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.recon_weight, self.feature_match_weight, self.gradient_penalty_weight];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Scalar values of every loss term for one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub g_adv: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub recon: f64,
    pub feat_match: f64,
    pub grad_penalty: f64,
    pub g_total: f64,
    pub d_total: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [
            self.g_adv,
            self.d_real,
            self.d_fake,
            self.recon,
            self.feat_match,
            self.grad_penalty,
            self.g_total,
            self.d_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn hinge<T: Float>(margin_violation: &Var<T>) -> Var<T> {
    margin_violation.add_scalar(T::one()).relu().mean()
}

/// Discriminator terms `(real, fake)` from per-sample class scores.
pub fn d_adv_loss<T: Float>(score_real: &Var<T>, score_fake: &Var<T>, form: AdvForm) -> (Var<T>, Var<T>) {
    match form {
        AdvForm::Hinge => (hinge(&score_real.neg()), hinge(score_fake)),
        AdvForm::Log => (score_real.neg().softplus().mean(), score_fake.softplus().mean()),
    }
}

pub fn g_adv_loss<T: Float>(score_fake: &Var<T>, form: AdvForm) -> Var<T> {
    match form {
        AdvForm::Hinge => score_fake.mean().neg(),
        AdvForm::Log => score_fake.neg().softplus().mean(),
    }
}

/// Mean absolute error between `x` and its self-reconstruction.
pub fn recon_loss<T: Float>(x: &Var<T>, reconstruction: &Var<T>) -> Result<Var<T>> {
    Ok(x.sub(reconstruction)?.abs().mean())
}

/// Mean absolute difference between the features of the translation and
/// the K-average of the class images' features. The class-image side is
/// held constant.
pub fn feature_matching_loss<T: Float>(fake_features: &Var<T>, class_features: &Var<T>, k: usize) -> Result<Var<T>> {
    let target = class_features.detach().group_mean(k)?;
    Ok(fake_features.sub(&target)?.abs().mean())
}

/// Batch mean of the squared input-gradient norm of the class-`c_x` score
/// on real images. Differentiable with respect to the discriminator's
/// parameters.
pub fn r1_penalty<T: Float>(disc: &Discriminator, p: &Params<T>, x_real: &Var<T>, c_x: &[usize]) -> Result<Var<T>> {
    let x = Var::leaf(x_real.value().clone(), true);
    let score = select_class_score(&disc.discriminate(p, &x)?, c_x)?;
    r1_from_score(&score, &x)
}

/// The penalty given scores already computed from leaf `x`.
pub fn r1_from_score<T: Float>(score: &Var<T>, x: &Var<T>) -> Result<Var<T>> {
    let b = T::from_usize(x.shape()[0]).unwrap();
    let g = grad(&score.sum(), &[x], true)?.remove(0);
    Ok(g.mul(&g)?.sum().scale(T::one() / b))
}
