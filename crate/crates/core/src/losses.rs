//! Saliency-supervised training objectives.
//!
//! Every objective is `alpha * CE + beta * MSE(...) [+ gamma * MSE(...)]`:
//!
//! | variant              | primary term               | secondary term              |
//! |----------------------|----------------------------|-----------------------------|
//! | `baseline`           | `MSE(h, norm(t))`          | none                        |
//! | `difference`         | `MSE(h, norm(t - f))`      | none                        |
//! | `per_class`          | `MSE(h, norm(t))`          | `MSE(1 - h, norm(f))`       |
//! | `contrast`           | `MSE(h, norm(t))`          | `MSE(1 - norm(t), norm(f))` |
//! | `cross_entropy_only` | none                       | none                        |
//!
//! `t` and `f` are the raw true- and false-class CAMs; `norm` is
//! [`normalize_unit`]. In `contrast` the target `1 - norm(t)` is held constant
//! when differentiating.
//!
//! Gradients are computed in closed form and returned with respect to the
//! logits, the feature grid and the classifier weights, which is all a model
//! needs to continue backpropagation.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::cam::{
    class_cam_backward, compute_cam_pair, log_softmax_at, normalize_unit, normalize_unit_backward,
    ModelOutput, SalienceMap,
};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Baseline,
    Difference,
    PerClass,
    Contrast,
    CrossEntropyOnly,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::Baseline,
        LossVariant::Difference,
        LossVariant::PerClass,
        LossVariant::Contrast,
        LossVariant::CrossEntropyOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::Baseline => "baseline",
            LossVariant::Difference => "difference",
            LossVariant::PerClass => "per_class",
            LossVariant::Contrast => "contrast",
            LossVariant::CrossEntropyOnly => "cross_entropy_only",
        }
    }

    /// Whether the objective has a salience term and therefore needs `h`.
    pub fn uses_salience(self) -> bool {
        self != LossVariant::CrossEntropyOnly
    }

    /// Whether the objective has a third (gamma-weighted) term.
    pub fn has_secondary(self) -> bool {
        matches!(self, LossVariant::PerClass | LossVariant::Contrast)
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                invalid!(
                    "unknown loss variant {s:?}; expected one of baseline, difference, per_class, contrast, cross_entropy_only"
                )
            })
    }
}

/// Weighting of the classification and salience terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub variant: LossVariant,
}

impl LossWeights {
    /// Equal weights: 0.5 each for two-term objectives, 0.3 each for three-term
    /// objectives. Plain cross-entropy gets `alpha = 1`.
    pub fn default_for(variant: LossVariant) -> Self {
        let (alpha, beta, gamma) = match variant {
            LossVariant::Baseline | LossVariant::Difference => (0.5, 0.5, 0.0),
            LossVariant::PerClass | LossVariant::Contrast => (0.3, 0.3, 0.3),
            LossVariant::CrossEntropyOnly => (1.0, 0.0, 0.0),
        };
        Self {
            alpha,
            beta,
            gamma,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid!(
                "loss weights must be finite and non-negative: {self:?}"
            ));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(invalid!("at least one loss weight must be positive"));
        }
        if !self.variant.has_secondary() && self.gamma != 0.0 {
            return Err(invalid!(
                "variant {} has no secondary term but gamma = {}",
                self.variant,
                self.gamma
            ));
        }
        if self.variant == LossVariant::CrossEntropyOnly && self.beta != 0.0 {
            return Err(invalid!(
                "cross_entropy_only requires beta = 0, got {}",
                self.beta
            ));
        }
        Ok(())
    }
}

/// Per-cell mean squared difference of two normalized maps.
pub fn mse_map(a: &SalienceMap, b: &SalienceMap) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid!(
            "map dimensions differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        ));
    }
    if !a.is_normalized() || !b.is_normalized() {
        return Err(invalid!("mse_map compares normalized maps"));
    }
    Ok(mse(a.values(), b.values()))
}

fn mse(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// d MSE(target, pred) / d pred
fn mse_grad(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, scale: f64) -> Array2<f64> {
    let n = pred.len() as f64;
    let mut g = &pred - &target;
    g.mapv_inplace(|d| scale * 2.0 * d / n);
    g
}

/// Individual weighted contributions to one sample's loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// `alpha * CE`
    pub classification: f64,
    /// `beta * MSE(...)`
    pub primary: f64,
    /// `gamma * MSE(...)`
    pub secondary: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.classification + self.primary + self.secondary
    }
}

/// Gradient of a sample loss with respect to the model output.
///
/// The bias gradient equals the logit gradient.
#[derive(Debug, Clone)]
pub struct OutputGrad {
    pub logits: Array1<f64>,
    pub features: Array3<f64>,
    pub class_weights: Array2<f64>,
}

impl OutputGrad {
    fn zeros_like(output: &ModelOutput) -> Self {
        Self {
            logits: Array1::zeros(output.logits.len()),
            features: Array3::zeros(output.features.dim()),
            class_weights: Array2::zeros(output.class_weights.dim()),
        }
    }
}

/// Loss value of one sample under `w.variant`.
///
/// `h` must already be aligned to the CAM grid; it may be `None` only for
/// `cross_entropy_only`.
pub fn sample_loss(
    output: &ModelOutput,
    label: usize,
    h: Option<&SalienceMap>,
    w: &LossWeights,
) -> Result<f64> {
    Ok(evaluate(output, label, h, w, None, false)?.0.total())
}

/// The contrast objective's target `1 - norm(t)` for this output.
pub fn contrast_target(output: &ModelOutput, label: usize) -> Result<SalienceMap> {
    let (t, _) = compute_cam_pair(output, label)?;
    SalienceMap::normalized(normalize_unit(&t)?.values().mapv(|v| 1.0 - v))
}

/// Loss value with the contrast target pinned to `target` instead of being
/// recomputed from the output.
///
/// This is the function whose derivative [`sample_loss_with_grad`] returns
/// for `contrast` when `target` is [`contrast_target`] at the current output;
/// finite-difference checks perturb it rather than [`sample_loss`].
pub fn sample_loss_pinned_target(
    output: &ModelOutput,
    label: usize,
    h: Option<&SalienceMap>,
    w: &LossWeights,
    target: &SalienceMap,
) -> Result<f64> {
    Ok(evaluate(output, label, h, w, Some(target), false)?
        .0
        .total())
}

/// Loss terms and gradient of one sample under `w.variant`.
pub fn sample_loss_with_grad(
    output: &ModelOutput,
    label: usize,
    h: Option<&SalienceMap>,
    w: &LossWeights,
) -> Result<(LossTerms, OutputGrad)> {
    let (terms, grad) = evaluate(output, label, h, w, None, true)?;
    Ok((terms, grad.expect("gradient requested")))
}

fn expect_variant(w: &LossWeights, expected: LossVariant) -> Result<()> {
    if w.variant != expected {
        return Err(invalid!("expected {expected} weights, got {}", w.variant));
    }
    Ok(())
}

/// `alpha * CE + beta * MSE(h, norm(t))`
pub fn loss_baseline(
    output: &ModelOutput,
    label: usize,
    h: &SalienceMap,
    w: &LossWeights,
) -> Result<f64> {
    expect_variant(w, LossVariant::Baseline)?;
    sample_loss(output, label, Some(h), w)
}

/// `alpha * CE + beta * MSE(h, norm(t - f))`
pub fn loss_difference(
    output: &ModelOutput,
    label: usize,
    h: &SalienceMap,
    w: &LossWeights,
) -> Result<f64> {
    expect_variant(w, LossVariant::Difference)?;
    sample_loss(output, label, Some(h), w)
}

/// `alpha * CE + beta * MSE(h, norm(t)) + gamma * MSE(1 - h, norm(f))`
pub fn loss_per_class(
    output: &ModelOutput,
    label: usize,
    h: &SalienceMap,
    w: &LossWeights,
) -> Result<f64> {
    expect_variant(w, LossVariant::PerClass)?;
    sample_loss(output, label, Some(h), w)
}

/// `alpha * CE + beta * MSE(h, norm(t)) + gamma * MSE(1 - norm(t), norm(f))`
pub fn loss_contrast(
    output: &ModelOutput,
    label: usize,
    h: &SalienceMap,
    w: &LossWeights,
) -> Result<f64> {
    expect_variant(w, LossVariant::Contrast)?;
    sample_loss(output, label, Some(h), w)
}

/// One element of a training batch.
pub struct BatchItem<'a> {
    pub output: &'a ModelOutput,
    pub label: usize,
    pub h: Option<&'a SalienceMap>,
}

/// Mean of the per-sample losses.
pub fn batch_loss(batch: &[BatchItem<'_>], w: &LossWeights) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let mut sum = 0.0;
    for item in batch {
        sum += sample_loss(item.output, item.label, item.h, w)?;
    }
    Ok(sum / batch.len() as f64)
}

fn evaluate(
    output: &ModelOutput,
    label: usize,
    h: Option<&SalienceMap>,
    w: &LossWeights,
    pinned_target: Option<&SalienceMap>,
    want_grad: bool,
) -> Result<(LossTerms, Option<OutputGrad>)> {
    w.validate()?;
    if label > 1 {
        return Err(invalid!("label {label} is not binary"));
    }
    let other = 1 - label;
    let mut grad = want_grad.then(|| OutputGrad::zeros_like(output));

    let ce = -log_softmax_at(output.logits.view(), label);
    let classification = w.alpha * ce;
    if let Some(g) = grad.as_mut() {
        for (c, p) in output.probabilities.iter().enumerate() {
            let onehot = if c == label { 1.0 } else { 0.0 };
            g.logits[c] = w.alpha * (p - onehot);
        }
    }

    if !w.variant.uses_salience() {
        let terms = LossTerms {
            classification,
            primary: 0.0,
            secondary: 0.0,
        };
        return Ok((terms, grad));
    }

    let h = h.ok_or_else(|| invalid!("variant {} needs a human salience map", w.variant))?;
    if !h.is_normalized() {
        return Err(invalid!("human salience map must be normalized"));
    }
    if h.dim() != output.grid() {
        return Err(invalid!(
            "human salience map is {:?} but the CAM grid is {:?}; resize it first",
            h.dim(),
            output.grid()
        ));
    }

    let (t, f) = compute_cam_pair(output, label)?;
    let mut d_t: Option<Array2<f64>> = None;
    let mut d_f: Option<Array2<f64>> = None;
    let primary;
    let mut secondary = 0.0;

    match w.variant {
        LossVariant::Difference => {
            let diff = SalienceMap::raw(&t.values() - &f.values())?;
            let d = normalize_unit(&diff)?;
            primary = w.beta * mse(h.values(), d.values());
            if want_grad {
                let up = mse_grad(d.values(), h.values(), w.beta);
                let g = normalize_unit_backward(diff.values(), up.view());
                d_f = Some(-&g);
                d_t = Some(g);
            }
        }
        LossVariant::Baseline | LossVariant::PerClass | LossVariant::Contrast => {
            let t_norm = normalize_unit(&t)?;
            primary = w.beta * mse(h.values(), t_norm.values());
            if want_grad {
                let up = mse_grad(t_norm.values(), h.values(), w.beta);
                d_t = Some(normalize_unit_backward(t.values(), up.view()));
            }
            if w.variant.has_secondary() {
                let f_norm = normalize_unit(&f)?;
                // per_class: 1 - h; contrast: 1 - norm(t), held constant.
                let target = match (w.variant, pinned_target) {
                    (LossVariant::PerClass, _) => h.values().mapv(|v| 1.0 - v),
                    (_, Some(pinned)) => {
                        if pinned.dim() != t_norm.dim() {
                            return Err(invalid!("pinned target does not match the CAM grid"));
                        }
                        pinned.values().to_owned()
                    }
                    _ => t_norm.values().mapv(|v| 1.0 - v),
                };
                secondary = w.gamma * mse(target.view(), f_norm.values());
                if want_grad {
                    let up = mse_grad(f_norm.values(), target.view(), w.gamma);
                    d_f = Some(normalize_unit_backward(f.values(), up.view()));
                }
            }
        }
        LossVariant::CrossEntropyOnly => unreachable!("handled above"),
    }

    if let Some(g) = grad.as_mut() {
        if let Some(d_t) = d_t {
            class_cam_backward(
                output,
                label,
                d_t.view(),
                &mut g.features,
                &mut g.class_weights,
            );
        }
        if let Some(d_f) = d_f {
            class_cam_backward(
                output,
                other,
                d_f.view(),
                &mut g.features,
                &mut g.class_weights,
            );
        }
    }

    let terms = LossTerms {
        classification,
        primary,
        secondary,
    };
    Ok((terms, grad))
}
