//! Composite training objective: per-attribute BCE on masked features,
//! multi-label BCE on raw features, reconstruction error and L1 mask sparsity.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axes, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::network::Forward;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before the logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_b: f64,
    pub lambda_m: f64,
    pub lambda_r: f64,
    pub lambda_1: f64,
}

impl Default for LossWeights {
    /// `1, 1, 4, 1e-5`, the published CelebA setting.
    fn default() -> Self {
        Self {
            lambda_b: 1.0,
            lambda_m: 1.0,
            lambda_r: 4.0,
            lambda_1: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_b, self.lambda_m, self.lambda_r, self.lambda_1];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::validation(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// How the mask L1 term is reduced before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Reduction {
    /// Sum over attributes and mask elements, averaged over the batch.
    #[default]
    Sum,
    /// Mean over every mask element of every attribute.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_b: f64,
    pub l_m: f64,
    pub l_r: f64,
    pub l_mask_l1: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite component, in reporting order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("l_b", self.l_b),
            ("l_m", self.l_m),
            ("l_r", self.l_r),
            ("l_mask_l1", self.l_mask_l1),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// An image batch `[B, Cimg, H, W]` with binary labels `[B, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Tensor,
}

impl Batch {
    pub fn new(images: Tensor, labels: Tensor) -> Result<Self> {
        if images.ndim() != 4 || labels.ndim() != 2 || images.shape()[0] != labels.shape()[0] {
            return Err(Error::shape(format!(
                "batch needs images [B,C,H,W] and labels [B,K], got {:?} and {:?}",
                images.shape(),
                labels.shape()
            )));
        }
        if images.shape()[0] == 0 {
            return Err(Error::validation("batch is empty"));
        }
        check_labels(&labels)?;
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_labels(labels: &Tensor) -> Result<()> {
    match labels.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        Some(y) => Err(Error::validation(format!("labels must be 0 or 1, found {y}"))),
        None => Ok(()),
    }
}

/// `-(1/B) sum_i sum_k [y log p + (1 - y) log(1 - p)]` with clamped `p`.
pub fn binary_attr_loss(tape: &mut Tape, probs: Var, labels: Var) -> Result<Var> {
    bce(tape, probs, labels)
}

/// Same form as [`binary_attr_loss`], applied to the multi-label head.
pub fn multilabel_loss(tape: &mut Tape, probs: Var, labels: Var) -> Result<Var> {
    bce(tape, probs, labels)
}

fn bce(tape: &mut Tape, probs: Var, labels: Var) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || tape.shape(labels) != shape.as_slice() {
        return Err(Error::shape(format!(
            "BCE needs probs and labels of equal shape [B, K], got {:?} and {:?}",
            shape,
            tape.shape(labels)
        )));
    }
    check_labels(tape.value(labels))?;
    let batch = shape[0] as f64;
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = tape.ln(p);
    let neg_p = tape.scale(p, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let log_q = tape.ln(one_minus_p);
    let neg_y = tape.scale(labels, -1.0);
    let one_minus_y = tape.add_scalar(neg_y, 1.0);
    let pos = tape.mul(labels, log_p)?;
    let neg = tape.mul(one_minus_y, log_q)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both, Axes::All)?;
    Ok(tape.scale(total, -1.0 / batch))
}

/// `(1/B) sum_i sum_pixels (x - x_hat)^2`.
pub fn reconstruction_loss(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(x_hat) {
        return Err(Error::shape(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            tape.shape(x),
            tape.shape(x_hat)
        )));
    }
    let batch = tape.shape(x).first().copied().unwrap_or(1).max(1) as f64;
    let diff = tape.sub(x, x_hat)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq, Axes::All)?;
    Ok(tape.scale(total, 1.0 / batch))
}

/// L1 norm of all attribute masks, reduced per [`L1Reduction`].
pub fn mask_l1(tape: &mut Tape, masks: &[Var], reduction: L1Reduction) -> Result<Var> {
    let first = *masks
        .first()
        .ok_or_else(|| Error::validation("mask_l1 needs at least one mask"))?;
    let shape = tape.shape(first).to_vec();
    let batch = shape.first().copied().unwrap_or(1).max(1) as f64;
    let per_mask: usize = shape.iter().product();
    let mut acc: Option<Var> = None;
    for &m in masks {
        if tape.shape(m) != shape.as_slice() {
            return Err(Error::shape("all attribute masks must share one shape"));
        }
        let a = tape.abs(m);
        let s = tape.sum(a, Axes::All)?;
        acc = Some(match acc {
            None => s,
            Some(prev) => tape.add(prev, s)?,
        });
    }
    let total = acc.expect("at least one mask");
    let denom = match reduction {
        L1Reduction::Sum => batch,
        L1Reduction::Mean => (per_mask * masks.len()).max(1) as f64,
    };
    Ok(tape.scale(total, 1.0 / denom))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub l1_reduction: L1Reduction,
}

/// Weighted objective over one batch using the training mask form `1 + M`.
///
/// Components whose network part is disabled record no graph and report 0.
/// Returns the scalar root for backward and the per-term values.
pub fn total_loss(fwd: &mut Forward<'_>, batch: &Batch, objective: &ObjectiveConfig) -> Result<(Var, LossBreakdown)> {
    objective.weights.validate()?;
    let k_attr = fwd.net().num_attributes();
    if batch.labels.shape()[1] != k_attr {
        return Err(Error::shape(format!(
            "labels carry {} attributes, network has {k_attr}",
            batch.labels.shape()[1]
        )));
    }
    let w = objective.weights;
    let x = fwd.input(&batch.images)?;
    let labels = fwd.tape.constant(batch.labels.clone());
    let feat = fwd.features(x)?;

    let mut probs = Vec::with_capacity(k_attr);
    let mut masks = Vec::with_capacity(k_attr);
    for k in 0..k_attr {
        let (p, m) = fwd.attribute(k, feat, None)?;
        probs.push(p);
        masks.push(m);
    }
    let stacked = fwd.tape.stack_last(&probs)?;
    let l_b = binary_attr_loss(&mut fwd.tape, stacked, labels)?;
    let l1 = mask_l1(&mut fwd.tape, &masks, objective.l1_reduction)?;

    let mut terms = vec![(l_b, w.lambda_b), (l1, w.lambda_1)];
    let l_m = if fwd.net().config().enable_multilabel {
        let pm = fwd.multilabel(feat)?;
        let l = multilabel_loss(&mut fwd.tape, pm, labels)?;
        terms.push((l, w.lambda_m));
        Some(l)
    } else {
        None
    };
    let l_r = if fwd.net().config().enable_reconstructor {
        let xr = fwd.reconstruct(feat)?;
        let l = reconstruction_loss(&mut fwd.tape, x, xr)?;
        terms.push((l, w.lambda_r));
        Some(l)
    } else {
        None
    };

    let mut total: Option<Var> = None;
    for (term, weight) in terms {
        let scaled = fwd.tape.scale(term, weight);
        total = Some(match total {
            None => scaled,
            Some(acc) => fwd.tape.add(acc, scaled)?,
        });
    }
    let total = total.expect("binary term always present");
    let item = |fwd: &Forward<'_>, v: Option<Var>| v.map_or(Ok(0.0), |v| fwd.value(v).item());
    let breakdown = LossBreakdown {
        l_b: item(fwd, Some(l_b))?,
        l_m: item(fwd, l_m)?,
        l_r: item(fwd, l_r)?,
        l_mask_l1: item(fwd, Some(l1))?,
        total: item(fwd, Some(total))?,
    };
    Ok((total, breakdown))
}
