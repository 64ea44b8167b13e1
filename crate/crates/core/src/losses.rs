//! Training objectives. Every loss returns its value together with the
//! gradient with respect to the network output it consumes.

use crate::error::{Error, Result};
use crate::geometry::{match_to_gt, relabel_target, ClassSet, GroundTruth, Proposal};
use crate::netcore::Tensor;
use crate::scalar::Scalar;

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
pub const RESCORE_BINS: usize = 10;
/// Width, in bins, of the Gaussian-shaped rescore target.
pub const RESCORE_SIGMA: f64 = 1.0;

/// Suppress-head column holding the background probability.
pub const SUPPRESS_BACKGROUND: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

/// Peaked regression target over the ten IoU bins. Not normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescoreTarget(pub [f64; RESCORE_BINS]);

impl RescoreTarget {
    pub fn peak(&self) -> usize {
        crate::geometry::argmax(&self.0)
    }
}

/// Bin containing `iou`, with 1.0 folded into the last bin.
pub fn rescore_bin(iou: f64) -> usize {
    ((iou.clamp(0.0, 1.0 - 1e-9) * RESCORE_BINS as f64).floor() as usize).min(RESCORE_BINS - 1)
}

pub fn build_rescore_target(iou: f64) -> RescoreTarget {
    let peak = rescore_bin(iou) as f64;
    let mut v = [0.0; RESCORE_BINS];
    for (j, x) in v.iter_mut().enumerate() {
        let d = j as f64 - peak;
        *x = (-(d * d) / (2.0 * RESCORE_SIGMA * RESCORE_SIGMA)).exp();
    }
    RescoreTarget(v)
}

/// Mean negative log-probability of the target column per row.
fn log_loss<T: Scalar>(probs: &Tensor<T>, targets: &[usize], what: &str) -> Result<LossGrad<T>> {
    let (n, c) = (probs.rows(), probs.cols());
    if targets.len() != n {
        return Err(Error::dim(format!("{what}: {} targets for {n} rows", targets.len())));
    }
    let mut grad = Tensor::zeros(probs.shape());
    if n == 0 {
        return Ok(LossGrad { value: T::zero(), grad });
    }
    let floor = T::lit(PROB_FLOOR);
    let inv_n = T::one() / T::lit(n as f64);
    let mut total = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::InvalidClass {
                class_id: t,
                num_classes: c,
            });
        }
        let p = probs.row(i)[t];
        if p > floor {
            total -= p.ln();
            grad.row_mut(i)[t] = -inv_n / p;
        } else {
            total -= floor.ln();
        }
    }
    Ok(LossGrad {
        value: total * inv_n,
        grad,
    })
}

/// Relabel log-loss over `k × (|O|+1)` probabilities.
pub fn loss_cls<T: Scalar>(probs: &Tensor<T>, targets: &[usize]) -> Result<LossGrad<T>> {
    log_loss(probs, targets, "relabel loss")
}

/// Binary log-loss over `k × 2` probabilities; `true` marks background.
pub fn loss_sup<T: Scalar>(probs: &Tensor<T>, background: &[bool]) -> Result<LossGrad<T>> {
    if probs.cols() != 2 {
        return Err(Error::dim("suppress loss expects two columns"));
    }
    let t: Vec<usize> = background
        .iter()
        .map(|&b| if b { SUPPRESS_BACKGROUND } else { 1 - SUPPRESS_BACKGROUND })
        .collect();
    log_loss(probs, &t, "suppress loss")
}

/// Mean per-row L1 distance between predicted bins and their targets.
pub fn loss_res<T: Scalar>(pred: &Tensor<T>, targets: &[RescoreTarget]) -> Result<LossGrad<T>> {
    let n = pred.rows();
    if pred.cols() != RESCORE_BINS || targets.len() != n {
        return Err(Error::dim(format!(
            "rescore loss: {:?} predictions for {} targets",
            pred.shape(),
            targets.len()
        )));
    }
    let mut grad = Tensor::zeros(pred.shape());
    if n == 0 {
        return Ok(LossGrad { value: T::zero(), grad });
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut total = T::zero();
    for (i, t) in targets.iter().enumerate() {
        for j in 0..RESCORE_BINS {
            let d = pred.row(i)[j] - T::lit(t.0[j]);
            total += d.abs();
            grad.row_mut(i)[j] = if d > T::zero() {
                inv_n
            } else if d < T::zero() {
                -inv_n
            } else {
                T::zero()
            };
        }
    }
    Ok(LossGrad {
        value: total * inv_n,
        grad,
    })
}

/// Mean per-cell log-loss of `[2, H, W]` probabilities against cell labels.
pub fn loss_seg<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<LossGrad<T>> {
    let s = probs.shape();
    if s.len() != 3 || s[0] != 2 || s[1] * s[2] != labels.len() {
        return Err(Error::dim(format!(
            "segmentation loss: {:?} probabilities for {} labels",
            s,
            labels.len()
        )));
    }
    let n = labels.len();
    // view as n × 2 rows
    let mut rows = Vec::with_capacity(2 * n);
    for i in 0..n {
        rows.push(probs.data()[i]);
        rows.push(probs.data()[n + i]);
    }
    let t: Vec<usize> = labels.iter().map(|&l| usize::from(l != 0)).collect();
    let lg = log_loss(&Tensor::from_vec(&[n, 2], rows)?, &t, "segmentation loss")?;
    let mut grad = Tensor::zeros(s);
    for i in 0..n {
        grad.data_mut()[i] = lg.grad.data()[2 * i];
        grad.data_mut()[n + i] = lg.grad.data()[2 * i + 1];
    }
    Ok(LossGrad { value: lg.value, grad })
}

/// The three refinement loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts<T> {
    pub cls: T,
    pub res: T,
    pub sup: T,
}

/// Unweighted sum of the three terms.
pub fn loss_total<T: Scalar>(parts: &LossParts<T>) -> T {
    parts.cls + parts.res + parts.sup
}

/// Which terms contribute to training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossTerms {
    pub cls: bool,
    pub res: bool,
    pub sup: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            cls: true,
            res: true,
            sup: true,
        }
    }
}

/// Per-proposal supervision for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTargets {
    pub classes: Vec<usize>,
    pub rescore: Vec<RescoreTarget>,
    /// `true` exactly where the class target is background.
    pub background: Vec<bool>,
}

impl TrainingTargets {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Concatenates per-image targets in batch order.
    pub fn concat(parts: &[TrainingTargets]) -> TrainingTargets {
        TrainingTargets {
            classes: parts.iter().flat_map(|t| t.classes.iter().copied()).collect(),
            rescore: parts.iter().flat_map(|t| t.rescore.iter().copied()).collect(),
            background: parts.iter().flat_map(|t| t.background.iter().copied()).collect(),
        }
    }
}

/// Targets for already-selected proposal rows. Rows past `real` are padding
/// and always target background with an IoU of zero.
pub fn build_targets<T: Scalar>(
    rows: &[Proposal<T>],
    real: usize,
    gts: &[GroundTruth<T>],
    classes: &ClassSet,
    rho_iou: T,
) -> TrainingTargets {
    let bg = classes.background_index();
    let matches = match_to_gt(&rows[..real.min(rows.len())], gts);
    let mut out = TrainingTargets {
        classes: Vec::with_capacity(rows.len()),
        rescore: Vec::with_capacity(rows.len()),
        background: Vec::with_capacity(rows.len()),
    };
    for i in 0..rows.len() {
        let (class, iou) = match matches.get(i) {
            Some(m) => {
                let gt_class = m.gt_index.map_or(bg, |g| gts[g].class_id);
                (relabel_target(m, gt_class, rho_iou, classes), m.iou.as_f64())
            }
            None => (bg, 0.0),
        };
        out.classes.push(class);
        out.rescore.push(build_rescore_target(iou));
        out.background.push(class == bg);
    }
    out
}
