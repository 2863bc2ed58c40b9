//! Map losses, classification cross-entropy, and their gradients.
//!
//! Every loss is a mean over pixels so values are comparable across map
//! sizes. Logarithms take arguments clamped to `[EPS, 1 - EPS]`; inside the
//! clamped zone the gradient is zero, consistent with the clamped value.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{binarize, BinaryMap, FakenessMap, DEFAULT_THRESHOLD};
use crate::nn::{cast, Scalar};
use crate::texturegen::Label;

pub const EPS: f64 = 1e-7;

/// Half of one 8-bit gray level.
pub const L1_TOLERANCE: f64 = 0.5 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapLoss {
    L1,
    L2,
    Focal,
    Dice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub map_loss: MapLoss,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of the classification cross-entropy; 0 disables the classifier term.
    pub cls_weight: f64,
    /// Threshold turning gray ground truth into focal-loss labels.
    pub focal_threshold: f32,
    /// Absolute errors up to this size cost nothing under the L1 map loss
    /// of a fake sample. Real samples always use plain L1.
    pub l1_tolerance: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            map_loss: MapLoss::L1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            cls_weight: 1.0,
            focal_threshold: DEFAULT_THRESHOLD,
            l1_tolerance: L1_TOLERANCE,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::invalid("focal_gamma", "must be >= 0"));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::invalid("focal_alpha", "must be in (0, 1)"));
        }
        if !(0.0..0.5).contains(&self.l1_tolerance) {
            return Err(Error::invalid("l1_tolerance", "must be in [0, 0.5)"));
        }
        if !(self.cls_weight >= 0.0) {
            return Err(Error::invalid("cls_weight", "must be >= 0"));
        }
        Ok(())
    }
}

fn same_shape<A, B>(a: &ArrayView2<'_, A>, b: &ArrayView2<'_, B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

fn clamp_p<F: Scalar>(p: F) -> (F, bool) {
    let lo = cast::<F>(EPS);
    let hi = F::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

/// Mean absolute error and its gradient.
pub fn l1<F: Scalar>(pred: ArrayView2<'_, F>, gt: ArrayView2<'_, F>) -> Result<(F, Array2<F>)> {
    l1_banded(pred, gt, F::zero())
}

/// Mean of `max(|p - g| - tolerance, 0)` and its gradient.
pub fn l1_banded<F: Scalar>(pred: ArrayView2<'_, F>, gt: ArrayView2<'_, F>, tolerance: F) -> Result<(F, Array2<F>)> {
    same_shape(&pred, &gt)?;
    let n = cast::<F>(pred.len() as f64);
    let mut sum = F::zero();
    let mut grad = Array2::zeros(pred.dim());
    Zip::from(&mut grad).and(&pred).and(&gt).for_each(|g, &p, &t| {
        let d = p - t;
        let excess = d.abs() - tolerance;
        if excess > F::zero() {
            sum += excess;
            *g = if d > F::zero() { F::one() / n } else { -F::one() / n };
        }
    });
    Ok((sum / n, grad))
}

/// Mean squared error and its gradient.
pub fn l2<F: Scalar>(pred: ArrayView2<'_, F>, gt: ArrayView2<'_, F>) -> Result<(F, Array2<F>)> {
    same_shape(&pred, &gt)?;
    let n = cast::<F>(pred.len() as f64);
    let two = cast::<F>(2.0);
    let mut sum = F::zero();
    let mut grad = Array2::zeros(pred.dim());
    Zip::from(&mut grad).and(&pred).and(&gt).for_each(|g, &p, &t| {
        let d = p - t;
        sum += d * d;
        *g = two * d / n;
    });
    Ok((sum / n, grad))
}

/// Focal loss `-a_t (1 - p_t)^gamma ln p_t` against binary labels, with gradient.
pub fn focal<F: Scalar>(
    pred: ArrayView2<'_, F>,
    labels: ArrayView2<'_, u8>,
    alpha: f64,
    gamma: f64,
) -> Result<(F, Array2<F>)> {
    same_shape(&pred, &labels)?;
    let n = cast::<F>(pred.len() as f64);
    let gamma_f = cast::<F>(gamma);
    let mut sum = F::zero();
    let mut grad = Array2::zeros(pred.dim());
    Zip::from(&mut grad).and(&pred).and(&labels).for_each(|g, &p, &y| {
        let (pc, clamped) = clamp_p(p);
        let (pt, at, sign) = if y == 1 {
            (pc, cast::<F>(alpha), F::one())
        } else {
            (F::one() - pc, cast::<F>(1.0 - alpha), -F::one())
        };
        let q = F::one() - pt;
        let ln = pt.ln();
        sum += -at * q.powf(gamma_f) * ln;
        *g = if clamped {
            F::zero()
        } else {
            let mut d = q.powf(gamma_f) / pt;
            if gamma > 0.0 {
                d = d - gamma_f * q.powf(gamma_f - F::one()) * ln;
            }
            -at * d * sign / n
        };
    });
    Ok((sum / n, grad))
}

/// `1 - 2 sum(p g) / (sum p + sum g)`; zero when both maps are empty.
pub fn soft_dice<F: Scalar>(pred: ArrayView2<'_, F>, gt: ArrayView2<'_, F>) -> Result<(F, Array2<F>)> {
    same_shape(&pred, &gt)?;
    let inter = Zip::from(&pred).and(&gt).fold(F::zero(), |acc, &p, &t| acc + p * t);
    let total = pred.sum() + gt.sum();
    if total == F::zero() {
        return Ok((F::zero(), Array2::zeros(pred.dim())));
    }
    let two = cast::<F>(2.0);
    let dice = two * inter / total;
    let mut grad = Array2::zeros(pred.dim());
    Zip::from(&mut grad).and(&gt).for_each(|g, &t| {
        *g = -(two * t / total - two * inter / (total * total));
    });
    Ok((F::one() - dice, grad))
}

/// Mean binary cross-entropy over pixels (used for the focal reduction identity).
pub fn pixel_bce<F: Scalar>(pred: ArrayView2<'_, F>, labels: ArrayView2<'_, u8>) -> Result<F> {
    same_shape(&pred, &labels)?;
    let n = cast::<F>(pred.len() as f64);
    let sum = Zip::from(&pred).and(&labels).fold(F::zero(), |acc, &p, &y| {
        let (pc, _) = clamp_p(p);
        acc - if y == 1 { pc.ln() } else { (F::one() - pc).ln() }
    });
    Ok(sum / n)
}

/// Cross-entropy of a fake score against a label, with `dL/dscore`.
pub fn bce<F: Scalar>(score: F, label: Label) -> (F, F) {
    let (s, clamped) = clamp_p(score);
    if label.is_fake() {
        (-s.ln(), if clamped { F::zero() } else { -F::one() / s })
    } else {
        (-(F::one() - s).ln(), if clamped { F::zero() } else { F::one() / (F::one() - s) })
    }
}

/// Map-loss value and gradient according to `cfg`.
pub fn map_loss<F: Scalar>(pred: ArrayView2<'_, F>, gt: ArrayView2<'_, F>, cfg: &LossConfig) -> Result<(F, Array2<F>)> {
    match cfg.map_loss {
        MapLoss::L1 => l1_banded(pred, gt, cast(cfg.l1_tolerance)),
        MapLoss::L2 => l2(pred, gt),
        MapLoss::Dice => soft_dice(pred, gt),
        MapLoss::Focal => {
            let thr = cast::<F>(cfg.focal_threshold as f64);
            let labels = gt.mapv(|v| (v >= thr) as u8);
            focal(pred, labels.view(), cfg.focal_alpha, cfg.focal_gamma)
        }
    }
}

/// Value and gradients of `map_loss + cls_weight * BCE(score, label)`.
pub struct JointLoss<F> {
    pub value: F,
    pub map_term: F,
    pub cls_term: F,
    pub dmap: Array2<F>,
    pub dscore: F,
}

pub fn joint<F: Scalar>(
    pred: ArrayView2<'_, F>,
    gt: ArrayView2<'_, F>,
    score: F,
    label: Label,
    cfg: &LossConfig,
) -> Result<JointLoss<F>> {
    let (map_term, dmap) = if label.is_fake() || cfg.map_loss != MapLoss::L1 {
        map_loss(pred, gt, cfg)?
    } else {
        l1(pred, gt)?
    };
    let (cls, dcls) = bce(score, label);
    let w = cast::<F>(cfg.cls_weight);
    let (cls_term, dscore) = if cfg.cls_weight == 0.0 {
        (F::zero(), F::zero())
    } else {
        (w * cls, w * dcls)
    };
    Ok(JointLoss {
        value: map_term + cls_term,
        map_term,
        cls_term,
        dmap,
        dscore,
    })
}

fn map_views<'a>(pred: &'a FakenessMap, gt: &'a FakenessMap) -> Result<(Array2<f64>, Array2<f64>)> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape {
            left: pred.dims(),
            right: gt.dims(),
        });
    }
    Ok((pred.data().mapv(f64::from), gt.data().mapv(f64::from)))
}

pub fn l1_loss(pred: &FakenessMap, gt: &FakenessMap) -> Result<f64> {
    let (p, g) = map_views(pred, gt)?;
    Ok(l1(p.view(), g.view())?.0)
}

pub fn l2_loss(pred: &FakenessMap, gt: &FakenessMap) -> Result<f64> {
    let (p, g) = map_views(pred, gt)?;
    Ok(l2(p.view(), g.view())?.0)
}

pub fn focal_loss(pred: &FakenessMap, gt: &BinaryMap, alpha: f64, gamma: f64) -> Result<f64> {
    let p = pred.data().mapv(f64::from);
    Ok(focal(p.view(), gt.data().view(), alpha, gamma)?.0)
}

pub fn dice_loss(pred: &FakenessMap, gt: &FakenessMap) -> Result<f64> {
    let (p, g) = map_views(pred, gt)?;
    Ok(soft_dice(p.view(), g.view())?.0)
}

/// Hard Dice `2 |a & b| / (|a| + |b|)`; 1 when both are empty.
pub fn dice_coefficient(a: &BinaryMap, b: &BinaryMap) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let inter = Zip::from(a.data()).and(b.data()).fold(0usize, |acc, &x, &y| acc + (x & y) as usize);
    let total = a.count_ones() + b.count_ones();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Joint objective on maps: map loss plus weighted classification cross-entropy.
pub fn joint_loss(pred: &FakenessMap, gt: &FakenessMap, score: f64, label: Label, cfg: &LossConfig) -> Result<f64> {
    let (p, g) = map_views(pred, gt)?;
    Ok(joint(p.view(), g.view(), score, label, cfg)?.value)
}

/// Labels for focal training derived from a gray map.
pub fn focal_labels(gt: &FakenessMap, threshold: f32) -> BinaryMap {
    binarize(gt, threshold)
}
