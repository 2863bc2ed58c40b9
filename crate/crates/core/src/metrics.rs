//! Classification metrics over scores and localization metrics over maps.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{binarize, gaussian_kernel_f64, BinaryMap, FakenessMap, DEFAULT_THRESHOLD, GRAY_WEIGHTS};
use crate::texturegen::Label;

pub const IINC_CONVENTION: &str =
    "1 - (|P&G|/|P| + |P&G|/|G|)/2; both empty -> 0; exactly one empty -> 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub real_acc: Option<f64>,
    pub fake_acc: Option<f64>,
    pub auc: Option<f64>,
    pub eer: Option<f64>,
}

/// ACC at `cutoff`, per-class accuracy, trapezoidal ROC AUC, and EER.
pub fn classification_metrics(scores: &[f64], labels: &[Label], cutoff: f64) -> Result<ClassificationMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            left: (scores.len(), 1),
            right: (labels.len(), 1),
        });
    }
    if scores.is_empty() {
        return Err(Error::invalid("scores", "no samples"));
    }
    let (mut correct, mut real_ok, mut fake_ok, mut n_real, mut n_fake) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted_fake = s >= cutoff;
        let ok = predicted_fake == l.is_fake();
        correct += ok as usize;
        if l.is_fake() {
            n_fake += 1;
            fake_ok += ok as usize;
        } else {
            n_real += 1;
            real_ok += ok as usize;
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let (auc, eer) = if n_real > 0 && n_fake > 0 {
        let roc = roc_curve(scores, labels);
        (Some(auc_of(&roc)), Some(eer_of(&roc)))
    } else {
        (None, None)
    };
    Ok(ClassificationMetrics {
        acc: correct as f64 / scores.len() as f64,
        real_acc: ratio(real_ok, n_real),
        fake_acc: ratio(fake_ok, n_fake),
        auc,
        eer,
    })
}

/// ROC points `(fpr, tpr)` from the highest threshold down, ties grouped.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Vec<(f64, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let pos = labels.iter().filter(|l| l.is_fake()).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]].is_fake() {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push((fp / neg, tp / pos));
    }
    pts
}

fn auc_of(roc: &[(f64, f64)]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Point where FPR equals FNR, linearly interpolated between ROC points.
fn eer_of(roc: &[(f64, f64)]) -> f64 {
    let diff = |p: &(f64, f64)| p.0 - (1.0 - p.1);
    for w in roc.windows(2) {
        let (d0, d1) = (diff(&w[0]), diff(&w[1]));
        if d0 <= 0.0 && d1 >= 0.0 {
            if d1 == d0 {
                return w[0].0;
            }
            let t = -d0 / (d1 - d0);
            return w[0].0 + t * (w[1].0 - w[0].0);
        }
    }
    1.0
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape { left: a, right: b });
    }
    Ok(())
}

/// Cosine similarity of the flattened maps; one all-zero map gives 0, both give 1.
pub fn coss(pred: &FakenessMap, gt: &FakenessMap) -> Result<f64> {
    check_dims(pred.dims(), gt.dims())?;
    Ok(cosine(pred.data().iter().map(|&v| v as f64), gt.data().iter().map(|&v| v as f64)))
}

fn cosine(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => dot / (na.sqrt() * nb.sqrt()),
    }
}

/// `10 log10(peak^2 / MSE)`; identical maps give `+inf`.
pub fn psnr(pred: &FakenessMap, gt: &FakenessMap, peak: f64) -> Result<f64> {
    check_dims(pred.dims(), gt.dims())?;
    let mse = Zip::from(pred.data())
        .and(gt.data())
        .fold(0.0, |acc, &a, &b| acc + (a as f64 - b as f64).powi(2))
        / pred.data().len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_terms(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64, peak: f64) -> f64 {
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// SSIM over a flat set of paired values with uniform weights.
pub fn global_ssim(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        va += (x - mu_a).powi(2);
        vb += (y - mu_b).powi(2);
        cv += (x - mu_a) * (y - mu_b);
    }
    ssim_terms(mu_a, mu_b, va / n, vb / n, cv / n, peak)
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) over valid
/// positions; maps smaller than the window fall back to [`global_ssim`].
pub fn ssim(pred: &FakenessMap, gt: &FakenessMap) -> Result<f64> {
    check_dims(pred.dims(), gt.dims())?;
    let (h, w) = pred.dims();
    let a = pred.data().mapv(f64::from);
    let b = gt.data().mapv(f64::from);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Ok(global_ssim(
            a.as_slice().expect("standard layout"),
            b.as_slice().expect("standard layout"),
            1.0,
        ));
    }
    let taps = gaussian_kernel_f64(SSIM_WINDOW / 2, SSIM_SIGMA);
    let filt = |src: &Array2<f64>| valid_filter(src, &taps);
    let mu_a = filt(&a);
    let mu_b = filt(&b);
    let saa = filt(&(&a * &a));
    let sbb = filt(&(&b * &b));
    let sab = filt(&(&a * &b));
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = saa.as_slice().unwrap()[i] - ma * ma;
        let vb = sbb.as_slice().unwrap()[i] - mb * mb;
        let cv = sab.as_slice().unwrap()[i] - ma * mb;
        total += ssim_terms(ma, mb, va, vb, cv, 1.0);
    }
    Ok(total / mu_a.len() as f64)
}

fn valid_filter(src: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = src.dim();
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let tmp = Array2::from_shape_fn((h, ow), |(y, x)| (0..k).map(|i| taps[i] * src[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(y, x)| (0..k).map(|i| taps[i] * tmp[[y + i, x]]).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    pub iou: f64,
    pub dice: f64,
    pub pbca: f64,
    pub iinc: f64,
}

/// IoU, Dice, pixel-wise accuracy, and IINC of two binary maps.
pub fn binary_overlap_metrics(pred: &BinaryMap, gt: &BinaryMap) -> Result<OverlapMetrics> {
    check_dims(pred.dims(), gt.dims())?;
    Ok(overlap_from_pairs(
        pred.data().iter().zip(gt.data().iter()).map(|(&p, &g)| (p == 1, g == 1)),
    ))
}

fn overlap_from_pairs(pairs: impl Iterator<Item = (bool, bool)>) -> OverlapMetrics {
    let (mut inter, mut np, mut ng, mut agree, mut n) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (p, g) in pairs {
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
        agree += (p == g) as usize;
        n += 1;
    }
    let union = np + ng - inter;
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let dice = if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    };
    let iinc = match (np == 0, ng == 0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => 1.0 - 0.5 * (inter as f64 / np as f64 + inter as f64 / ng as f64),
    };
    OverlapMetrics {
        iou,
        dice,
        pbca: agree as f64 / n.max(1) as f64,
        iinc,
    }
}

/// All map-quality metrics for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapMetrics {
    pub coss: f64,
    /// May be `+inf`.
    pub psnr: f64,
    pub ssim: f64,
    pub iou: f64,
    pub dice: f64,
    pub pbca: f64,
    pub iinc: f64,
}

pub fn map_metrics(pred: &FakenessMap, gt: &FakenessMap, threshold: f32) -> Result<MapMetrics> {
    let o = binary_overlap_metrics(&binarize(pred, threshold), &binarize(gt, threshold))?;
    Ok(MapMetrics {
        coss: coss(pred, gt)?,
        psnr: psnr(pred, gt, 1.0)?,
        ssim: ssim(pred, gt)?,
        iou: o.iou,
        dice: o.dice,
        pbca: o.pbca,
        iinc: o.iinc,
    })
}

/// Map metrics restricted to the pixels where `mask` is 1. SSIM over a pixel
/// subset uses the uniform-weight global form.
pub fn in_region_metrics(pred: &FakenessMap, gt: &FakenessMap, mask: &BinaryMap, threshold: f32) -> Result<MapMetrics> {
    check_dims(pred.dims(), gt.dims())?;
    check_dims(pred.dims(), mask.dims())?;
    let n = mask.count_ones();
    if n == 0 {
        return Err(Error::invalid("mask", "empty region"));
    }
    if n == mask.data().len() {
        return map_metrics(pred, gt, threshold);
    }
    let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data().iter()).zip(mask.data().iter()) {
        if m == 1 {
            a.push(p as f64);
            b.push(g as f64);
        }
    }
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
    let t = threshold as f64;
    let o = overlap_from_pairs(a.iter().zip(&b).map(|(&p, &g)| (p >= t, g >= t)));
    Ok(MapMetrics {
        coss: cosine(a.iter().cloned(), b.iter().cloned()),
        psnr: psnr_from_mse(mse, 1.0),
        ssim: global_ssim(&a, &b, 1.0),
        iou: o.iou,
        dice: o.dice,
        pbca: o.pbca,
        iinc: o.iinc,
    })
}

/// Aggregated evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub real_acc: Option<f64>,
    pub fake_acc: Option<f64>,
    pub auc: Option<f64>,
    pub eer: Option<f64>,
    pub coss: Option<f64>,
    /// Mean over finite values; `null` when every value was infinite.
    pub psnr: Option<f64>,
    pub psnr_infinite_count: usize,
    pub ssim: Option<f64>,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub pbca: Option<f64>,
    pub iinc: Option<f64>,
    pub n_samples: usize,
    /// Number of maps the localization means are taken over.
    pub n_localized: usize,
    pub threshold: f32,
    pub cutoff: f64,
    pub gray_weights: [f64; 3],
    pub iinc_convention: String,
    pub config_digest: String,
}

impl MetricsReport {
    pub const CSV_FIELDS: [&'static str; 14] = [
        "acc", "real_acc", "fake_acc", "auc", "eer", "coss", "psnr", "ssim", "iou", "dice", "pbca", "iinc",
        "n_samples", "config_digest",
    ];

    pub fn build(
        cls: &ClassificationMetrics,
        maps: &[MapMetrics],
        n_samples: usize,
        threshold: f32,
        cutoff: f64,
        config_digest: String,
    ) -> Self {
        let agg = MapAggregate::from_metrics(maps);
        Self {
            acc: cls.acc,
            real_acc: cls.real_acc,
            fake_acc: cls.fake_acc,
            auc: cls.auc,
            eer: cls.eer,
            coss: agg.coss,
            psnr: agg.psnr,
            psnr_infinite_count: agg.psnr_infinite_count,
            ssim: agg.ssim,
            iou: agg.iou,
            dice: agg.dice,
            pbca: agg.pbca,
            iinc: agg.iinc,
            n_samples,
            n_localized: maps.len(),
            threshold,
            cutoff,
            gray_weights: GRAY_WEIGHTS,
            iinc_convention: IINC_CONVENTION.to_string(),
            config_digest,
        }
    }

    /// Header plus one row, in [`Self::CSV_FIELDS`] order; absent values are empty.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let row = [
            format!("{}", self.acc),
            f(self.real_acc),
            f(self.fake_acc),
            f(self.auc),
            f(self.eer),
            f(self.coss),
            f(self.psnr),
            f(self.ssim),
            f(self.iou),
            f(self.dice),
            f(self.pbca),
            f(self.iinc),
            self.n_samples.to_string(),
            self.config_digest.clone(),
        ];
        format!("{}\n{}\n", Self::CSV_FIELDS.join(","), row.join(","))
    }
}

impl Default for MetricsReport {
    fn default() -> Self {
        Self::build(
            &ClassificationMetrics {
                acc: 0.0,
                real_acc: None,
                fake_acc: None,
                auc: None,
                eer: None,
            },
            &[],
            0,
            DEFAULT_THRESHOLD,
            0.5,
            String::new(),
        )
    }
}

/// Means of per-sample map metrics; PSNR excludes infinite values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MapAggregate {
    pub coss: Option<f64>,
    pub psnr: Option<f64>,
    pub psnr_infinite_count: usize,
    pub ssim: Option<f64>,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub pbca: Option<f64>,
    pub iinc: Option<f64>,
}

impl MapAggregate {
    pub fn from_metrics(maps: &[MapMetrics]) -> Self {
        let mean = |f: &dyn Fn(&MapMetrics) -> f64| {
            (!maps.is_empty()).then(|| maps.iter().map(f).sum::<f64>() / maps.len() as f64)
        };
        let finite: Vec<f64> = maps.iter().map(|m| m.psnr).filter(|p| p.is_finite()).collect();
        Self {
            coss: mean(&|m| m.coss),
            psnr: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
            psnr_infinite_count: maps.len() - finite.len(),
            ssim: mean(&|m| m.ssim),
            iou: mean(&|m| m.iou),
            dice: mean(&|m| m.dice),
            pbca: mean(&|m| m.pbca),
            iinc: mean(&|m| m.iinc),
        }
    }
}
