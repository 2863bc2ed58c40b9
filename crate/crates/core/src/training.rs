//! Optimization loop, augmentation policy, and per-epoch checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ground_truth_map, FakenessMap, Image};
use crate::locator::{build_attention, classify, ArchConfig, AttentionMap, LimitingPlacement, LocatorNetwork};
use crate::losses::{joint, LossConfig};
use crate::nn::{Adam, FlushSubnormals};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::robustness::{degrade, DegradationKind, DegradationSpec};
use crate::texturegen::{SampleKind, SamplePair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    /// Inclusive quality range.
    Jpeg { quality: [u8; 2] },
    /// Odd kernel sizes drawn from the inclusive range.
    GaussianBlur { kernel: [usize; 2] },
    GaussianNoise { variance: [f64; 2] },
    DownscaleUpscale { ratio: [f64; 2] },
    HorizontalFlip,
}

impl AugmentOp {
    pub fn defaults() -> Vec<AugmentOp> {
        vec![
            AugmentOp::Jpeg { quality: [30, 95] },
            AugmentOp::GaussianBlur { kernel: [3, 7] },
            AugmentOp::GaussianNoise {
                variance: [0.0002, 0.002],
            },
            AugmentOp::DownscaleUpscale { ratio: [0.5, 0.9] },
            AugmentOp::HorizontalFlip,
        ]
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            AugmentOp::Jpeg { quality: [a, b] } => 1 <= a && a <= b && b <= 100,
            AugmentOp::GaussianBlur { kernel: [a, b] } => 3 <= a && a <= b && (a % 2 == 1 || a < b),
            AugmentOp::GaussianNoise { variance: [a, b] } => 0.0 <= a && a <= b && b.is_finite(),
            AugmentOp::DownscaleUpscale { ratio: [a, b] } => 0.0 < a && a <= b && b <= 1.0,
            AugmentOp::HorizontalFlip => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("augment.ops", format!("bad range in {self:?}")))
        }
    }
}

/// `p_real` / `p_fake`: probability that a real / fake sample is augmented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub p_real: f64,
    pub p_fake: f64,
    pub ops: Vec<AugmentOp>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::partial()
    }
}

impl AugmentPolicy {
    pub fn new(p_real: f64, p_fake: f64) -> Self {
        Self {
            p_real,
            p_fake,
            ops: AugmentOp::defaults(),
        }
    }

    /// Augment real images only.
    pub fn partial() -> Self {
        Self::new(1.0, 0.0)
    }

    pub fn none() -> Self {
        Self::new(0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("augment.p_real", self.p_real), ("augment.p_fake", self.p_fake)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, format!("{p} outside [0, 1]")));
            }
        }
        self.ops.iter().try_for_each(AugmentOp::validate)
    }
}

/// Applies one random op with the label's probability. Real ground truth stays
/// zero; an augmented partial fake gets its ground truth recomputed from the
/// stored real partner.
pub fn augment_sample(sample: &SamplePair, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<SamplePair> {
    let p = if sample.label.is_fake() { policy.p_fake } else { policy.p_real };
    if policy.ops.is_empty() || p <= 0.0 || rng.gen::<f64>() >= p {
        return Ok(sample.clone());
    }
    let op = policy.ops.choose(rng).expect("non-empty ops");
    let seed = rng.gen::<u64>();
    let mut out = sample.clone();
    let spec = match *op {
        AugmentOp::HorizontalFlip => {
            out.input = sample.input.flipped_horizontal();
            out.gt = sample.gt.flipped_horizontal();
            out.mask = sample.mask.as_ref().map(|m| m.flipped_horizontal());
            out.reference = sample.reference.as_ref().map(Image::flipped_horizontal);
            None
        }
        AugmentOp::Jpeg { quality: [a, b] } => Some((DegradationKind::Jpeg, rng.gen_range(a..=b) as f64)),
        AugmentOp::GaussianBlur { kernel: [a, b] } => {
            let odd: Vec<usize> = (a..=b).filter(|k| k % 2 == 1).collect();
            Some((DegradationKind::Blur, *odd.choose(rng).expect("odd kernel in range") as f64))
        }
        AugmentOp::GaussianNoise { variance: [a, b] } => Some((DegradationKind::Noise, uniform(rng, a, b))),
        AugmentOp::DownscaleUpscale { ratio: [a, b] } => Some((DegradationKind::Lowres, uniform(rng, a, b))),
    };
    if let Some((kind, parameter)) = spec {
        out.input = degrade(&sample.input, &DegradationSpec::new(kind, parameter)?, seed)?.quantized();
    }
    if sample.label.is_fake() && sample.provenance.kind == SampleKind::Partial {
        if let Some(r) = &out.reference {
            out.gt = ground_truth_map(r, &out.input)?;
        }
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, a: f64, b: f64) -> f64 {
    if a == b {
        a
    } else {
        rng.gen_range(a..=b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

/// Training uses the blurred region mask for partial fakes and the white map
/// for everything else; evaluation always uses the white map.
pub fn attention_schedule(sample: &SamplePair, phase: Phase, blur_radius: usize) -> Result<AttentionMap> {
    let (h, w) = sample.input.dims();
    if phase == Phase::Eval || !sample.label.is_fake() || sample.provenance.kind != SampleKind::Partial {
        return Ok(AttentionMap::white(h, w));
    }
    let mask = sample
        .mask
        .as_ref()
        .ok_or_else(|| Error::Data(format!("fake sample `{}` has no region mask", sample.id)))?;
    Ok(build_attention(mask, blur_radius))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Narrow five-stage U-Net for desk-scale runs.
    Compact,
    /// Wider five-stage U-Net.
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub input_size: usize,
    pub seed: u64,
    pub backbone: Backbone,
    pub limiting: LimitingPlacement,
    /// Encoder stage that receives the attention map; deepest when absent.
    pub attention_stage: Option<usize>,
    pub use_attention: bool,
    pub attention_blur_radius: usize,
    pub loss: LossConfig,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-4,
            beta1: 0.99,
            beta2: 0.999,
            weight_decay: 1e-7,
            batch_size: 8,
            input_size: 224,
            seed: 0,
            backbone: Backbone::Standard,
            limiting: LimitingPlacement::Encoder,
            attention_stage: None,
            use_attention: true,
            attention_blur_radius: 3,
            loss: LossConfig::default(),
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults: compact backbone at 64x64.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            backbone: Backbone::Compact,
            ..Self::default()
        }
    }

    pub fn arch(&self) -> ArchConfig {
        let mut arch = match self.backbone {
            Backbone::Compact => ArchConfig::compact(self.input_size),
            Backbone::Standard => ArchConfig {
                input_size: self.input_size,
                ..ArchConfig::default()
            },
        };
        arch.attention_stage = self.attention_stage;
        arch.limiting = self.limiting;
        arch
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, "must be in [0, 1)"));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        self.arch().validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: LocatorNetwork,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map(|r| r.train_loss).unwrap_or(f64::NAN)
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_LINK: &str = "best";

pub fn epoch_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join(format!("epoch-{epoch:03}"))
}

fn gt_at(gt: &FakenessMap, n: usize) -> Result<Array2<f32>> {
    Ok(if gt.dims() == (n, n) {
        gt.data().clone()
    } else {
        gt.resized(n, n)?.into_data()
    })
}

/// Loss and accuracy over a set with white attention and no augmentation.
pub fn evaluate_loss(net: &LocatorNetwork, samples: &[SamplePair], loss: &LossConfig) -> Result<(f64, f64)> {
    let n = net.config().input_size;
    let (mut total, mut correct) = (0.0, 0usize);
    for s in samples {
        let x = net.prepare_input(&s.input)?;
        let t = net.forward_trace(&x, None)?;
        let gt = gt_at(&s.gt, n)?;
        let j = joint(t.map().view(), gt.view(), t.score(), s.label, loss)?;
        total += j.value as f64;
        correct += (classify(t.score() as f64, 0.5) == s.label) as usize;
    }
    let len = samples.len().max(1) as f64;
    Ok((total / len, correct as f64 / len))
}

/// Trains a fresh network. When `checkpoint_dir` is given, every epoch is
/// saved under `epoch-NNN/`, `best` points at the epoch with the highest
/// validation accuracy (training accuracy without a validation set), and the
/// log is appended to `train_log.jsonl`.
pub fn train(train_set: &[SamplePair], val_set: &[SamplePair], cfg: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let n_fake = train_set.iter().filter(|s| s.label.is_fake()).count();
    if n_fake == 0 || n_fake == train_set.len() {
        warn!("training set contains a single class; the classifier will be degenerate");
    }
    let _flush = FlushSubnormals::new();
    let arch = cfg.arch();
    let mut net = LocatorNetwork::<f32>::new(arch, derive_seed(cfg.seed, streams::INIT, 0))?;
    let mut grads = net.zeros_like();
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let n = net.config().input_size;

    let mut log = match checkpoint_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join(LOG_FILE))?)
        }
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(cfg.seed, streams::SHUFFLE, epoch as u64));
        let aug_seed = derive_seed(cfg.seed, streams::AUGMENT, epoch as u64);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let mut rng = stream_rng(aug_seed, streams::AUGMENT, i as u64);
                let s = augment_sample(&train_set[i], &cfg.augment, &mut rng)?;
                let attn = if cfg.use_attention {
                    Some(attention_schedule(&s, Phase::Train, cfg.attention_blur_radius)?)
                } else {
                    None
                };
                let x = net.prepare_input(&s.input)?;
                let t = net.forward_trace(&x, attn.as_ref())?;
                let gt = gt_at(&s.gt, n)?;
                let j = joint(t.map().view(), gt.view(), t.score(), s.label, &cfg.loss)?;
                if !j.value.is_finite() {
                    return Err(Error::Runtime(format!("non-finite loss at epoch {epoch}, sample `{}`", s.id)));
                }
                loss_sum += j.value as f64;
                correct += (classify(t.score() as f64, 0.5) == s.label) as usize;
                net.backward(&t, &j.dmap.mapv(|v| v * scale), j.dscore * scale, &mut grads);
            }
            let g: Vec<&[f32]> = grads.params().into_iter().map(|(_, p)| p).collect();
            adam.update(net.params_mut(), g);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let train_acc = correct as f64 / train_set.len() as f64;
        let (val_loss, val_acc) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_loss(&net, val_set, &cfg.loss)?;
            (Some(l), Some(a))
        };
        info!(
            "epoch {epoch}: train loss {train_loss:.5} acc {train_acc:.4}, val loss {val_loss:?} acc {val_acc:?}"
        );
        let record = EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        };
        let select = val_acc.unwrap_or(train_acc);
        let improved = best.map_or(true, |(_, b)| select > b);
        if improved {
            best = Some((epoch, select));
        }
        if let (Some(dir), Some(file)) = (checkpoint_dir, log.as_mut()) {
            let mut events = vec![LogEvent {
                epoch,
                split: "train".into(),
                loss: train_loss,
                acc: train_acc,
            }];
            if let (Some(l), Some(a)) = (val_loss, val_acc) {
                events.push(LogEvent {
                    epoch,
                    split: "val".into(),
                    loss: l,
                    acc: a,
                });
            }
            for e in events {
                writeln!(file, "{}", serde_json::to_string(&e)?)?;
            }
            let extra = serde_json::to_value(&record)?;
            net.save(epoch_dir(dir, epoch), cfg.seed, Some(epoch), extra)?;
            if improved {
                point_best(dir, epoch)?;
            }
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        network: net,
        history,
        best_epoch: best.map(|(e, _)| e).unwrap_or(0),
    })
}

fn point_best(dir: &Path, epoch: usize) -> Result<()> {
    let link = dir.join(BEST_LINK);
    if link.symlink_metadata().is_ok() {
        if link.is_dir() && !link.symlink_metadata()?.file_type().is_symlink() {
            fs::remove_dir_all(&link)?;
        } else {
            fs::remove_file(&link)?;
        }
    }
    let target = epoch_dir(Path::new(""), epoch);
    #[cfg(unix)]
    std::os::unix::fs::symlink(&target, &link)?;
    #[cfg(not(unix))]
    {
        fs::create_dir_all(&link)?;
        for f in [crate::locator::WEIGHTS_FILE, crate::locator::SIDECAR_FILE] {
            fs::copy(dir.join(&target).join(f), link.join(f))?;
        }
    }
    Ok(())
}

/// Stratified 80/10/10 split (train, val, test) keyed by `seed`.
pub fn split_indices(labels_fake: &[bool], seed: u64) -> [Vec<usize>; 3] {
    let mut out: [Vec<usize>; 3] = Default::default();
    for (class, flag) in [false, true].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels_fake.len()).filter(|&i| labels_fake[i] == flag).collect();
        idx.shuffle(&mut stream_rng(seed, streams::SPLIT, class as u64));
        let n = idx.len();
        let n_train = (n * 8) / 10;
        let n_val = (n - n_train) / 2;
        out[0].extend_from_slice(&idx[..n_train]);
        out[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        out[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    for part in out.iter_mut() {
        part.sort_unstable();
    }
    out
}
