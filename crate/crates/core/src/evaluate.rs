//! Running a trained network over labeled samples and aggregating metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{quantize8, FakenessMap, Image, DEFAULT_THRESHOLD};
use crate::locator::{classify, LocatorNetwork};
use crate::metrics::{classification_metrics, map_metrics, MapAggregate, MapMetrics, MetricsReport};
use crate::texturegen::{Label, SamplePair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub cutoff: f64,
    pub threshold: f32,
    /// Snap predicted maps to 8-bit levels before scoring, as they are stored.
    pub quantize: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            cutoff: 0.5,
            threshold: DEFAULT_THRESHOLD,
            quantize: true,
        }
    }
}

/// Predicted map at the image's own resolution, and the fake score.
pub fn predict(net: &LocatorNetwork, image: &Image) -> Result<(FakenessMap, f64)> {
    let (map, score) = net.forward(image, None)?;
    let (h, w) = image.dims();
    let map = if map.dims() == (h, w) { map } else { map.resized(h, w)? };
    Ok((map, score))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub label: Label,
    pub score: f64,
    pub predicted: Label,
    pub metrics: MapMetrics,
    pub in_mask_mean: Option<f64>,
    pub out_mask_mean: Option<f64>,
}

impl SampleResult {
    /// Whether the prediction is brighter inside the manipulated region than outside it.
    pub fn mask_contrast_ok(&self) -> Option<bool> {
        Some(self.in_mask_mean? > self.out_mask_mean?)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    /// Localization means over fake samples only.
    pub fake_localization: MapAggregate,
    pub samples: Vec<SampleResult>,
    pub maps: Vec<FakenessMap>,
}

impl EvalOutcome {
    /// Fraction of masked fakes whose in-mask mean exceeds the out-of-mask mean.
    pub fn mask_contrast_rate(&self) -> Option<f64> {
        let flags: Vec<bool> = self.samples.iter().filter_map(|s| s.mask_contrast_ok()).collect();
        (!flags.is_empty()).then(|| flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
    }
}

pub fn evaluate(net: &LocatorNetwork, samples: &[SamplePair], opts: &EvalOptions, config_digest: &str) -> Result<EvalOutcome> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut results = Vec::with_capacity(samples.len());
    let mut maps = Vec::with_capacity(samples.len());
    for s in samples {
        let (mut map, score) = predict(net, &s.input)?;
        if map.dims() != s.gt.dims() {
            return Err(Error::Shape {
                left: map.dims(),
                right: s.gt.dims(),
            });
        }
        if opts.quantize {
            map = FakenessMap::from_clamped(map.data().mapv(quantize8))?;
        }
        let metrics = map_metrics(&map, &s.gt, opts.threshold)?;
        let (in_mask_mean, out_mask_mean) = match &s.mask {
            Some(m) if m.dims() == map.dims() => region_means(&map, m.data()),
            _ => (None, None),
        };
        results.push(SampleResult {
            id: s.id.clone(),
            label: s.label,
            score,
            predicted: classify(score, opts.cutoff),
            metrics,
            in_mask_mean,
            out_mask_mean,
        });
        maps.push(map);
    }
    let scores: Vec<f64> = results.iter().map(|r| r.score).collect();
    let labels: Vec<Label> = results.iter().map(|r| r.label).collect();
    let cls = classification_metrics(&scores, &labels, opts.cutoff)?;
    let all: Vec<MapMetrics> = results.iter().map(|r| r.metrics).collect();
    let fakes: Vec<MapMetrics> = results.iter().filter(|r| r.label.is_fake()).map(|r| r.metrics).collect();
    Ok(EvalOutcome {
        report: MetricsReport::build(&cls, &all, samples.len(), opts.threshold, opts.cutoff, config_digest.to_string()),
        fake_localization: MapAggregate::from_metrics(&fakes),
        samples: results,
        maps,
    })
}

fn region_means(map: &FakenessMap, mask: &ndarray::Array2<u8>) -> (Option<f64>, Option<f64>) {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in map.data().iter().zip(mask.iter()) {
        if m == 1 {
            si += v as f64;
            ni += 1;
        } else {
            so += v as f64;
            no += 1;
        }
    }
    ((ni > 0).then(|| si / ni as f64), (no > 0).then(|| so / no as f64))
}
