//! Real-world degradations, degradation sweeps, and the quadrant shuffle test.

use std::fmt;
use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use ndarray::{s, Array2, Array3};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::predict;
use crate::imaging::{convolve_separable, gaussian_kernel, ground_truth_map, FakenessMap, Image};
use crate::locator::{classify, LocatorNetwork};
use crate::metrics::{coss, psnr, ssim};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::texturegen::SamplePair;

/// Codec used for the jpeg degradation, recorded in reports.
pub const JPEG_CODEC: &str = "image-rs jpeg encoder 0.25 (baseline, 4:2:0)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Jpeg,
    Blur,
    Noise,
    Lowres,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 4] = [Self::Jpeg, Self::Blur, Self::Noise, Self::Lowres];

    pub fn name(self) -> &'static str {
        match self {
            Self::Jpeg => "jpeg",
            Self::Blur => "blur",
            Self::Noise => "noise",
            Self::Lowres => "lowres",
        }
    }

    /// Parameter value that leaves images untouched. For jpeg and blur, 0 means "skip".
    pub fn identity_parameter(self) -> f64 {
        match self {
            Self::Jpeg | Self::Blur | Self::Noise => 0.0,
            Self::Lowres => 1.0,
        }
    }

    /// Representative sweep grid, identity point first.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Self::Jpeg => vec![0.0, 90.0, 70.0, 50.0, 30.0, 10.0],
            Self::Blur => vec![0.0, 3.0, 5.0, 7.0, 9.0],
            Self::Noise => vec![0.0, 0.0005, 0.001, 0.002, 0.005],
            Self::Lowres => vec![1.0, 0.9, 0.7, 0.5, 0.3],
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jpeg" => Ok(Self::Jpeg),
            "blur" => Ok(Self::Blur),
            "noise" => Ok(Self::Noise),
            "lowres" | "low_resolution" => Ok(Self::Lowres),
            other => Err(Error::invalid("kind", format!("unknown degradation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// Quality for jpeg, kernel size for blur, variance for noise, side ratio for lowres.
    pub parameter: f64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, parameter: f64) -> Result<Self> {
        let spec = Self { kind, parameter };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity(kind: DegradationKind) -> Self {
        Self {
            kind,
            parameter: kind.identity_parameter(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.parameter == self.kind.identity_parameter()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.parameter;
        let ok = p.is_finite()
            && match self.kind {
                DegradationKind::Jpeg => p == 0.0 || (p.fract() == 0.0 && (1.0..=100.0).contains(&p)),
                DegradationKind::Blur => p == 0.0 || (p.fract() == 0.0 && p >= 3.0 && p as usize % 2 == 1),
                DegradationKind::Noise => p >= 0.0,
                DegradationKind::Lowres => p > 0.0 && p <= 1.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("parameter", format!("{p} outside the domain of {}", self.kind)))
        }
    }
}

/// Gaussian sigma for an odd kernel size `k`.
pub fn blur_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

pub fn degrade(image: &Image, spec: &DegradationSpec, seed: u64) -> Result<Image> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(image.clone());
    }
    match spec.kind {
        DegradationKind::Jpeg => jpeg_roundtrip(image, spec.parameter as u8),
        DegradationKind::Blur => {
            let k = spec.parameter as usize;
            let taps = gaussian_kernel(k / 2, blur_sigma(k));
            let planes = image.planes().map(|p| convolve_separable(p.view(), &taps));
            Image::from_planes(&planes)
        }
        DegradationKind::Noise => {
            let mut rng = stream_rng(seed, streams::DEGRADE, 0);
            let normal = Normal::new(0.0, spec.parameter.sqrt()).expect("non-negative variance");
            let data = image.data().mapv(|v| v + normal.sample(&mut rng) as f32);
            Image::from_clamped(data)
        }
        DegradationKind::Lowres => {
            let (h, w) = image.dims();
            let r = spec.parameter;
            let (sh, sw) = (
                ((h as f64 * r).round() as usize).max(1),
                ((w as f64 * r).round() as usize).max(1),
            );
            image.resized(sh, sw)?.resized(h, w)
        }
    }
}

fn jpeg_roundtrip(image: &Image, quality: u8) -> Result<Image> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(Cursor::new(&mut buf), quality).encode_image(&image.to_rgb8())?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?.to_rgb8();
    Image::from_rgb8(&decoded)
}

pub fn degraded_ground_truth(real: &Image, fake: &Image, spec: &DegradationSpec, seed: u64) -> Result<FakenessMap> {
    ground_truth_map(real, &degrade(fake, spec, seed)?)
}

pub const IDENTITY_PERMUTATION: [usize; 4] = [0, 1, 2, 3];

/// Output quadrant `q` (TL, TR, BL, BR) receives input quadrant `perm[q]`.
pub fn disorganize(image: &Image, gt: &FakenessMap, perm: [usize; 4]) -> Result<(Image, FakenessMap)> {
    check_permutation(perm)?;
    let (h, w) = image.dims();
    if gt.dims() != (h, w) {
        return Err(Error::Shape {
            left: (h, w),
            right: gt.dims(),
        });
    }
    if h % 2 == 1 || w % 2 == 1 {
        return Err(Error::invalid("image", format!("{h}x{w} has an odd side")));
    }
    let (hh, hw) = (h / 2, w / 2);
    let origin = |q: usize| ((q / 2) * hh, (q % 2) * hw);
    let mut img = Array3::<f32>::zeros((h, w, 3));
    let mut map = Array2::<f32>::zeros((h, w));
    for (q, &src) in perm.iter().enumerate() {
        let (dy, dx) = origin(q);
        let (sy, sx) = origin(src);
        img.slice_mut(s![dy..dy + hh, dx..dx + hw, ..])
            .assign(&image.data().slice(s![sy..sy + hh, sx..sx + hw, ..]));
        map.slice_mut(s![dy..dy + hh, dx..dx + hw])
            .assign(&gt.data().slice(s![sy..sy + hh, sx..sx + hw]));
    }
    Ok((Image::new(img)?, FakenessMap::new(map)?))
}

pub fn inverse_permutation(perm: [usize; 4]) -> Result<[usize; 4]> {
    check_permutation(perm)?;
    let mut inv = [0; 4];
    for (q, &p) in perm.iter().enumerate() {
        inv[p] = q;
    }
    Ok(inv)
}

fn check_permutation(perm: [usize; 4]) -> Result<()> {
    let mut seen = [false; 4];
    for &p in &perm {
        if p > 3 || seen[p] {
            return Err(Error::invalid("permutation", format!("{perm:?} is not a permutation of 0..4")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Sum of map mass in each quadrant (TL, TR, BL, BR).
pub fn quadrant_mass(map: &FakenessMap) -> [f64; 4] {
    let (h, w) = map.dims();
    let mut mass = [0.0; 4];
    for ((y, x), &v) in map.data().indexed_iter() {
        let q = 2 * usize::from(y >= h / 2) + usize::from(x >= w / 2);
        mass[q] += v as f64;
    }
    mass
}

pub const SWEEP_METRICS: [&str; 4] = ["acc", "coss", "psnr", "ssim"];

/// Mean metrics over a set of fakes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepValues {
    pub acc: f64,
    pub coss: f64,
    /// Mean over finite values; `None` when all were infinite.
    pub psnr: Option<f64>,
    pub ssim: f64,
}

impl SweepValues {
    fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "acc" => Some(self.acc),
            "coss" => Some(self.coss),
            "psnr" => self.psnr,
            "ssim" => Some(self.ssim),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: DegradationKind,
    pub parameter: f64,
    pub metric: String,
    pub value: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub kind: DegradationKind,
    pub baseline: SweepValues,
    pub points: Vec<(f64, SweepValues)>,
    pub rows: Vec<SweepRow>,
    pub jpeg_codec: String,
}

impl SweepCurve {
    /// `gamma` values of one metric in grid order.
    pub fn gammas(&self, metric: &str) -> Vec<Option<f64>> {
        self.rows.iter().filter(|r| r.metric == metric).map(|r| r.gamma).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,parameter,metric,gamma\n");
        for r in &self.rows {
            let g = r.gamma.map(|g| g.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.kind, r.parameter, r.metric, g));
        }
        out
    }
}

/// Ratio of degraded to undegraded values; equal values give exactly 1.
pub fn gamma(degraded: Option<f64>, baseline: Option<f64>) -> Option<f64> {
    match (degraded, baseline) {
        (Some(d), Some(b)) if d == b => Some(1.0),
        (Some(d), Some(b)) if b != 0.0 => Some(d / b),
        _ => None,
    }
}

fn fake_values(net: &LocatorNetwork, fakes: &[&SamplePair], spec: &DegradationSpec, seed: u64) -> Result<SweepValues> {
    let (mut acc, mut cs, mut ss) = (0.0, 0.0, 0.0);
    let mut finite = Vec::new();
    for (i, s) in fakes.iter().enumerate() {
        let param_key = spec.parameter.to_bits();
        let sample_seed = derive_seed(derive_seed(seed, streams::DEGRADE, i as u64), streams::DEGRADE, param_key);
        let input = degrade(&s.input, spec, sample_seed)?;
        let gt = match &s.reference {
            Some(r) if !spec.is_identity() => ground_truth_map(r, &input)?,
            _ => s.gt.clone(),
        };
        let (map, score) = predict(net, &input)?;
        acc += classify(score, 0.5).is_fake() as u8 as f64;
        cs += coss(&map, &gt)?;
        ss += ssim(&map, &gt)?;
        let p = psnr(&map, &gt, 1.0)?;
        if p.is_finite() {
            finite.push(p);
        }
    }
    let n = fakes.len() as f64;
    Ok(SweepValues {
        acc: acc / n,
        coss: cs / n,
        psnr: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        ssim: ss / n,
    })
}

/// Evaluates degraded fakes at every grid point and reports gamma per metric.
pub fn sweep(net: &LocatorNetwork, eval_set: &[SamplePair], kind: DegradationKind, grid: &[f64], seed: u64) -> Result<SweepCurve> {
    if grid.is_empty() {
        return Err(Error::invalid("grid", "empty parameter grid"));
    }
    let specs = grid
        .iter()
        .map(|&p| DegradationSpec::new(kind, p))
        .collect::<Result<Vec<_>>>()?;
    let fakes: Vec<&SamplePair> = eval_set.iter().filter(|s| s.label.is_fake()).collect();
    if fakes.is_empty() {
        return Err(Error::Data("sweep needs at least one fake sample".into()));
    }
    let baseline = fake_values(net, &fakes, &DegradationSpec::identity(kind), seed)?;
    let mut points = Vec::with_capacity(specs.len());
    let mut rows = Vec::with_capacity(specs.len() * SWEEP_METRICS.len());
    for spec in &specs {
        let v = if spec.is_identity() {
            baseline
        } else {
            fake_values(net, &fakes, spec, seed)?
        };
        for m in SWEEP_METRICS {
            rows.push(SweepRow {
                kind,
                parameter: spec.parameter,
                metric: m.to_string(),
                value: v.get(m),
                gamma: gamma(v.get(m), baseline.get(m)),
            });
        }
        points.push((spec.parameter, v));
    }
    Ok(SweepCurve {
        kind,
        baseline,
        points,
        rows,
        jpeg_codec: JPEG_CODEC.to_string(),
    })
}

/// Largest rise between consecutive values (0 for a non-increasing sequence).
pub fn max_increase(values: &[f64]) -> f64 {
    values.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}
