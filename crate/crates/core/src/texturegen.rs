//! Synthetic manipulations that plant upsampling textures into localized regions.
//!
//! A manipulated region is produced the way a generator decoder would produce
//! it: the content is reduced by `scale`, its property (a per-channel color
//! offset) is edited at low resolution, and it is enlarged again by one of the
//! three upsampling families. Every family leaves a periodic fingerprint with
//! period `scale` in the second derivative of the output.

use std::fmt;

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{box_blur, constant_map, ground_truth_map, BinaryMap, FakenessMap, Image};
use crate::rng::{stream_rng, streams};

/// Upsampling family used by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[serde(alias = "transposed")]
    TransposedConv,
    /// Nearest-neighbor interpolation.
    #[serde(alias = "nearest")]
    Interpolation,
    Unpooling,
}

impl Family {
    pub const ALL: [Family; 3] = [
        Family::TransposedConv,
        Family::Interpolation,
        Family::Unpooling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::TransposedConv => "transposed_conv",
            Family::Interpolation => "interpolation",
            Family::Unpooling => "unpooling",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transposed_conv" | "transposed" => Ok(Family::TransposedConv),
            "interpolation" | "nearest" => Ok(Family::Interpolation),
            "unpooling" | "unpool" => Ok(Family::Unpooling),
            other => Err(Error::invalid("family", format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }

    pub fn as_target(self) -> f64 {
        if self.is_fake() {
            1.0
        } else {
            0.0
        }
    }
}

/// Each source pixel becomes a `scale x scale` block of its own value.
pub fn upsample_nearest(grid: ArrayView2<'_, f32>, scale: usize) -> Result<Array2<f32>> {
    check_scale(scale)?;
    let (h, w) = grid.dim();
    Ok(Array2::from_shape_fn((h * scale, w * scale), |(y, x)| {
        grid[[y / scale, x / scale]]
    }))
}

/// Source pixel at the top-left of each block, zeros elsewhere.
pub fn upsample_unpool(grid: ArrayView2<'_, f32>, scale: usize) -> Result<Array2<f32>> {
    check_scale(scale)?;
    let (h, w) = grid.dim();
    let mut out = Array2::zeros((h * scale, w * scale));
    for ((y, x), &v) in grid.indexed_iter() {
        out[[y * scale, x * scale]] = v;
    }
    Ok(out)
}

/// Transposed convolution: `grid[i, j] * kernel` accumulated at `(i stride, j stride)`.
///
/// Output side is `(n - 1) stride + k`. A kernel side divisible by the stride
/// overlaps evenly and need not produce a checkerboard; that case is computed
/// anyway with a warning.
pub fn upsample_transposed(
    grid: ArrayView2<'_, f32>,
    kernel: ArrayView2<'_, f32>,
    stride: usize,
) -> Result<Array2<f32>> {
    check_scale(stride)?;
    let (h, w) = grid.dim();
    let (kh, kw) = kernel.dim();
    if kh == 0 || kw == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("kernel", "empty grid or kernel"));
    }
    if kh % stride == 0 || kw % stride == 0 {
        log::warn!("kernel {kh}x{kw} divisible by stride {stride}: overlap is even, no checkerboard");
    }
    let mut out = Array2::zeros(((h - 1) * stride + kh, (w - 1) * stride + kw));
    for ((i, j), &v) in grid.indexed_iter() {
        if v == 0.0 {
            continue;
        }
        let mut block = out.slice_mut(ndarray::s![
            i * stride..i * stride + kh,
            j * stride..j * stride + kw
        ]);
        block.scaled_add(v, &kernel);
    }
    Ok(out)
}

fn check_scale(scale: usize) -> Result<()> {
    if scale < 2 {
        return Err(Error::invalid("scale", format!("must be >= 2, got {scale}")));
    }
    Ok(())
}

/// Mean of each `scale x scale` block; partial edge blocks average what they cover.
pub fn downsample_mean(grid: ArrayView2<'_, f32>, scale: usize) -> Array2<f32> {
    let (h, w) = grid.dim();
    let (lh, lw) = (h.div_ceil(scale), w.div_ceil(scale));
    Array2::from_shape_fn((lh, lw), |(y, x)| {
        let ys = y * scale..((y + 1) * scale).min(h);
        let xs = x * scale..((x + 1) * scale).min(w);
        let n = (ys.len() * xs.len()) as f32;
        grid.slice(ndarray::s![ys, xs]).sum() / n
    })
}

/// Mean absolute discrete Laplacian per pixel phase `(y mod scale, x mod scale)`,
/// over interior pixels. Upsampled signals show non-uniform profiles.
pub fn laplacian_phase_profile(grid: ArrayView2<'_, f32>, scale: usize) -> Vec<f64> {
    let (h, w) = grid.dim();
    let mut sums = vec![0.0f64; scale * scale];
    let mut counts = vec![0usize; scale * scale];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let lap = grid[[y - 1, x]] as f64
                + grid[[y + 1, x]] as f64
                + grid[[y, x - 1]] as f64
                + grid[[y, x + 1]] as f64
                - 4.0 * grid[[y, x]] as f64;
            let phase = (y % scale) * scale + x % scale;
            sums[phase] += lap.abs();
            counts[phase] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

/// Stand-in for a generator's encoder/decoder pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManipulator {
    pub family: Family,
    /// Row-major transposed-convolution kernel; empty for the other families.
    pub kernel: Vec<Vec<f32>>,
    pub scale: usize,
    pub blend: f32,
    /// Magnitude of the low-resolution property edit (per-channel color offset).
    pub shift: f32,
    pub seed: u64,
}

impl SyntheticManipulator {
    pub const DEFAULT_SHIFT: f32 = 0.25;

    /// Draws a transposed-convolution kernel (side `scale + 1`) from `seed` when needed.
    pub fn new(family: Family, scale: usize, blend: f32, seed: u64) -> Result<Self> {
        let kernel = if family == Family::TransposedConv {
            let mut rng = stream_rng(seed, streams::MANIPULATOR, 0);
            let side = scale + 1;
            let taps: Vec<f32> = (0..side).map(|_| rng.gen_range(0.5f32..1.5)).collect();
            let sum: f32 = taps.iter().sum();
            let taps: Vec<f32> = taps.iter().map(|t| t * scale as f32 / sum).collect();
            taps.iter()
                .map(|a| taps.iter().map(|b| a * b).collect())
                .collect()
        } else {
            Vec::new()
        };
        let m = Self {
            family,
            kernel,
            scale,
            blend,
            shift: Self::DEFAULT_SHIFT,
            seed,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_shift(mut self, shift: f32) -> Self {
        self.shift = shift;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        if !(self.blend > 0.0 && self.blend <= 1.0) {
            return Err(Error::invalid("blend", format!("must be in (0, 1], got {}", self.blend)));
        }
        if !(0.0..=1.0).contains(&self.shift) {
            return Err(Error::invalid("shift", "must be in [0, 1]"));
        }
        if self.family == Family::TransposedConv {
            let k = self.kernel_array()?;
            if k.is_empty() {
                return Err(Error::invalid("kernel", "transposed family needs a kernel"));
            }
        }
        Ok(())
    }

    pub fn kernel_array(&self) -> Result<Array2<f32>> {
        let rows = self.kernel.len();
        let cols = self.kernel.first().map_or(0, Vec::len);
        if self.kernel.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("kernel", "ragged kernel rows"));
        }
        Array2::from_shape_vec((rows, cols), self.kernel.concat())
            .map_err(|e| Error::invalid("kernel", e.to_string()))
    }

    fn channel_shifts(&self) -> [f32; 3] {
        let mut rng = stream_rng(self.seed, streams::MANIPULATOR, 1);
        [0; 3].map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * self.shift * rng.gen_range(0.5f32..=1.0)
        })
    }

    /// Full-frame artifact content: reduce, edit, enlarge, crop to `h x w`.
    pub fn synthesize(&self, base: &Image) -> Result<Image> {
        self.validate()?;
        let (h, w) = base.dims();
        let shifts = self.channel_shifts();
        let kernel = if self.family == Family::TransposedConv {
            Some(self.kernel_array()?)
        } else {
            None
        };
        let mut planes = base.planes();
        for (c, plane) in planes.iter_mut().enumerate() {
            let mut low = downsample_mean(plane.view(), self.scale);
            low.mapv_inplace(|v| (v + shifts[c]).clamp(0.0, 1.0));
            let up = match self.family {
                Family::Interpolation => upsample_nearest(low.view(), self.scale)?,
                Family::Unpooling => upsample_unpool(low.view(), self.scale)?,
                Family::TransposedConv => {
                    upsample_transposed(low.view(), kernel.as_ref().unwrap().view(), self.scale)?
                }
            };
            *plane = up.slice(ndarray::s![..h, ..w]).to_owned();
        }
        Image::from_planes(&planes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionShape {
    Rectangle,
    Ellipse,
    /// Hair-like band with a wavy lower edge.
    TopBand,
    /// Mouth-like horizontal stadium.
    BottomBand,
}

impl RegionShape {
    pub const ALL: [RegionShape; 4] = [
        RegionShape::Rectangle,
        RegionShape::Ellipse,
        RegionShape::TopBand,
        RegionShape::BottomBand,
    ];
}

/// Half-open pixel rectangle `[top, bottom) x [left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub shape: RegionShape,
    pub bounds: Bounds,
    pub feather: usize,
}

impl RegionSpec {
    pub fn rectangle(top: usize, left: usize, bottom: usize, right: usize, feather: usize) -> Self {
        Self {
            shape: RegionShape::Rectangle,
            bounds: Bounds {
                top,
                left,
                bottom,
                right,
            },
            feather,
        }
    }

    pub fn whole(height: usize, width: usize) -> Self {
        Self::rectangle(0, 0, height, width, 0)
    }

    fn inside(&self, y: usize, x: usize) -> bool {
        let b = self.bounds;
        if y < b.top || y >= b.bottom || x < b.left || x >= b.right {
            return false;
        }
        let bh = (b.bottom - b.top) as f64;
        let bw = (b.right - b.left) as f64;
        let fy = (y - b.top) as f64 + 0.5;
        let fx = (x - b.left) as f64 + 0.5;
        match self.shape {
            RegionShape::Rectangle => true,
            RegionShape::Ellipse => {
                let dy = (fy - bh / 2.0) / (bh / 2.0);
                let dx = (fx - bw / 2.0) / (bw / 2.0);
                dx * dx + dy * dy <= 1.0
            }
            RegionShape::TopBand => {
                let edge = bh * (0.8 + 0.2 * (fx / bw * std::f64::consts::TAU * 2.0).sin());
                fy <= edge
            }
            RegionShape::BottomBand => {
                let r = bh / 2.0;
                let cx = fx.clamp(r, (bw - r).max(r));
                let dy = fy - r;
                let dx = fx - cx;
                dx * dx + dy * dy <= r * r
            }
        }
    }

    /// Soft region weights in `[0, 1]`: the hard shape, box-blurred by `feather`.
    pub fn alpha(&self, height: usize, width: usize) -> Result<Array2<f32>> {
        let b = self.bounds;
        if b.bottom > height || b.right > width || b.top >= b.bottom || b.left >= b.right {
            return Err(Error::invalid(
                "region",
                format!("bounds {b:?} empty or outside {height}x{width}"),
            ));
        }
        let hard = Array2::from_shape_fn((height, width), |(y, x)| self.inside(y, x) as u8 as f32);
        if hard.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid("region", "region rasterizes to zero area"));
        }
        Ok(box_blur(hard.view(), self.feather))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Real,
    /// Localized manipulation of a real image.
    Partial,
    /// Whole-frame synthesis; ground truth is the all-one map.
    Entire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: SampleKind,
    pub family: Option<Family>,
    pub region: Option<RegionSpec>,
    pub manipulator: Option<SyntheticManipulator>,
    pub seed: u64,
}

/// One training or evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub input: Image,
    pub gt: FakenessMap,
    pub label: Label,
    /// Region of the modified property (partial manipulations only).
    pub mask: Option<BinaryMap>,
    pub provenance: Provenance,
    /// Real partner of a fake, kept so ground truth can be recomputed after degradation.
    pub reference: Option<Image>,
}

impl SamplePair {
    pub fn real(id: impl Into<String>, image: Image, seed: u64) -> Self {
        let (h, w) = image.dims();
        Self {
            id: id.into(),
            gt: FakenessMap::zeros(h, w),
            input: image,
            label: Label::Real,
            mask: None,
            provenance: Provenance {
                kind: SampleKind::Real,
                family: None,
                region: None,
                manipulator: None,
                seed,
            },
            reference: None,
        }
    }

    pub fn family(&self) -> Option<Family> {
        self.provenance.family
    }
}

/// Plants `manip`'s artifact content into `region` of `base`.
pub fn make_pair(base: &Image, region: &RegionSpec, manip: &SyntheticManipulator) -> Result<SamplePair> {
    let (h, w) = base.dims();
    let alpha = region.alpha(h, w)?;
    let artifact = manip.synthesize(base)?;
    let blend = manip.blend;
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let b = base.data()[[y, x, c]];
        let a = artifact.data()[[y, x, c]];
        b + blend * alpha[[y, x]] * (a - b)
    });
    let fake = Image::from_clamped(data)?.quantized();
    let gt = ground_truth_map(base, &fake)?;
    let mask = BinaryMap::from_fn(h, w, |y, x| alpha[[y, x]] > 0.0);
    Ok(SamplePair {
        id: format!("fake-{}", manip.seed),
        input: fake,
        gt,
        label: Label::Fake,
        mask: Some(mask),
        provenance: Provenance {
            kind: SampleKind::Partial,
            family: Some(manip.family),
            region: Some(*region),
            manipulator: Some(manip.clone()),
            seed: manip.seed,
        },
        reference: Some(base.clone()),
    })
}

/// Whole-frame synthesis: artifact content everywhere, all-one ground truth.
pub fn make_entire(base: &Image, manip: &SyntheticManipulator) -> Result<SamplePair> {
    let (h, w) = base.dims();
    let fake = manip.synthesize(base)?.quantized();
    Ok(SamplePair {
        id: format!("entire-{}", manip.seed),
        input: fake,
        gt: constant_map(h, w, 1)?,
        label: Label::Fake,
        mask: None,
        provenance: Provenance {
            kind: SampleKind::Entire,
            family: Some(manip.family),
            region: None,
            manipulator: Some(manip.clone()),
            seed: manip.seed,
        },
        reference: Some(base.clone()),
    })
}

/// Smooth content stays this far from the ends of `[0, 1]` so the noise is never clipped away.
const BASE_FLOOR: f32 = 0.12;

/// Smooth procedural composite: per-channel gradients, low-frequency blobs,
/// and mild sensor-like noise, snapped to 8-bit levels.
pub fn procedural_base(size: usize, seed: u64) -> Result<Image> {
    let mut rng = stream_rng(seed, streams::BASE_IMAGE, 0);
    let s = size as f32;
    let mut data = Array3::<f32>::zeros((size, size, 3));
    let offsets: [f32; 3] = [0; 3].map(|_| rng.gen_range(0.3..0.7));
    let gy: [f32; 3] = [0; 3].map(|_| rng.gen_range(-0.2..0.2));
    let gx: [f32; 3] = [0; 3].map(|_| rng.gen_range(-0.2..0.2));
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..rng.gen_range(3..6))
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(0.12..0.35) * s,
                [0; 3].map(|_| rng.gen_range(-0.2f32..0.2)),
            )
        })
        .collect();
    let noise = Normal::new(0.0f32, 0.03).expect("valid sigma");
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f32 / s - 0.5, x as f32 / s - 0.5);
            for c in 0..3 {
                let mut v = offsets[c] + gy[c] * fy + gx[c] * fx;
                for &(by, bx, r, amp) in &blobs {
                    let d2 = (y as f32 - by).powi(2) + (x as f32 - bx).powi(2);
                    v += amp[c] * (-d2 / (2.0 * r * r)).exp();
                }
                data[[y, x, c]] = v.clamp(BASE_FLOOR, 1.0 - BASE_FLOOR) + noise.sample(&mut rng);
            }
        }
    }
    Ok(Image::from_clamped(data)?.quantized())
}

/// Parameters for [`make_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count_real: usize,
    pub count_fake: usize,
    pub families: Vec<Family>,
    pub shapes: Vec<RegionShape>,
    pub image_size: usize,
    pub seed: u64,
    pub scale: usize,
    pub blend_min: f32,
    pub blend_max: f32,
    pub shift: f32,
    pub max_feather: usize,
    /// Fraction of fakes synthesized over the whole frame.
    pub entire_fraction: f64,
    /// Also emit the untouched base of every fake as a real sample.
    pub paired_reals: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count_real: 10,
            count_fake: 10,
            families: Family::ALL.to_vec(),
            shapes: RegionShape::ALL.to_vec(),
            image_size: 64,
            seed: 0,
            scale: 2,
            blend_min: 0.7,
            blend_max: 1.0,
            shift: SyntheticManipulator::DEFAULT_SHIFT,
            max_feather: 2,
            entire_fraction: 0.0,
            paired_reals: false,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count_fake > 0 && self.families.is_empty() {
            return Err(Error::invalid("families", "at least one family is required"));
        }
        if self.count_fake > 0 && self.shapes.is_empty() {
            return Err(Error::invalid("shapes", "at least one region shape is required"));
        }
        if self.image_size < 8 {
            return Err(Error::invalid("image_size", "must be >= 8"));
        }
        if !(self.blend_min > 0.0 && self.blend_min <= self.blend_max && self.blend_max <= 1.0) {
            return Err(Error::invalid("blend", "need 0 < blend_min <= blend_max <= 1"));
        }
        if !(0.0..=1.0).contains(&self.entire_fraction) {
            return Err(Error::invalid("entire_fraction", "must be in [0, 1]"));
        }
        check_scale(self.scale)
    }
}

fn random_region(size: usize, shape: RegionShape, max_feather: usize, rng: &mut impl Rng) -> RegionSpec {
    let (lo, hi) = ((size * 3) / 10, (size * 6) / 10);
    let (rh, rw) = match shape {
        RegionShape::TopBand => (rng.gen_range(size / 4..=size * 2 / 5), size),
        RegionShape::BottomBand => (rng.gen_range(size / 6..=size / 4), rng.gen_range(lo..=hi)),
        _ => (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)),
    };
    let top = match shape {
        RegionShape::TopBand => 0,
        RegionShape::BottomBand => rng.gen_range(size / 2..=size - rh),
        _ => rng.gen_range(0..=size - rh),
    };
    let left = rng.gen_range(0..=size - rw);
    RegionSpec {
        shape,
        bounds: Bounds {
            top,
            left,
            bottom: top + rh,
            right: left + rw,
        },
        feather: rng.gen_range(0..=max_feather),
    }
}

/// Deterministic dataset: `count_real` reals followed by `count_fake` fakes
/// stratified round-robin over families, then over region shapes. With
/// `paired_reals`, the base image of each fake follows as an extra real.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Vec<SamplePair>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.count_real + cfg.count_fake);
    for i in 0..cfg.count_real {
        let seed = crate::rng::derive_seed(cfg.seed, streams::BASE_IMAGE, i as u64);
        let base = procedural_base(cfg.image_size, seed)?;
        out.push(SamplePair::real(format!("real-{i:05}"), base, seed));
    }
    let nf = cfg.families.len().max(1);
    let mut partners = Vec::new();
    for j in 0..cfg.count_fake {
        let index = (cfg.count_real + j) as u64;
        let seed = crate::rng::derive_seed(cfg.seed, streams::BASE_IMAGE, index);
        let base = procedural_base(cfg.image_size, seed)?;
        let mut rng = stream_rng(cfg.seed, streams::REGION, index);
        let family = cfg.families[j % nf];
        let shape = cfg.shapes[(j / nf) % cfg.shapes.len()];
        let blend = if cfg.blend_max > cfg.blend_min {
            rng.gen_range(cfg.blend_min..=cfg.blend_max)
        } else {
            cfg.blend_max
        };
        let entire = cfg.entire_fraction > 0.0 && rng.gen_bool(cfg.entire_fraction);
        let region = random_region(cfg.image_size, shape, cfg.max_feather, &mut rng);
        let manip = SyntheticManipulator::new(family, cfg.scale, blend, seed)?.with_shift(cfg.shift);
        let mut pair = if entire {
            make_entire(&base, &manip)?
        } else {
            make_pair(&base, &region, &manip)?
        };
        pair.id = format!("fake-{j:05}");
        out.push(pair);
        if cfg.paired_reals {
            partners.push(SamplePair::real(format!("pair-{j:05}"), base, seed));
        }
    }
    out.extend(partners);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Brute-force accumulation, written independently of the slice-based kernel.
    fn transposed_oracle(grid: &Array2<f32>, kernel: &Array2<f32>, stride: usize) -> Array2<f32> {
        let (h, w) = grid.dim();
        let (kh, kw) = kernel.dim();
        let oh = (h - 1) * stride + kh;
        let ow = (w - 1) * stride + kw;
        let mut out = Array2::zeros((oh, ow));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for i in 0..h {
                    for j in 0..w {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                if i * stride + ky == oy && j * stride + kx == ox {
                                    acc += grid[[i, j]] * kernel[[ky, kx]];
                                }
                            }
                        }
                    }
                }
                out[[oy, ox]] = acc;
            }
        }
        out
    }

    #[test]
    fn nearest_examples() {
        let g = array![[1.0f32, 2.0], [3.0, 4.0]];
        assert_eq!(
            upsample_nearest(g.view(), 2).unwrap(),
            array![
                [1.0f32, 1.0, 2.0, 2.0],
                [1.0, 1.0, 2.0, 2.0],
                [3.0, 3.0, 4.0, 4.0],
                [3.0, 3.0, 4.0, 4.0]
            ]
        );
        assert_eq!(
            upsample_nearest(array![[5.0f32]].view(), 3).unwrap(),
            Array2::from_elem((3, 3), 5.0)
        );
        assert!(upsample_nearest(g.view(), 1).is_err());
    }

    #[test]
    fn unpool_examples() {
        assert_eq!(
            upsample_unpool(array![[1.0f32]].view(), 2).unwrap(),
            array![[1.0f32, 0.0], [0.0, 0.0]]
        );
        assert_eq!(
            upsample_unpool(array![[1.0f32, 2.0]].view(), 2).unwrap(),
            array![[1.0f32, 0.0, 2.0, 0.0], [0.0, 0.0, 0.0, 0.0]]
        );
        let z = Array2::<f32>::zeros((3, 2));
        assert!(upsample_unpool(z.view(), 2).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposed_examples() {
        let k = Array2::from_elem((3, 3), 1.0f32);
        assert_eq!(upsample_transposed(array![[1.0f32]].view(), k.view(), 2).unwrap(), k);

        let ones = Array2::from_elem((2, 2), 1.0f32);
        let out = upsample_transposed(ones.view(), k.view(), 2).unwrap();
        let expected = transposed_oracle(&ones, &k, 2);
        assert_eq!(out, expected);
        assert_eq!(out.dim(), (5, 5));
        let row_counts = [1.0f32, 1.0, 2.0, 1.0, 1.0];
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(out[[y, x]], row_counts[y] * row_counts[x]);
            }
        }

        let flat = Array2::from_elem((6, 6), 0.5f32);
        let out = upsample_transposed(flat.view(), k.view(), 2).unwrap();
        let max = out.iter().cloned().fold(f32::MIN, f32::max);
        let min = out.iter().cloned().fold(f32::MAX, f32::min);
        assert_ne!(max, min);
    }

    #[test]
    fn phase_profile_detects_upsampling() {
        // Quadratic surface: constant Laplacian on the source itself.
        let src = Array2::from_shape_fn((24, 24), |(y, x)| {
            let (fy, fx) = (y as f32 / 24.0, x as f32 / 24.0);
            0.2 + 0.3 * fy * fy + 0.25 * fx * fx
        });
        let flat = laplacian_phase_profile(src.view(), 2);
        let spread = |p: &[f64]| {
            p.iter().cloned().fold(f64::MIN, f64::max) - p.iter().cloned().fold(f64::MAX, f64::min)
        };
        assert!(spread(&flat) < 1e-6, "{flat:?}");

        let k = SyntheticManipulator::new(Family::TransposedConv, 2, 1.0, 3)
            .unwrap()
            .kernel_array()
            .unwrap();
        let outputs = [
            upsample_nearest(src.view(), 2).unwrap(),
            upsample_unpool(src.view(), 2).unwrap(),
            upsample_transposed(src.view(), k.view(), 2).unwrap(),
        ];
        for out in &outputs {
            let p = laplacian_phase_profile(out.view(), 2);
            assert!(spread(&p) > 1e-3, "{p:?}");
        }
    }

    #[test]
    fn make_pair_zero_strength_limit() {
        let base = procedural_base(32, 1).unwrap();
        let region = RegionSpec::rectangle(4, 4, 20, 24, 1);
        let manip = SyntheticManipulator::new(Family::Interpolation, 2, 1e-6, 9).unwrap();
        let pair = make_pair(&base, &region, &manip).unwrap();
        assert_eq!(pair.input, base);
        assert!(pair.gt.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn make_pair_whole_region_covers_image() {
        let base = procedural_base(32, 2).unwrap();
        let manip = SyntheticManipulator::new(Family::Unpooling, 2, 1.0, 4).unwrap();
        let pair = make_pair(&base, &RegionSpec::whole(32, 32), &manip).unwrap();
        assert!(pair.gt.data().iter().filter(|&&v| v > 0.0).count() > 32 * 32 * 9 / 10);
        assert_eq!(pair.mask.as_ref().unwrap().count_ones(), 32 * 32);
    }

    #[test]
    fn make_pair_zero_outside_region() {
        let base = procedural_base(48, 5).unwrap();
        let region = RegionSpec::rectangle(10, 8, 30, 36, 2);
        let manip = SyntheticManipulator::new(Family::Interpolation, 2, 0.9, 11).unwrap();
        let pair = make_pair(&base, &region, &manip).unwrap();
        let mask = pair.mask.as_ref().unwrap();
        for ((y, x), &v) in pair.gt.data().indexed_iter() {
            if !mask.get(y, x) {
                assert_eq!(v, 0.0);
                assert_eq!(pair.input.pixel(y, x), base.pixel(y, x));
            }
        }
        assert_eq!(pair.gt, ground_truth_map(&base, &pair.input).unwrap());
    }

    #[test]
    fn degenerate_region_rejected() {
        let base = procedural_base(16, 1).unwrap();
        let manip = SyntheticManipulator::new(Family::Interpolation, 2, 1.0, 1).unwrap();
        let empty = RegionSpec::rectangle(4, 4, 4, 10, 0);
        assert!(make_pair(&base, &empty, &manip).is_err());
        let outside = RegionSpec::rectangle(0, 0, 20, 10, 0);
        assert!(make_pair(&base, &outside, &manip).is_err());
    }

    #[test]
    fn manipulator_validation() {
        assert!(SyntheticManipulator::new(Family::Interpolation, 1, 0.5, 0).is_err());
        assert!(SyntheticManipulator::new(Family::Interpolation, 2, 0.0, 0).is_err());
        assert!(SyntheticManipulator::new(Family::Interpolation, 2, 1.5, 0).is_err());
        let t = SyntheticManipulator::new(Family::TransposedConv, 2, 0.5, 0).unwrap();
        let k = t.kernel_array().unwrap();
        assert_eq!(k.dim(), (3, 3));
        assert!((k.sum() - 4.0).abs() < 1e-5);
    }

    #[test]
    fn dataset_empty_and_deterministic() {
        let empty = make_dataset(&DatasetConfig {
            count_real: 0,
            count_fake: 0,
            ..Default::default()
        })
        .unwrap();
        assert!(empty.is_empty());

        let cfg = DatasetConfig {
            count_real: 10,
            count_fake: 10,
            families: vec![Family::Interpolation],
            image_size: 64,
            seed: 7,
            ..Default::default()
        };
        assert_eq!(make_dataset(&cfg).unwrap(), make_dataset(&cfg).unwrap());
    }

    #[test]
    fn dataset_stratification_and_labels() {
        let cfg = DatasetConfig {
            count_real: 3,
            count_fake: 9,
            families: vec![Family::TransposedConv, Family::Interpolation],
            image_size: 32,
            seed: 1,
            ..Default::default()
        };
        let ds = make_dataset(&cfg).unwrap();
        let count = |f| ds.iter().filter(|s| s.family() == Some(f)).count();
        assert_eq!(count(Family::TransposedConv), 5);
        assert_eq!(count(Family::Interpolation), 4);
        for s in &ds {
            match s.label {
                Label::Real => assert!(s.gt.data().iter().all(|&v| v == 0.0)),
                Label::Fake => {
                    assert!(s.mask.is_some());
                    let gt = ground_truth_map(s.reference.as_ref().unwrap(), &s.input).unwrap();
                    assert_eq!(gt, s.gt);
                }
            }
        }
    }

    #[test]
    fn paired_reals_are_the_fake_bases() {
        let cfg = DatasetConfig {
            count_real: 1,
            count_fake: 4,
            image_size: 24,
            paired_reals: true,
            ..Default::default()
        };
        let ds = make_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 9);
        let fakes: Vec<_> = ds.iter().filter(|s| s.label.is_fake()).collect();
        for (f, r) in fakes.iter().zip(&ds[5..]) {
            assert_eq!(r.label, Label::Real);
            assert_eq!(Some(&r.input), f.reference.as_ref());
        }
    }

    #[test]
    fn entire_synthesis_has_all_one_gt() {
        let cfg = DatasetConfig {
            count_real: 0,
            count_fake: 4,
            image_size: 16,
            entire_fraction: 1.0,
            ..Default::default()
        };
        for s in make_dataset(&cfg).unwrap() {
            assert_eq!(s.provenance.kind, SampleKind::Entire);
            assert!(s.gt.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn family_serde_aliases() {
        let f: Family = serde_json::from_str("\"nearest\"").unwrap();
        assert_eq!(f, Family::Interpolation);
        let f: Family = serde_json::from_str("\"transposed\"").unwrap();
        assert_eq!(f, Family::TransposedConv);
        assert_eq!(serde_json::to_string(&Family::Unpooling).unwrap(), "\"unpooling\"");
    }

    fn arb_grid(max: usize) -> impl Strategy<Value = Array2<f32>> {
        (1..=max, 1..=max).prop_flat_map(|(h, w)| {
            proptest::collection::vec(-2.0f32..2.0, h * w)
                .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn nearest_anchor_subsample_recovers(g in arb_grid(6), scale in 2usize..4) {
            let up = upsample_nearest(g.view(), scale).unwrap();
            let back = Array2::from_shape_fn(g.dim(), |(y, x)| up[[y * scale, x * scale]]);
            prop_assert_eq!(back, g);
        }

        #[test]
        fn unpool_conserves_mass(g in arb_grid(6), scale in 2usize..4) {
            let up = upsample_unpool(g.view(), scale).unwrap();
            prop_assert!((up.sum() - g.sum()).abs() < 1e-4);
        }

        #[test]
        fn transposed_matches_oracle(g in arb_grid(8), k in arb_grid(4), stride in 2usize..4) {
            let got = upsample_transposed(g.view(), k.view(), stride).unwrap();
            prop_assert_eq!(got, transposed_oracle(&g, &k, stride));
        }

        #[test]
        fn fake_energy_concentrates_in_mask(seed in 0u64..200, fam in 0usize..3) {
            let base = procedural_base(32, seed).unwrap();
            let region = RegionSpec::rectangle(6, 6, 22, 26, 1);
            let manip = SyntheticManipulator::new(Family::ALL[fam], 2, 0.8, seed).unwrap();
            let pair = make_pair(&base, &region, &manip).unwrap();
            let mask = pair.mask.unwrap();
            let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
            for ((y, x), &v) in pair.gt.data().indexed_iter() {
                if mask.get(y, x) { inside += v as f64; ni += 1; } else { outside += v as f64; no += 1; }
            }
            prop_assert!(inside / ni as f64 > outside / no.max(1) as f64);
        }
    }
}
