//! Rasters and the pixel-level operations everything else is built on.
//!
//! Intensities are kept as `f32` in `[0, 1]`; 8-bit values only appear at file
//! boundaries (`v = byte / 255`, `byte = round(255 v)`).

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ITU-R BT.601 luma weights used by [`to_gray`].
pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Default binarization threshold for fakeness maps.
pub const DEFAULT_THRESHOLD: f32 = 0.1;

/// An `H x W x 3` color raster with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid("image", "height and width must be >= 1"));
        }
        if c != 3 {
            return Err(Error::invalid("image", format!("expected 3 channels, got {c}")));
        }
        check_unit("image", data.iter())?;
        Ok(Self { data })
    }

    /// Builds an image, clamping every intensity into `[0, 1]`.
    pub fn from_clamped(mut data: Array3<f32>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c]);
        Self::new(data)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [
            self.data[[y, x, 0]],
            self.data[[y, x, 1]],
            self.data[[y, x, 2]],
        ]
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(2), c)
    }

    /// Rebuilds an image from three planes, clamping into `[0, 1]`.
    pub fn from_planes(planes: &[Array2<f32>; 3]) -> Result<Self> {
        let (h, w) = planes[0].dim();
        for p in planes.iter() {
            if p.dim() != (h, w) {
                return Err(Error::Shape {
                    left: (h, w),
                    right: p.dim(),
                });
            }
        }
        let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| planes[c][[y, x]]);
        Self::from_clamped(data)
    }

    pub fn planes(&self) -> [Array2<f32>; 3] {
        [
            self.channel(0).to_owned(),
            self.channel(1).to_owned(),
            self.channel(2).to_owned(),
        ]
    }

    /// Snaps every intensity onto the 8-bit grid.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.mapv(quantize8),
        }
    }

    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        if self.dims() == (height, width) {
            return Ok(self.clone());
        }
        let planes = self.planes().map(|p| resize_bilinear(p.view(), height, width));
        Self::from_planes(&planes)
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        data.invert_axis(Axis(1));
        Self {
            data: data.as_standard_layout().to_owned(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = self.dims();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb([to_byte(p[0]), to_byte(p[1]), to_byte(p[2])])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        Self::new(data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Reads PNG, JPEG, or any other format the decoder recognizes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }
}

/// Single-channel gray-scale fakeness raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FakenessMap {
    data: Array2<f32>,
}

impl FakenessMap {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid("map", "height and width must be >= 1"));
        }
        check_unit("fakeness map", data.iter())?;
        Ok(Self { data })
    }

    pub fn from_clamped(mut data: Array2<f32>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(data)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height.max(1), width.max(1))),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        if self.dims() == (height, width) {
            return Ok(self.clone());
        }
        Self::from_clamped(resize_bilinear(self.data.view(), height, width))
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        data.invert_axis(Axis(1));
        Self {
            data: data.as_standard_layout().to_owned(),
        }
    }

    pub fn to_gray8(&self) -> GrayImage {
        let (h, w) = self.dims();
        GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([to_byte(self.data[[y as usize, x as usize]])])
        })
    }

    /// Writes an 8-bit single-channel PNG with `byte = round(255 v)`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
        });
        Self::new(data)
    }
}

/// A `{0, 1}` raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    data: Array2<u8>,
}

impl BinaryMap {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Domain {
                what: "binary map",
                value: v as f64,
            });
        }
        Ok(Self { data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            data: Array2::from_shape_fn((height, width), |(y, x)| f(y, x) as u8),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[[y, x]] == 1
    }

    pub fn to_map(&self) -> FakenessMap {
        FakenessMap {
            data: self.data.mapv(|v| v as f32),
        }
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        data.invert_axis(Axis(1));
        Self {
            data: data.as_standard_layout().to_owned(),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_map().save_png(path)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Ok(binarize(&FakenessMap::load_png(path)?, 0.5))
    }
}

fn check_unit<'a>(what: &'static str, values: impl Iterator<Item = &'a f32>) -> Result<()> {
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain {
                what,
                value: v as f64,
            });
        }
    }
    Ok(())
}

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize8(v: f32) -> f32 {
    to_byte(v) as f32 / 255.0
}

/// BT.601 luma of an RGB triple in `[0, 1]`.
pub fn to_gray(rgb: [f32; 3]) -> Result<f32> {
    for &c in &rgb {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Domain {
                what: "rgb component",
                value: c as f64,
            });
        }
    }
    Ok(gray_unchecked(rgb))
}

#[inline]
fn gray_unchecked(rgb: [f32; 3]) -> f32 {
    let g = GRAY_WEIGHTS[0] * rgb[0] as f64
        + GRAY_WEIGHTS[1] * rgb[1] as f64
        + GRAY_WEIGHTS[2] * rgb[2] as f64;
    g.clamp(0.0, 1.0) as f32
}

/// Gray value of the per-channel absolute difference between a real image
/// and its manipulated counterpart.
pub fn ground_truth_map(real: &Image, fake: &Image) -> Result<FakenessMap> {
    if real.dims() != fake.dims() {
        return Err(Error::Shape {
            left: real.dims(),
            right: fake.dims(),
        });
    }
    let (h, w) = real.dims();
    let data = Array2::from_shape_fn((h, w), |(y, x)| {
        let a = real.pixel(y, x);
        let b = fake.pixel(y, x);
        gray_unchecked([
            (a[0] - b[0]).abs(),
            (a[1] - b[1]).abs(),
            (a[2] - b[2]).abs(),
        ])
    });
    Ok(FakenessMap { data })
}

/// Uniform map: `1` for entirely synthesized inputs, `0` for real ones.
pub fn constant_map(height: usize, width: usize, value: u8) -> Result<FakenessMap> {
    if value > 1 {
        return Err(Error::invalid("value", "constant map value must be 0 or 1"));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("map", "height and width must be >= 1"));
    }
    Ok(FakenessMap {
        data: Array2::from_elem((height, width), value as f32),
    })
}

/// Pixels below `threshold` become 0, the rest 1.
pub fn binarize(map: &FakenessMap, threshold: f32) -> BinaryMap {
    BinaryMap {
        data: map.data.mapv(|v| (v >= threshold) as u8),
    }
}

/// Bilinear resampling with half-pixel centers and clamped borders.
///
/// Interpolation is written as `a + t (b - a)` so constant inputs stay exact.
pub fn resize_bilinear(src: ArrayView2<'_, f32>, height: usize, width: usize) -> Array2<f32> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.to_owned();
    }
    let ys: Vec<(usize, usize, f32)> = (0..height).map(|i| sample_pos(i, sh, height)).collect();
    let xs: Vec<(usize, usize, f32)> = (0..width).map(|j| sample_pos(j, sw, width)).collect();
    Array2::from_shape_fn((height, width), |(i, j)| {
        let (y0, y1, ty) = ys[i];
        let (x0, x1, tx) = xs[j];
        let top = lerp(src[[y0, x0]], src[[y0, x1]], tx);
        let bottom = lerp(src[[y1, x0]], src[[y1, x1]], tx);
        lerp(top, bottom, ty)
    })
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

fn sample_pos(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f32) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (pos.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    let t = if i1 == i0 { 0.0 } else { (pos - i0 as f64) as f32 };
    (i0, i1, t)
}

/// Reflect-101 border indexing (`dcb|abcd|cba`), clamped for tiny extents.
pub(crate) fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Normalized 1-D Gaussian taps of length `2 radius + 1`.
pub fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f32> {
    gaussian_kernel_f64(radius, sigma).into_iter().map(|t| t as f32).collect()
}

pub fn gaussian_kernel_f64(radius: usize, sigma: f64) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable convolution of a plane with a symmetric 1-D kernel (reflect-101 borders).
pub fn convolve_separable(src: ArrayView2<'_, f32>, taps: &[f32]) -> Array2<f32> {
    let (h, w) = src.dim();
    let r = (taps.len() / 2) as isize;
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * src[[y, reflect101(x as isize + k as isize - r, w)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * tmp[[reflect101(y as isize + k as isize - r, h), x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Mean over a `(2 radius + 1)^2` window, with out-of-bounds pixels counted as zero.
pub fn box_blur(src: ArrayView2<'_, f32>, radius: usize) -> Array2<f32> {
    if radius == 0 {
        return src.to_owned();
    }
    let (h, w) = src.dim();
    let r = radius as isize;
    let norm = ((2 * radius + 1) * (2 * radius + 1)) as f32;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0f32;
        for dy in -r..=r {
            let yy = y as isize + dy;
            if yy < 0 || yy >= h as isize {
                continue;
            }
            for dx in -r..=r {
                let xx = x as isize + dx;
                if xx < 0 || xx >= w as isize {
                    continue;
                }
                acc += src[[yy as usize, xx as usize]];
            }
        }
        acc / norm
    })
}

/// Record of the conventions that shape every reported number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelConventions {
    pub gray_weights: [f64; 3],
    pub binarize_threshold: f32,
    pub iinc_convention: String,
}

impl Default for PixelConventions {
    fn default() -> Self {
        Self {
            gray_weights: GRAY_WEIGHTS,
            binarize_threshold: DEFAULT_THRESHOLD,
            iinc_convention: crate::metrics::IINC_CONVENTION.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Image {
        Image::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| f(y, x, c))).unwrap()
    }

    #[test]
    fn gray_of_white_black_red() {
        assert_eq!(to_gray([1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(to_gray([0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((to_gray([1.0, 0.0, 0.0]).unwrap() - 0.299).abs() < 1e-7);
    }

    #[test]
    fn gray_rejects_out_of_range() {
        assert!(matches!(to_gray([1.5, 0.0, 0.0]), Err(Error::Domain { .. })));
        assert!(to_gray([0.0, -0.1, 0.0]).is_err());
    }

    #[test]
    fn ground_truth_cases() {
        let a = img(3, 4, |y, x, c| ((y + x + c) % 5) as f32 / 4.0);
        assert!(ground_truth_map(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));

        let black = Image::filled(2, 2, [0.0; 3]).unwrap();
        let white = Image::filled(2, 2, [1.0; 3]).unwrap();
        assert!(ground_truth_map(&black, &white)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));

        let r = Image::filled(1, 1, [0.5, 0.5, 0.5]).unwrap();
        let f = Image::filled(1, 1, [0.7, 0.3, 0.5]).unwrap();
        let m = ground_truth_map(&r, &f).unwrap();
        assert!((m.data()[[0, 0]] - 0.1772).abs() < 1e-6);
    }

    #[test]
    fn ground_truth_shape_mismatch() {
        let a = Image::filled(2, 2, [0.0; 3]).unwrap();
        let b = Image::filled(2, 3, [0.0; 3]).unwrap();
        assert!(matches!(ground_truth_map(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn constant_maps() {
        let ones = constant_map(4, 4, 1).unwrap();
        assert_eq!(ones.data().len(), 16);
        assert!(ones.data().iter().all(|&v| v == 1.0));
        assert!(constant_map(4, 4, 0).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(constant_map(1, 1, 1).unwrap().data(), &array![[1.0f32]]);
        assert!(constant_map(2, 2, 2).is_err());
    }

    #[test]
    fn binarize_rule() {
        let m = FakenessMap::new(array![[0.05, 0.2], [0.1, 0.0]]).unwrap();
        assert_eq!(binarize(&m, 0.1).data(), &array![[0u8, 1], [1, 0]]);
        assert_eq!(binarize(&FakenessMap::zeros(3, 3), 0.1).count_ones(), 0);
        let tenth = FakenessMap::new(Array2::from_elem((2, 2), 0.1)).unwrap();
        assert_eq!(binarize(&tenth, 0.1).count_ones(), 4);
    }

    #[test]
    fn invalid_rasters_rejected() {
        assert!(Image::new(Array3::zeros((0, 2, 3))).is_err());
        assert!(Image::new(Array3::zeros((2, 2, 4))).is_err());
        assert!(Image::new(Array3::from_elem((1, 1, 3), 1.5)).is_err());
        assert!(FakenessMap::new(array![[0.5, -0.2]]).is_err());
        assert!(BinaryMap::new(array![[0u8, 2]]).is_err());
    }

    #[test]
    fn bilinear_keeps_constants_exact() {
        let src = Array2::from_elem((7, 5), 1.0f32);
        let up = resize_bilinear(src.view(), 13, 11);
        assert!(up.iter().all(|&v| v == 1.0));
        let down = resize_bilinear(src.view(), 2, 3);
        assert!(down.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..7).map(|i| reflect101(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect101(-5, 1), 0);
    }

    #[test]
    fn png_roundtrip_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = img(5, 6, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0).quantized();
        let p = dir.path().join("a.png");
        a.save_png(&p).unwrap();
        assert_eq!(Image::load(&p).unwrap(), a);

        let m = FakenessMap::new(Array2::from_shape_fn((4, 3), |(y, x)| (y * 3 + x) as f32 / 11.0))
            .unwrap();
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        let back = FakenessMap::load_png(&p).unwrap();
        for (a, b) in m.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }

    fn arb_map() -> impl Strategy<Value = FakenessMap> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0.0f32..=1.0, h * w).prop_map(move |v| {
                FakenessMap::new(Array2::from_shape_vec((h, w), v).unwrap()).unwrap()
            })
        })
    }

    fn arb_pair() -> impl Strategy<Value = (Image, Image)> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            let n = h * w * 3;
            (
                proptest::collection::vec(0.0f32..=1.0, n),
                proptest::collection::vec(0.0f32..=1.0, n),
            )
                .prop_map(move |(a, b)| {
                    (
                        Image::new(Array3::from_shape_vec((h, w, 3), a).unwrap()).unwrap(),
                        Image::new(Array3::from_shape_vec((h, w, 3), b).unwrap()).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn gt_symmetric_and_zero_on_self((a, b) in arb_pair()) {
            prop_assert_eq!(ground_truth_map(&a, &b).unwrap(), ground_truth_map(&b, &a).unwrap());
            prop_assert!(ground_truth_map(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        }

        #[test]
        fn binarize_idempotent_and_monotone(m in arb_map(), t1 in 0.0f32..=1.0, t2 in 0.0f32..=1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let b = binarize(&m, lo);
            prop_assert_eq!(binarize(&b.to_map(), hi.max(1e-6)), b.clone());
            let strict = binarize(&m, hi);
            for (s, l) in strict.data().iter().zip(b.data().iter()) {
                prop_assert!(*s <= *l);
            }
        }

        #[test]
        fn eight_bit_roundtrip_within_one_level(m in arb_map()) {
            let g = m.to_gray8();
            for ((y, x), &v) in m.data().indexed_iter() {
                let back = g.get_pixel(x as u32, y as u32)[0] as f32 / 255.0;
                prop_assert!((back - v).abs() <= 1.0 / 255.0);
            }
        }
    }
}
