//! Overlays, image grids, and line plots written as PNG.

use image::{imageops, Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::imaging::{FakenessMap, Image};
use crate::error::{Error, Result};

/// Viridis color of a value in `[0, 1]`.
pub fn colorize(v: f32) -> Rgb<u8> {
    let c = colorous::VIRIDIS.eval_continuous(v.clamp(0.0, 1.0) as f64);
    Rgb([c.r, c.g, c.b])
}

pub fn colorize_map(map: &FakenessMap) -> RgbImage {
    let (h, w) = map.dims();
    RgbImage::from_fn(w as u32, h as u32, |x, y| colorize(map.data()[[y as usize, x as usize]]))
}

/// Colorbar width for an image of width `w`.
pub fn colorbar_width(w: usize) -> usize {
    (w / 12).clamp(2, 24).min(w)
}

/// The image blended half-and-half with the colorized map, with a vertical
/// colorbar (1 at the top, 0 at the bottom) along the right edge.
pub fn overlay(image: &Image, map: &FakenessMap) -> Result<RgbImage> {
    let (h, w) = image.dims();
    if map.dims() != (h, w) {
        return Err(Error::Shape {
            left: (h, w),
            right: map.dims(),
        });
    }
    let base = image.to_rgb8();
    let heat = colorize_map(map);
    let mut out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (a, b) = (base.get_pixel(x, y), heat.get_pixel(x, y));
        Rgb([0, 1, 2].map(|c| ((a[c] as u16 + b[c] as u16 + 1) / 2) as u8))
    });
    let bar = colorbar_width(w);
    for y in 0..h {
        let v = if h == 1 { 1.0 } else { 1.0 - y as f32 / (h - 1) as f32 };
        for x in w - bar..w {
            out.put_pixel(x as u32, y as u32, colorize(v));
        }
    }
    Ok(out)
}

/// Places rows of equally sized tiles into one image.
pub fn grid(rows: &[Vec<RgbImage>]) -> Result<RgbImage> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::invalid("grid", "no tiles"))?;
    let (tw, th) = first.dimensions();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let mut out = RgbImage::from_pixel(cols * tw, rows.len() as u32 * th, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            if tile.dimensions() != (tw, th) {
                return Err(Error::invalid("grid", "tiles differ in size"));
            }
            imageops::replace(&mut out, tile, (c as u32 * tw) as i64, (r as u32 * th) as i64);
        }
    }
    Ok(out)
}

pub fn gray_tile(map: &FakenessMap) -> RgbImage {
    let g = map.to_gray8();
    RgbImage::from_fn(g.width(), g.height(), |x, y| {
        let v = g.get_pixel(x, y)[0];
        Rgb([v, v, v])
    })
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Line plot of named series over a shared x axis. The y range always spans
/// `[0, max(1, ymax)]` so relative-metric curves read against 1.
pub fn line_plot(series: &[(String, Vec<(f64, f64)>)], width: u32, height: u32) -> Result<RgbImage> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, s)| s.iter().cloned())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if pts.is_empty() {
        return Err(Error::invalid("series", "nothing to plot"));
    }
    let (mut x0, mut x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    if x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let y1 = pts.iter().map(|p| p.1).fold(1.0, f64::max) * 1.05;
    let y0 = pts.iter().map(|p| p.1).fold(0.0, f64::min);
    let margin = 24.0f32;
    let (pw, ph) = (width as f32 - 2.0 * margin, height as f32 - 2.0 * margin);
    let to_px = |x: f64, y: f64| {
        (
            margin + ((x - x0) / (x1 - x0)) as f32 * pw,
            margin + ph - ((y - y0) / (y1 - y0)) as f32 * ph,
        )
    };
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    draw_line_segment_mut(&mut img, (margin, margin + ph), (margin + pw, margin + ph), axis);
    draw_line_segment_mut(&mut img, (margin, margin), (margin, margin + ph), axis);
    let (_, one) = to_px(x0, 1.0);
    draw_line_segment_mut(&mut img, (margin, one), (margin + pw, one), Rgb([200, 200, 200]));
    for (k, (_, s)) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let finite: Vec<(f32, f32)> = s
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| to_px(x, y))
            .collect();
        for w in finite.windows(2) {
            draw_line_segment_mut(&mut img, w[0], w[1], color);
        }
        for &(x, y) in &finite {
            draw_filled_rect_mut(&mut img, Rect::at(x as i32 - 2, y as i32 - 2).of_size(5, 5), color);
        }
        // Legend swatch.
        draw_filled_rect_mut(
            &mut img,
            Rect::at(width as i32 - 20, 6 + 12 * k as i32).of_size(10, 8),
            color,
        );
    }
    draw_hollow_rect_mut(&mut img, Rect::at(0, 0).of_size(width, height), Rgb([220, 220, 220]));
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn overlay_keeps_dimensions_and_has_colorbar() {
        let img = Image::filled(20, 30, [0.5, 0.5, 0.5]).unwrap();
        let map = FakenessMap::zeros(20, 30);
        let o = overlay(&img, &map).unwrap();
        assert_eq!(o.dimensions(), (30, 20));
        assert_eq!(*o.get_pixel(29, 0), colorize(1.0));
        assert_eq!(*o.get_pixel(29, 19), colorize(0.0));
        assert!(overlay(&img, &FakenessMap::zeros(5, 5)).is_err());
    }

    #[test]
    fn colormap_endpoints_are_viridis() {
        assert_eq!(colorize(0.0), Rgb([68, 1, 84]));
        assert_eq!(colorize(1.0), Rgb([253, 231, 37]));
    }

    #[test]
    fn grid_and_plot() {
        let t = gray_tile(&FakenessMap::new(Array2::from_elem((4, 4), 1.0)).unwrap());
        let g = grid(&[vec![t.clone(), t.clone()], vec![t]]).unwrap();
        assert_eq!(g.dimensions(), (8, 8));
        let p = line_plot(&[("coss".into(), vec![(0.0, 1.0), (1.0, 0.5)])], 200, 120).unwrap();
        assert_eq!(p.dimensions(), (200, 120));
        assert!(line_plot(&[], 10, 10).is_err());
    }
}
