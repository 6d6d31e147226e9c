//! Sobel responses and vertical seam localisation in diptychs.

use crate::error::{contract, Result};
use crate::image::Image;

/// Default search band, as fractions of the width.
pub const DEFAULT_BAND: (f64, f64) = (0.4, 0.6);

fn at(img: &Image, x: isize, y: isize) -> f64 {
    let xc = x.clamp(0, img.width() as isize - 1) as usize;
    let yc = y.clamp(0, img.height() as isize - 1) as usize;
    img.get(xc, yc, 0) as f64
}

/// Horizontal-derivative Sobel response (edge-replicated borders).
pub fn sobel_x(img: &Image) -> Result<Vec<f64>> {
    img.require_gray()?;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let gx = (at(img, x + 1, y - 1) + 2.0 * at(img, x + 1, y) + at(img, x + 1, y + 1))
                - (at(img, x - 1, y - 1) + 2.0 * at(img, x - 1, y) + at(img, x - 1, y + 1));
            out.push(gx);
        }
    }
    Ok(out)
}

/// Gradient magnitude `sqrt(gx² + gy²)`.
pub fn sobel_magnitude(img: &Image) -> Result<Image> {
    img.require_gray()?;
    let gx = sobel_x(img)?;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut data = Vec::with_capacity(gx.len());
    for y in 0..h {
        for x in 0..w {
            let gy = (at(img, x - 1, y + 1) + 2.0 * at(img, x, y + 1) + at(img, x + 1, y + 1))
                - (at(img, x - 1, y - 1) + 2.0 * at(img, x, y - 1) + at(img, x + 1, y - 1));
            let g = gx[(y * w + x) as usize];
            data.push((g * g + gy * gy).sqrt() as f32);
        }
    }
    Image::new(img.width(), img.height(), 1, data)
}

/// Column range `[start, end)` searched for a seam.
pub fn band_columns(width: usize, band: (f64, f64)) -> Result<(usize, usize)> {
    let (lo, hi) = band;
    if !(lo > 0.0 && hi < 1.0 && lo < hi) {
        return contract(format!("band {band:?} must satisfy 0 < lo < hi < 1"));
    }
    let start = (lo * width as f64).round() as usize;
    let end = (hi * width as f64).round() as usize;
    if start >= end {
        return contract(format!("band {band:?} is empty at width {width}"));
    }
    Ok((start, end))
}

/// Column with the largest summed absolute horizontal Sobel response inside
/// `band`; ties go to the leftmost column.
pub fn sobel_seam(img: &Image, band: (f64, f64)) -> Result<usize> {
    let gray = img.luma();
    let w = gray.width();
    if w < 8 {
        return contract(format!("seam search needs width >= 8, got {w}"));
    }
    let (start, end) = band_columns(w, band)?;
    let gx = sobel_x(&gray)?;
    let mut best = start;
    let mut best_score = f64::NEG_INFINITY;
    for x in start..end {
        let score: f64 = (0..gray.height()).map(|y| gx[y * w + x].abs()).sum();
        if score > best_score {
            best_score = score;
            best = x;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn halves(w: usize, h: usize, seam: usize, left: f32, right: f32) -> Image {
        Image::from_fn(w, h, 1, |x, _, _| if x < seam { left } else { right })
    }

    #[test]
    fn finds_centered_seam() {
        let img = halves(1024, 16, 512, 0.2, 0.8);
        let s = sobel_seam(&img, DEFAULT_BAND).unwrap();
        assert!(s.abs_diff(512) <= 1, "{s}");
    }

    #[test]
    fn identical_halves_tie_to_band_start() {
        let img = Image::filled(1024, 8, 1, 0.4);
        let (start, _) = band_columns(1024, DEFAULT_BAND).unwrap();
        assert_eq!(sobel_seam(&img, DEFAULT_BAND).unwrap(), start);
    }

    #[test]
    fn seam_outside_band_is_not_found() {
        let img = halves(1024, 8, 300, 0.2, 0.8);
        let s = sobel_seam(&img, DEFAULT_BAND).unwrap();
        let (start, end) = band_columns(1024, DEFAULT_BAND).unwrap();
        assert!((start..end).contains(&s));
        assert_ne!(s, 300);
    }

    #[test]
    fn rejects_narrow_images_and_empty_bands() {
        assert!(sobel_seam(&Image::filled(6, 4, 1, 0.0), DEFAULT_BAND).is_err());
        assert!(sobel_seam(&Image::filled(10, 4, 1, 0.0), (0.5, 0.52)).is_err());
        assert!(band_columns(100, (0.6, 0.4)).is_err());
    }
}
