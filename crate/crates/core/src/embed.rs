//! Image embedding interface and the toy histogram embedder.

use crate::error::{contract, Result};
use crate::image::Image;
use crate::spectral::sobel_x;

/// Maps an image to a feature vector compared by cosine similarity.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, img: &Image) -> Result<Vec<f64>>;
}

const HUE_BINS: usize = 12;
const VALUE_BANDS: usize = 3;
const GRAY_BINS: usize = 12;
const COLOR_BINS: usize = HUE_BINS * VALUE_BANDS + GRAY_BINS;
const ORIENT_BINS: usize = 16;
/// Pixels below this saturation go to the gray ramp.
const GRAY_SATURATION: f32 = 0.2;
/// Total mass of the gradient part relative to the color part.
const GRADIENT_WEIGHT: f64 = 0.5;

fn color_bin(rgb: [f32; 3]) -> usize {
    let (h, s, v) = rgb_to_hsv(rgb.map(|c| c.clamp(0.0, 1.0)));
    if s < GRAY_SATURATION {
        return HUE_BINS * VALUE_BANDS + ((v * GRAY_BINS as f32) as usize).min(GRAY_BINS - 1);
    }
    let hue = ((h / 360.0 * HUE_BINS as f32).round() as usize) % HUE_BINS;
    let band = ((v * VALUE_BANDS as f32) as usize).min(VALUE_BANDS - 1);
    hue * VALUE_BANDS + band
}

/// 48 color bins (12 hues × 3 value bands for saturated pixels, 12 gray
/// levels otherwise) followed by 16 gradient-orientation bins weighted by
/// Sobel magnitude. The color part sums to one, the gradient part to one half.
#[derive(Clone, Copy, Debug, Default)]
pub struct HistogramEmbedder;

impl Embedder for HistogramEmbedder {
    fn name(&self) -> &str {
        "histogram64"
    }

    fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        if img.channels() != 3 {
            return contract("the histogram embedder expects RGB input");
        }
        let n = (img.width() * img.height()) as f64;
        let mut v = vec![0.0; COLOR_BINS + ORIENT_BINS];
        for px in img.data().chunks_exact(3) {
            v[color_bin([px[0], px[1], px[2]])] += 1.0 / n;
        }
        let gray = img.luma();
        let (w, h) = (gray.width(), gray.height());
        let gx = sobel_x(&gray)?;
        let transposed = Image::from_fn(h, w, 1, |x, y, _| gray.get(y, x, 0));
        let gy_t = sobel_x(&transposed)?;
        let mut total = 0.0;
        let orient = &mut v[COLOR_BINS..];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (gx[y * w + x], gy_t[x * h + y]);
                let mag = (dx * dx + dy * dy).sqrt();
                if mag > 1e-9 {
                    let angle = dy.atan2(dx).rem_euclid(std::f64::consts::PI);
                    let bin = ((angle / std::f64::consts::PI * ORIENT_BINS as f64) as usize)
                        .min(ORIENT_BINS - 1);
                    orient[bin] += mag;
                    total += mag;
                }
            }
        }
        if total > 0.0 {
            orient
                .iter_mut()
                .for_each(|o| *o *= GRADIENT_WEIGHT / total);
        }
        Ok(v)
    }
}

/// Similarity in `[0, 1]`: cosine clamped at zero. Returns `(score, degenerate)`
/// where `degenerate` flags a zero vector (score 0).
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<(f64, bool)> {
    if a.len() != b.len() {
        return contract("embeddings differ in length");
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((dot / (na * nb)).clamp(0.0, 1.0), false))
}

/// Embeds both images and compares them.
pub fn embed_sim(a: &Image, b: &Image, embedder: &dyn Embedder) -> Result<(f64, bool)> {
    cosine_score(&embedder.embed(a)?, &embedder.embed(b)?)
}

/// Rotates every pixel's hue by 180 degrees, keeping saturation and value.
pub fn hue_inverted(img: &Image) -> Result<Image> {
    if img.channels() != 3 {
        return contract("hue inversion expects RGB input");
    }
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
        let rgb = hsv_to_rgb((h + 180.0) % 360.0, s, v);
        px.copy_from_slice(&rgb);
    }
    Ok(out)
}

/// Hue in degrees, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv(rgb: [f32; 3]) -> (f32, f32, f32) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}
