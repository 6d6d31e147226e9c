//! High-frequency map extraction: DFT, centre shift, zero a central disk,
//! shift back, inverse DFT, magnitude.

use std::rc::Rc;

use ndarr::{CustomOp, Tape, Tensor, Var};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::dft::{fftshift, ifftshift, transform2, SpectrumGrid};
use crate::error::{contract, Result};
use crate::image::Image;

/// Output values of a min-max normalized map whose range is below this are
/// treated as constant.
const FLAT_RANGE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    /// Raw magnitudes; the differentiable path.
    #[default]
    None,
    /// Rescaled to `[0, 1]`; a flat map becomes all zeros.
    MinMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HighPassConfig {
    /// Disk radius as a fraction of `min(H, W) / 2`.
    pub radius_fraction: f64,
    #[serde(default)]
    pub normalize: Normalize,
}

impl Default for HighPassConfig {
    fn default() -> Self {
        Self {
            radius_fraction: 0.1,
            normalize: Normalize::None,
        }
    }
}

impl HighPassConfig {
    pub fn new(radius_fraction: f64, normalize: Normalize) -> Result<Self> {
        let cfg = Self {
            radius_fraction,
            normalize,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.radius_fraction) {
            return contract(format!(
                "radius_fraction {} outside [0, 1)",
                self.radius_fraction
            ));
        }
        Ok(())
    }

    pub fn with_normalize(self, normalize: Normalize) -> Self {
        Self { normalize, ..self }
    }

    /// Disk radius in bins for an `h × w` spectrum.
    pub fn radius(&self, h: usize, w: usize) -> usize {
        (self.radius_fraction * h.min(w) as f64 / 2.0).round() as usize
    }
}

/// Keep-mask over the centred spectrum: bins strictly closer than `r` to
/// `(⌊H/2⌋, ⌊W/2⌋)` are dropped.
pub fn highpass_mask(h: usize, w: usize, r: usize) -> Vec<bool> {
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let r2 = (r * r) as f64;
    let mut keep = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let d2 = (u as f64 - cy).powi(2) + (v as f64 - cx).powi(2);
            keep.push(d2 >= r2);
        }
    }
    keep
}

/// The linear part of the extraction: `IDFT(ifftshift(fftshift(DFT(x)) ⊙ mask))`.
/// Accepts complex input so the same routine serves as its own adjoint.
pub fn highpass_linear(
    values: &[Complex64],
    h: usize,
    w: usize,
    r: usize,
) -> Result<Vec<Complex64>> {
    let grid = SpectrumGrid::new(h, w, values.to_vec())?;
    if r == 0 {
        return Ok(grid.into_data());
    }
    let centred = fftshift(&transform2(grid, false));
    let keep = highpass_mask(h, w, r);
    let filtered: Vec<Complex64> = centred
        .data()
        .iter()
        .zip(&keep)
        .map(|(&z, &k)| if k { z } else { Complex64::new(0.0, 0.0) })
        .collect();
    let back = ifftshift(&SpectrumGrid::new(h, w, filtered)?);
    Ok(transform2(back, true).into_data())
}

fn to_complex(values: impl Iterator<Item = f64>) -> Vec<Complex64> {
    values.map(|v| Complex64::new(v, 0.0)).collect()
}

fn minmax(values: &mut [f64]) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < FLAT_RANGE {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
}

/// High-frequency map of a grayscale plane.
pub fn extract_hf(img: &Image, cfg: &HighPassConfig) -> Result<Image> {
    img.require_gray()?;
    cfg.validate()?;
    let (h, w) = (img.height(), img.width());
    let input = to_complex(img.data().iter().map(|&v| v as f64));
    let z = highpass_linear(&input, h, w, cfg.radius(h, w))?;
    let mut mag: Vec<f64> = z.iter().map(|c| c.norm()).collect();
    if cfg.normalize == Normalize::MinMax {
        minmax(&mut mag);
    }
    Image::new(w, h, 1, mag.into_iter().map(|v| v as f32).collect())
}

/// Luma reduction, extraction, then replication back to `channels` so the
/// map can be patch-encoded like the source image.
pub fn extract_hf_rgb(img: &Image, cfg: &HighPassConfig) -> Result<Image> {
    extract_hf(&img.luma(), cfg)?.expand_channels(img.channels())
}

/// `w = g ⊙ z/|z|` (zero where `z = 0`), mapped back through the filter.
fn adjoint_from(
    z: &[Complex64],
    upstream: &[f64],
    h: usize,
    w: usize,
    r: usize,
) -> Result<Vec<f64>> {
    let weighted: Vec<Complex64> = z
        .iter()
        .zip(upstream)
        .map(|(&zi, &g)| {
            let n = zi.norm();
            if n == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                zi * (g / n)
            }
        })
        .collect();
    Ok(highpass_linear(&weighted, h, w, r)?
        .into_iter()
        .map(|c| c.re)
        .collect())
}

/// Gradient of `extract_hf` at `img`, applied to `upstream`.
///
/// The filter is real and symmetric, hence self-adjoint; the magnitude
/// contributes `z/|z|`, which reduces to the sign map for real `z`.
pub fn extract_hf_adjoint(upstream: &Image, img: &Image, cfg: &HighPassConfig) -> Result<Image> {
    img.require_gray()?;
    upstream.require_gray()?;
    cfg.validate()?;
    if cfg.normalize != Normalize::None {
        return contract("extract_hf_adjoint is only defined for normalize = none");
    }
    if !upstream.same_dims(img) {
        return contract("upstream and image dimensions differ");
    }
    let (h, w) = (img.height(), img.width());
    let r = cfg.radius(h, w);
    let z = highpass_linear(&to_complex(img.data().iter().map(|&v| v as f64)), h, w, r)?;
    let g: Vec<f64> = upstream.data().iter().map(|&v| v as f64).collect();
    let out = adjoint_from(&z, &g, h, w, r)?;
    Image::new(w, h, 1, out.into_iter().map(|v| v as f32).collect())
}

struct HighPassOp {
    h: usize,
    w: usize,
    r: usize,
    z: Rc<Vec<Complex64>>,
}

impl CustomOp for HighPassOp {
    fn name(&self) -> &'static str {
        "extract_hf"
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
    ) -> ndarr::Result<Vec<Tensor>> {
        let g = adjoint_from(&self.z, grad.data(), self.h, self.w, self.r)
            .map_err(|e| ndarr::TensorError::Contract(e.to_string()))?;
        Ok(vec![Tensor::new(inputs[0].shape(), g)?])
    }
}

/// Differentiable extraction of an `h × w` plane held in `x` (any shape with
/// `h·w` elements). Only the unnormalized variant is differentiable.
pub fn extract_hf_var<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    h: usize,
    w: usize,
    cfg: &HighPassConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    if cfg.normalize != Normalize::None {
        return contract("the min-max normalized map is not differentiable");
    }
    let value = x.value();
    if value.numel() != h * w {
        return contract(format!("plane of {} values is not {h}x{w}", value.numel()));
    }
    let r = cfg.radius(h, w);
    let z = highpass_linear(&to_complex(value.data().iter().cloned()), h, w, r)?;
    let out = Tensor::new(value.shape(), z.iter().map(|c| c.norm()).collect())?;
    Ok(tape.custom(
        &[x],
        out,
        Box::new(HighPassOp {
            h,
            w,
            r,
            z: Rc::new(z),
        }),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(frac: f64) -> HighPassConfig {
        HighPassConfig::new(frac, Normalize::None).unwrap()
    }

    fn random_plane(n: usize, seed: u64) -> Image {
        let t = Tensor::uniform(&[n * n], 0.0, 1.0, seed);
        Image::new(n, n, 1, t.data().iter().map(|&v| v as f32).collect()).unwrap()
    }

    #[test]
    fn radius_rounds_fraction_of_half_extent() {
        assert_eq!(cfg(0.1).radius(32, 32), 2);
        assert_eq!(cfg(0.5).radius(8, 8), 2);
        assert_eq!(cfg(0.0).radius(64, 64), 0);
        assert!(HighPassConfig::new(1.0, Normalize::None).is_err());
    }

    #[test]
    fn constant_image_maps_to_zero() {
        let out = extract_hf(&Image::filled(16, 16, 1, 0.5), &cfg(0.2)).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-6));
        let norm = extract_hf(
            &Image::filled(16, 16, 1, 0.5),
            &cfg(0.2).with_normalize(Normalize::MinMax),
        )
        .unwrap();
        assert!(norm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_radius_is_exact_identity_on_nonnegative_input() {
        let img = random_plane(8, 5);
        assert_eq!(extract_hf(&img, &cfg(0.0)).unwrap(), img);
    }

    #[test]
    fn zero_upstream_gives_zero_adjoint() {
        let img = random_plane(8, 6);
        let adj = extract_hf_adjoint(&Image::filled(8, 8, 1, 0.0), &img, &cfg(0.3)).unwrap();
        assert!(adj.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_filter_adjoint_passes_upstream() {
        let img = random_plane(8, 7).map(|v| v + 0.1);
        let up = random_plane(8, 8);
        assert_eq!(extract_hf_adjoint(&up, &img, &cfg(0.0)).unwrap(), up);
    }

    #[test]
    fn adjoint_rejects_minmax() {
        let img = random_plane(4, 1);
        let c = cfg(0.2).with_normalize(Normalize::MinMax);
        assert!(extract_hf_adjoint(&img, &img, &c).is_err());
    }

    #[test]
    fn rejects_color_input() {
        assert!(extract_hf(&Image::filled(4, 4, 3, 0.2), &cfg(0.2)).is_err());
    }

    #[test]
    fn mask_is_symmetric_under_negated_frequency() {
        for (h, w) in [(8, 8), (7, 9), (6, 5)] {
            let keep = highpass_mask(h, w, 2);
            // shifted index i holds signed frequency i - h/2
            for u in 0..h {
                for v in 0..w {
                    let ku = (u as isize - (h / 2) as isize).rem_euclid(h as isize) as usize;
                    let kv = (v as isize - (w / 2) as isize).rem_euclid(w as isize) as usize;
                    let nu = ((h - ku) % h + h / 2) % h;
                    let nv = ((w - kv) % w + w / 2) % w;
                    assert_eq!(keep[u * w + v], keep[nu * w + nv], "{h}x{w} ({u},{v})");
                }
            }
        }
    }
}
