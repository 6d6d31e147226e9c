//! Structural similarity metrics and the masked-region evaluation protocol.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{embed_sim, Embedder};
use crate::error::{contract, Result};
use crate::image::{Image, Mask};
use crate::spectral::{extract_hf, HighPassConfig, Normalize};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
const C1: f64 = K1 * K1;
const C2: f64 = K2 * K2;

/// SSIM value and whether the image was too small for the sliding window
/// (in which case one global window was used).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimValue {
    pub value: f64,
    pub global_fallback: bool,
}

/// Tight bounding-box crop of `mask`.
pub fn crop_to_mask(img: &Image, mask: &Mask) -> Result<Image> {
    if (mask.width(), mask.height()) != (img.width(), img.height()) {
        return contract("mask and image dimensions differ");
    }
    let b = mask
        .bbox()
        .ok_or_else(|| crate::HifiError::Contract("empty mask".into()))?;
    img.crop(b.x0, b.y0, b.width(), b.height())
}

fn gaussian_window() -> Vec<f64> {
    let half = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(WINDOW * WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

fn ssim_formula(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

fn plane(img: &Image) -> Vec<f64> {
    img.luma().data().iter().map(|&v| v as f64).collect()
}

/// Windowed SSIM on luma with an 11×11 Gaussian window (σ 1.5), unit
/// dynamic range, averaged over all fully contained windows.
pub fn ssim(a: &Image, b: &Image) -> Result<SsimValue> {
    if !a.same_dims(b) {
        return contract("ssim needs images of identical shape");
    }
    let (w, h) = (a.width(), a.height());
    let (pa, pb) = (plane(a), plane(b));
    if w < WINDOW || h < WINDOW {
        let n = (w * h) as f64;
        let ma = pa.iter().sum::<f64>() / n;
        let mb = pb.iter().sum::<f64>() / n;
        let va = pa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
        let vb = pb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
        let cov = pa
            .iter()
            .zip(&pb)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / n;
        return Ok(SsimValue {
            value: ssim_formula(ma, mb, va, vb, cov),
            global_fallback: true,
        });
    }
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - WINDOW {
        for x0 in 0..=w - WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..WINDOW {
                for dx in 0..WINDOW {
                    let g = win[dy * WINDOW + dx];
                    let i = (y0 + dy) * w + x0 + dx;
                    let (x, y) = (pa[i], pb[i]);
                    ma += g * x;
                    mb += g * y;
                    saa += g * x * x;
                    sbb += g * y * y;
                    sab += g * x * y;
                }
            }
            total += ssim_formula(ma, mb, saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            count += 1;
        }
    }
    Ok(SsimValue {
        value: total / count as f64,
        global_fallback: false,
    })
}

/// SSIM between the high-frequency maps of both images under one shared filter.
pub fn ssim_hf(a: &Image, b: &Image, cfg: &HighPassConfig) -> Result<SsimValue> {
    if !a.same_dims(b) {
        return contract("ssim_hf needs images of identical shape");
    }
    ssim(&extract_hf(&a.luma(), cfg)?, &extract_hf(&b.luma(), cfg)?)
}

/// Metric filter: same radius as given, min-max normalized.
pub fn metric_filter(radius_fraction: f64) -> Result<HighPassConfig> {
    HighPassConfig::new(radius_fraction, Normalize::MinMax)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub ssim: f64,
    pub ssim_hf: f64,
    pub embed_sim: Option<f64>,
    /// The masked crop was smaller than the SSIM window.
    pub global_fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub ssim: f64,
    pub ssim_hf: f64,
    pub embed_sim: Option<f64>,
    pub embedder: Option<String>,
    pub radius_fraction: f64,
}

/// One prediction, its ground truth and the mask they are compared under.
pub struct EvalItem<'a> {
    pub id: String,
    pub pred: &'a Image,
    pub target: &'a Image,
    pub mask: &'a Mask,
}

/// Scores the masked crop of one pair.
pub fn evaluate_pair(
    item: &EvalItem<'_>,
    cfg: &HighPassConfig,
    embedder: Option<&dyn Embedder>,
) -> Result<EvalRow> {
    if !item.pred.same_dims(item.target) {
        return contract(format!("{}: prediction and target shapes differ", item.id));
    }
    let p = crop_to_mask(item.pred, item.mask)?;
    let t = crop_to_mask(item.target, item.mask)?;
    let s = ssim(&p, &t)?;
    let hf = ssim_hf(&p, &t, cfg)?;
    let embed = match embedder {
        Some(e) => Some(embed_sim(&p, &t, e)?.0),
        None => None,
    };
    Ok(EvalRow {
        id: item.id.clone(),
        ssim: s.value,
        ssim_hf: hf.value,
        embed_sim: embed,
        global_fallback: s.global_fallback,
    })
}

/// Per-item rows (in input order) and their arithmetic means.
pub fn evaluate(
    items: &[EvalItem<'_>],
    cfg: &HighPassConfig,
    embedder: Option<&dyn Embedder>,
) -> Result<EvalReport> {
    if items.is_empty() {
        return contract("nothing to evaluate");
    }
    let rows: Vec<EvalRow> = items
        .par_iter()
        .map(|it| evaluate_pair(it, cfg, embedder))
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        ssim: mean(&|r| r.ssim),
        ssim_hf: mean(&|r| r.ssim_hf),
        embed_sim: embedder.map(|_| mean(&|r| r.embed_sim.unwrap_or(0.0))),
        embedder: embedder.map(|e| e.name().to_string()),
        radius_fraction: cfg.radius_fraction,
        rows,
    })
}
