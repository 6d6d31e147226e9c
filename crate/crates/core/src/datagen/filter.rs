//! Semantic and textual consistency filters.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::embed::{embed_sim, Embedder};
use crate::error::{contract, Result};
use crate::image::{BBox, Image};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterThresholds {
    pub semantic: f64,
    pub textual: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            semantic: 0.85,
            textual: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterVerdict {
    pub semantic_score: f64,
    pub textual_overlap: f64,
    pub passed: bool,
    pub thresholds: FilterThresholds,
}

impl FilterVerdict {
    pub fn new(semantic_score: f64, textual_overlap: f64, thresholds: FilterThresholds) -> Self {
        Self {
            semantic_score,
            textual_overlap,
            passed: semantic_score >= thresholds.semantic && textual_overlap >= thresholds.textual,
            thresholds,
        }
    }
}

/// Jaccard similarity of the case-folded whitespace token sets; two empty
/// strings count as identical.
pub fn text_overlap(a: &str, b: &str) -> f64 {
    let set =
        |s: &str| -> BTreeSet<String> { s.split_whitespace().map(str::to_lowercase).collect() };
    let (sa, sb) = (set(a), set(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Embedding similarity of two crops and whether it reaches `threshold`.
/// A degenerate embedding scores 0 and fails.
pub fn semantic_filter(
    a: &Image,
    b: &Image,
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<(f64, bool)> {
    let (score, degenerate) = embed_sim(a, b, embedder)?;
    Ok((score, !degenerate && score >= threshold))
}

fn crop_box(img: &Image, b: BBox) -> Result<Image> {
    if b.area() == 0 {
        return contract("empty crop box");
    }
    img.crop(b.x0, b.y0, b.width(), b.height())
}

/// Scores every sample: product crop of `I_p` against the product crop of
/// `I_gt`, and the two label readings.
pub fn filter_samples(
    samples: &[Sample],
    embedder: &dyn Embedder,
    th: FilterThresholds,
) -> Result<Vec<FilterVerdict>> {
    samples
        .par_iter()
        .map(|s| {
            let a = crop_box(&s.product, s.record.product_bbox)?;
            let b = crop_box(&s.target, s.record.bbox)?;
            let (sem, _) = semantic_filter(&a, &b, embedder, th.semantic)?;
            let txt = text_overlap(&s.record.meta.ocr_product, &s.record.meta.ocr_scene);
            Ok(FilterVerdict::new(sem, txt, th))
        })
        .collect()
}
