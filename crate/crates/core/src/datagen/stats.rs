//! Mask-area and category statistics of a manifest.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SampleRecord;
use crate::error::{contract, Result};
use crate::image::Image;

pub const AREA_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    /// Counts of mask area ratios in `[k/10, (k+1)/10)`; ratio 1 lands in the last bin.
    pub mask_area_hist: [usize; AREA_BINS],
    pub category_counts: BTreeMap<String, usize>,
}

/// Mask area as a fraction of the image, from the record's box.
fn area_ratio(r: &SampleRecord, image_area: usize) -> f64 {
    r.bbox.area() as f64 / image_area as f64
}

pub fn area_bin(ratio: f64) -> usize {
    ((ratio * AREA_BINS as f64).floor().max(0.0) as usize).min(AREA_BINS - 1)
}

/// `image_area` is the pixel count of the working images.
pub fn dataset_stats(records: &[SampleRecord], image_area: usize) -> Result<DatasetStats> {
    if records.is_empty() {
        return contract("statistics need a non-empty manifest");
    }
    let mut hist = [0; AREA_BINS];
    let mut cats = BTreeMap::new();
    for r in records {
        hist[area_bin(area_ratio(r, image_area))] += 1;
        *cats.entry(r.meta.category.clone()).or_insert(0) += 1;
    }
    Ok(DatasetStats {
        count: records.len(),
        mask_area_hist: hist,
        category_counts: cats,
    })
}

/// Bar chart of the area histogram: one 16-pixel bar per bin, 100 rows tall.
pub fn render_histogram(stats: &DatasetStats) -> Image {
    let (bar, gap, height) = (16, 4, 100);
    let width = AREA_BINS * (bar + gap) + gap;
    let peak = stats
        .mask_area_hist
        .iter()
        .copied()
        .max()
        .unwrap_or(0)
        .max(1);
    let mut img = Image::filled(width, height, 1, 1.0);
    for (k, &n) in stats.mask_area_hist.iter().enumerate() {
        let h = (n * (height - 2)).div_ceil(peak);
        let x0 = gap + k * (bar + gap);
        for y in height - h..height {
            for x in x0..x0 + bar {
                img.set(x, y, 0, 0.0);
            }
        }
    }
    img
}
