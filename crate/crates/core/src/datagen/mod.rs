//! Synthetic training data: diptych generation, splitting, filtering,
//! manifests and statistics.

mod filter;
mod generate;
mod stats;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use filter::{filter_samples, semantic_filter, text_overlap, FilterThresholds, FilterVerdict};
pub use generate::{
    gen_diptych, map_box, split_diptych, to_panel, Category, Diptych, DiptychMeta, SplitPanels,
    MASK_FILL, PANEL, WORKING,
};
pub use stats::{area_bin, dataset_stats, render_histogram, DatasetStats, AREA_BINS};

use crate::error::{contract, HifiError, Result};
use crate::image::{encode_netpbm, read_netpbm, write_atomic, BBox, Image, Mask};
use crate::objective::Example;
use crate::spectral::HighPassConfig;
use crate::trainer::TrainRecord;
use crate::vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Produced by the procedural generator.
    Synthetic,
    /// Supplied from outside the generator.
    Real,
}

/// One manifest line. Image paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub prompt: String,
    pub tokens: Vec<usize>,
    pub human: String,
    pub product: String,
    pub target: String,
    pub mask: String,
    pub source: Source,
    pub meta: DiptychMeta,
    /// Mask box in `I_gt` coordinates.
    pub bbox: BBox,
    /// Product box in working-resolution product-image coordinates.
    pub product_bbox: BBox,
    /// Seam column found by the splitter.
    pub seam_found: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<FilterVerdict>,
}

/// A record with its images loaded.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: SampleRecord,
    pub human: Image,
    pub product: Image,
    pub target: Image,
    pub mask: Mask,
}

impl Sample {
    pub fn to_example(&self, patch: usize, hf: &HighPassConfig) -> Result<Example> {
        Example::new(
            self.record.tokens.clone(),
            &self.human,
            &self.product,
            &self.target,
            &self.mask,
            patch,
            hf,
        )
    }

    pub fn to_train_record(&self, patch: usize, hf: &HighPassConfig) -> Result<TrainRecord> {
        Ok(TrainRecord {
            example: self.to_example(patch, hf)?,
            synthetic: self.record.source == Source::Synthetic,
        })
    }
}

/// Masks the box in `scene` and builds the record.
pub fn finalize_sample(
    id: &str,
    scene: &Image,
    product: &Image,
    bbox: BBox,
    product_bbox: BBox,
    meta: DiptychMeta,
    seam_found: usize,
) -> Result<Sample> {
    let mask = Mask::from_bbox(scene.width(), scene.height(), bbox)?;
    if bbox.area() == 0 {
        return contract("empty product box");
    }
    let target = scene.quantized();
    let mut human = target.clone();
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            (0..human.channels()).for_each(|c| human.set(x, y, c, MASK_FILL));
        }
    }
    let prompt = meta.caption();
    let record = SampleRecord {
        id: id.to_string(),
        tokens: vocab::tokenize(&prompt),
        prompt,
        human: format!("images/{id}_h.ppm"),
        product: format!("images/{id}_p.ppm"),
        target: format!("images/{id}_gt.ppm"),
        mask: format!("images/{id}_m.pgm"),
        source: Source::Synthetic,
        meta,
        bbox,
        product_bbox,
        seam_found,
        verdict: None,
    };
    Ok(Sample {
        record,
        human,
        product: product.quantized(),
        target,
        mask,
    })
}

/// Generates, splits and finalizes the sample for `seed`.
pub fn generate_sample(seed: u64) -> Result<Sample> {
    let d = gen_diptych(seed);
    let split = split_diptych(&d.image, WORKING)?;
    let bbox = map_box(
        to_panel(d.meta.scene_box, split.seam)?,
        split.scene_map,
        WORKING,
    )?;
    let product_bbox = map_box(d.meta.product_box, split.product_map, WORKING)?;
    finalize_sample(
        &format!("s{seed:06}"),
        &split.scene,
        &split.product,
        bbox,
        product_bbox,
        d.meta,
        split.seam,
    )
}

/// Samples for seeds `seed .. seed + count`, in seed order.
pub fn generate_samples(count: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..count as u64)
        .into_par_iter()
        .map(|k| generate_sample(seed + k))
        .collect()
}

/// Checks the masking invariants: `I_h` equals `I_gt` outside the mask and
/// the fill value inside; the mask is exactly the recorded box.
pub fn validate_sample(s: &Sample) -> Result<()> {
    let id = &s.record.id;
    if !(s.human.same_dims(&s.target) && s.human.same_dims(&s.product)) {
        return contract(format!("{id}: image dimensions differ"));
    }
    if (s.mask.width(), s.mask.height()) != (s.human.width(), s.human.height()) {
        return contract(format!("{id}: mask dimensions differ"));
    }
    let b = s.record.bbox;
    if s.mask.count() == 0 || s.mask.bbox() != Some(b) || s.mask.count() != b.area() {
        return contract(format!("{id}: mask is not the recorded box"));
    }
    for y in 0..s.human.height() {
        for x in 0..s.human.width() {
            for c in 0..s.human.channels() {
                let h = s.human.get(x, y, c);
                let ok = if s.mask.get(x, y) {
                    h == MASK_FILL
                } else {
                    h.to_bits() == s.target.get(x, y, c).to_bits()
                };
                if !ok {
                    return contract(format!("{id}: I_h inconsistent at ({x}, {y}, {c})"));
                }
            }
        }
    }
    Ok(())
}

pub fn manifest_line(r: &SampleRecord) -> String {
    serde_json::to_string(r).expect("records serialize")
}

/// Writes images and `manifest.jsonl` under `out_dir`; returns the manifest path.
pub fn write_dataset(out_dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    for s in samples {
        validate_sample(s)?;
        let r = &s.record;
        write_atomic(out_dir.join(&r.human), &encode_netpbm(&s.human)?)?;
        write_atomic(out_dir.join(&r.product), &encode_netpbm(&s.product)?)?;
        write_atomic(out_dir.join(&r.target), &encode_netpbm(&s.target)?)?;
        write_atomic(out_dir.join(&r.mask), &encode_netpbm(&s.mask.to_image())?)?;
    }
    let path = out_dir.join("manifest.jsonl");
    write_manifest(&path, samples.iter().map(|s| &s.record))?;
    Ok(path)
}

pub fn write_manifest<'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a SampleRecord>,
) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&manifest_line(r));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| HifiError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| HifiError::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Loads the images of `record`, resolving paths against `base`.
pub fn load_sample(base: &Path, record: &SampleRecord) -> Result<Sample> {
    let mask_img = read_netpbm(base.join(&record.mask))?;
    let s = Sample {
        record: record.clone(),
        human: read_netpbm(base.join(&record.human))?,
        product: read_netpbm(base.join(&record.product))?,
        target: read_netpbm(base.join(&record.target))?,
        mask: Mask::from_image(&mask_img)?,
    };
    validate_sample(&s)?;
    Ok(s)
}

/// Reads a manifest and all its images.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Sample>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .iter()
        .map(|r| load_sample(base, r))
        .collect()
}
