//! Segmented token sequences for the joint and high-frequency inputs.

use ndarr::Tensor;
use serde::{Deserialize, Serialize};

use super::patch::patchify;
use crate::error::{contract, Result};
use crate::image::Image;
use crate::spectral::{extract_hf_rgb, HighPassConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentTag {
    Human,
    Product,
    ProductHighFreq,
    Noisy,
}

/// Text ids plus three visual segments of latent tokens
/// `[human | product | noisy target]`, each `n × L` with `L = C·p²`.
/// Text ids are embedded by the model, which owns the table.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub text: Vec<usize>,
    pub visual: Tensor,
    pub segment_lengths: [usize; 3],
    /// `(rows, cols)` of each segment's patch grid.
    pub grid: (usize, usize),
    pub tags: [SegmentTag; 3],
}

impl TokenBatch {
    pub fn segment(&self, s: usize) -> Result<Tensor> {
        let n = self.segment_lengths[s];
        let start: usize = self.segment_lengths[..s].iter().sum();
        let l = self.visual.shape()[1];
        Ok(Tensor::new(
            &[n, l],
            self.visual.data()[start * l..(start + n) * l].to_vec(),
        )?)
    }

    pub fn noisy(&self) -> Result<Tensor> {
        self.segment(2)
    }

    /// Same batch with the noisy segment replaced.
    pub fn with_noisy(&self, noisy: &Tensor) -> Result<Self> {
        let l = self.visual.shape()[1];
        let n = self.segment_lengths[2];
        if noisy.shape() != [n, l] {
            return contract("replacement noisy segment has the wrong shape");
        }
        let cut = (self.segment_lengths[0] + self.segment_lengths[1]) * l;
        let mut data = self.visual.data()[..cut].to_vec();
        data.extend_from_slice(noisy.data());
        Ok(Self {
            visual: Tensor::new(self.visual.shape(), data)?,
            ..self.clone()
        })
    }

    /// Both batches split the same way over the same grid.
    pub fn same_segmentation(&self, other: &TokenBatch) -> bool {
        self.segment_lengths == other.segment_lengths
            && self.grid == other.grid
            && self.visual.shape() == other.visual.shape()
    }
}

/// `(1 − t)·x + t·ε`
pub fn corrupt(x: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return contract(format!("timestep {t} outside [0, 1]"));
    }
    if x.shape() != eps.shape() {
        return contract("noise and latent shapes differ");
    }
    Ok(x.zip_map(eps, |a, e| (1.0 - t) * a + t * e)?)
}

/// Batch from already encoded segments `[human, product, noisy]`.
pub fn assemble(
    text: &[usize],
    segments: [Tensor; 3],
    grid: (usize, usize),
    middle: SegmentTag,
) -> Result<TokenBatch> {
    let l = segments[0].shape()[1];
    if segments.iter().any(|s| s.rank() != 2 || s.shape()[1] != l) {
        return contract("segments must be token matrices of equal width");
    }
    if grid.0 * grid.1 != segments[0].shape()[0] {
        return contract("grid does not match the segment length");
    }
    let lengths = segments.each_ref().map(|s| s.shape()[0]);
    let mut data = Vec::with_capacity(lengths.iter().sum::<usize>() * l);
    for s in &segments {
        data.extend_from_slice(s.data());
    }
    Ok(TokenBatch {
        text: text.to_vec(),
        visual: Tensor::new(&[lengths.iter().sum(), l], data)?,
        segment_lengths: lengths,
        grid,
        tags: [SegmentTag::Human, middle, SegmentTag::Noisy],
    })
}

fn check_images(i_h: &Image, i_p: &Image, i_gt: &Image) -> Result<()> {
    if !i_h.same_dims(i_p) || !i_h.same_dims(i_gt) {
        return contract("human, product and target images must share dimensions");
    }
    Ok(())
}

/// `z₀`: encoded human image, encoded product, corrupted encoded target.
pub fn build_joint_tokens(
    text: &[usize],
    i_h: &Image,
    i_p: &Image,
    i_gt: &Image,
    t: f64,
    eps: &Tensor,
    p: usize,
) -> Result<TokenBatch> {
    check_images(i_h, i_p, i_gt)?;
    let noisy = corrupt(&patchify(i_gt, p)?, t, eps)?;
    let grid = (i_h.height() / p, i_h.width() / p);
    assemble(
        text,
        [patchify(i_h, p)?, patchify(i_p, p)?, noisy],
        grid,
        SegmentTag::Product,
    )
}

/// `z₀′`: as [`build_joint_tokens`] with the product replaced by its
/// high-frequency map.
#[allow(clippy::too_many_arguments)]
pub fn build_hf_tokens(
    text: &[usize],
    i_h: &Image,
    i_p: &Image,
    i_gt: &Image,
    t: f64,
    eps: &Tensor,
    p: usize,
    hf: &HighPassConfig,
) -> Result<TokenBatch> {
    check_images(i_h, i_p, i_gt)?;
    let mut batch = build_joint_tokens(text, i_h, i_p, i_gt, t, eps, p)?;
    hf_variant(&mut batch, i_p, p, hf)?;
    Ok(batch)
}

/// Replaces the product segment of a joint batch with the encoded
/// high-frequency map of `i_p`.
pub fn hf_variant(
    batch: &mut TokenBatch,
    i_p: &Image,
    p: usize,
    hf: &HighPassConfig,
) -> Result<()> {
    let middle = patchify(&extract_hf_rgb(i_p, hf)?, p)?;
    let l = batch.visual.shape()[1];
    let start = batch.segment_lengths[0] * l;
    if middle.numel() != batch.segment_lengths[1] * l {
        return contract("product image does not match the batch grid");
    }
    let mut data = batch.visual.data().to_vec();
    data[start..start + middle.numel()].copy_from_slice(middle.data());
    batch.visual = Tensor::new(batch.visual.shape(), data)?;
    batch.tags[1] = SegmentTag::ProductHighFreq;
    Ok(())
}
