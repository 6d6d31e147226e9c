//! Flow-matching corruption, clean-latent reconstruction and the training
//! losses.

use std::rc::Rc;

use ndarr::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::hifidit::{
    assemble, corrupt, downsample_mask, patchify, unpatchify_index, DownsampledMask, ModelInput,
    SegmentTag, TokenBatch, VelocityField,
};
use crate::image::{Image, Mask, LUMA};
use crate::spectral::{extract_hf_rgb, extract_hf_var, HighPassConfig, Normalize};

/// A clean latent on the straight path towards noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub x_t: Tensor,
    pub v_target: Tensor,
}

pub fn make_noisy(x0: &Tensor, t: f64, eps: &Tensor) -> Result<NoisySample> {
    let x_t = corrupt(x0, t, eps)?;
    let v_target = eps.zip_map(x0, |e, x| e - x)?;
    Ok(NoisySample {
        x0: x0.clone(),
        eps: eps.clone(),
        t,
        x_t,
        v_target,
    })
}

/// `x_t − t·v̂`
pub fn predict_x0(x_t: &Tensor, v: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return contract(format!("timestep {t} outside [0, 1]"));
    }
    Ok(x_t.zip_map(v, |x, v| x - t * v)?)
}

pub fn loss_mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return contract("prediction and target shapes differ");
    }
    if pred.numel() == 0 {
        return contract("empty prediction");
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / pred.numel() as f64)
}

fn luma_weights(channels: usize) -> Vec<f64> {
    match channels {
        3 => LUMA.iter().map(|&w| w as f64).collect(),
        c => vec![1.0 / c as f64; c],
    }
}

/// Detail loss value plus a flag for the degenerate empty-mask case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DaLoss {
    pub value: f64,
    pub empty_mask: bool,
}

/// Pixel geometry and mask shared by the predicted and reference images.
struct DaPlan {
    w: usize,
    h: usize,
    c: usize,
    mask: Rc<Tensor>,
    count: usize,
}

impl DaPlan {
    fn new(w: usize, h: usize, c: usize, mask: &Mask) -> Result<Self> {
        if (mask.width(), mask.height()) != (w, h) {
            return contract("mask and image dimensions differ");
        }
        let m = mask
            .bits()
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Ok(Self {
            w,
            h,
            c,
            mask: Rc::new(Tensor::new(&[w * h, 1], m)?),
            count: mask.count(),
        })
    }

    /// `H(luma(x) ⊙ M) ⊙ M` for HWC pixels `x` given as `[HW, C]`.
    fn masked_hf<'t>(
        &self,
        tape: &'t Tape,
        pixels: Var<'t>,
        cfg: &HighPassConfig,
    ) -> Result<Var<'t>> {
        let luma = tape.constant(Tensor::new(&[self.c, 1], luma_weights(self.c))?);
        let m = tape.constant((*self.mask).clone());
        let plane = pixels.matmul(luma)?.mul(m)?;
        Ok(extract_hf_var(tape, plane, self.h, self.w, cfg)?.mul(m)?)
    }

    /// Mean over masked pixels of the squared difference of masked
    /// high-frequency maps.
    fn loss<'t>(
        &self,
        tape: &'t Tape,
        pred: Var<'t>,
        target: &Tensor,
        cfg: &HighPassConfig,
    ) -> Result<Var<'t>> {
        let reference = {
            let t2 = Tape::new();
            let v = self.masked_hf(&t2, t2.constant(target.clone()), cfg)?;
            let out = (*v.value()).clone();
            out
        };
        let diff = self
            .masked_hf(tape, pred, cfg)?
            .sub(tape.constant(reference))?;
        Ok(diff.square()?.sum()?.scale(1.0 / self.count as f64)?)
    }
}

fn da_config(cfg: &HighPassConfig) -> Result<HighPassConfig> {
    cfg.validate()?;
    if cfg.normalize != Normalize::None {
        return contract("the detail loss needs normalize = none");
    }
    Ok(*cfg)
}

fn image_rows(img: &Image) -> Result<Tensor> {
    Ok(Tensor::new(
        &[img.width() * img.height(), img.channels()],
        img.data().iter().map(|&v| v as f64).collect(),
    )?)
}

/// `‖H(Î⊙M)⊙M − H(I⊙M)⊙M‖² / |M|` on luma. The mask is applied before the
/// filter as well as after, so pixels outside the mask cannot leak into
/// the loss through the global filter.
pub fn loss_da(pred: &Image, target: &Image, mask: &Mask, cfg: &HighPassConfig) -> Result<DaLoss> {
    let cfg = da_config(cfg)?;
    if !pred.same_dims(target) {
        return contract("predicted and reference images differ in shape");
    }
    let plan = DaPlan::new(pred.width(), pred.height(), pred.channels(), mask)?;
    if plan.count == 0 {
        return Ok(DaLoss {
            value: 0.0,
            empty_mask: true,
        });
    }
    let tape = Tape::new();
    let v = plan.loss(
        &tape,
        tape.constant(image_rows(pred)?),
        &image_rows(target)?,
        &cfg,
    )?;
    let value = v.value().item()?;
    Ok(DaLoss {
        value,
        empty_mask: false,
    })
}

/// Everything the network sees apart from the noisy segment.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub text: Vec<usize>,
    pub human: Tensor,
    pub product: Tensor,
    pub product_hf: Tensor,
    pub mask: Mask,
    pub mask_ds: DownsampledMask,
    /// `(width, height, channels)`
    pub size: (usize, usize, usize),
    pub patch: usize,
}

impl Conditioning {
    /// `hf` is the conditioning filter (min-max normalized in practice).
    pub fn new(
        text: Vec<usize>,
        i_h: &Image,
        i_p: &Image,
        mask: &Mask,
        patch: usize,
        hf: &HighPassConfig,
    ) -> Result<Self> {
        if !i_h.same_dims(i_p) {
            return contract("human and product images must share dimensions");
        }
        if (mask.width(), mask.height()) != (i_h.width(), i_h.height()) {
            return contract("mask and image dimensions differ");
        }
        Ok(Self {
            text,
            human: patchify(i_h, patch)?,
            product: patchify(i_p, patch)?,
            product_hf: patchify(&extract_hf_rgb(i_p, hf)?, patch)?,
            mask: mask.clone(),
            mask_ds: downsample_mask(mask, patch)?,
            size: (i_h.width(), i_h.height(), i_h.channels()),
            patch,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.size.1 / self.patch, self.size.0 / self.patch)
    }

    /// `(z, z′)` around the given noisy segment.
    pub fn token_batches(&self, noisy: &Tensor) -> Result<(TokenBatch, TokenBatch)> {
        let z = assemble(
            &self.text,
            [self.human.clone(), self.product.clone(), noisy.clone()],
            self.grid(),
            SegmentTag::Product,
        )?;
        let z_hf = assemble(
            &self.text,
            [self.human.clone(), self.product_hf.clone(), noisy.clone()],
            self.grid(),
            SegmentTag::ProductHighFreq,
        )?;
        Ok((z, z_hf))
    }
}

/// Conditioning plus the clean target.
#[derive(Clone, Debug)]
pub struct Example {
    pub cond: Conditioning,
    /// Clean target latent `E(I_gt)`.
    pub target: Tensor,
    /// `I_gt` as `[HW, C]` rows.
    pub target_pixels: Tensor,
}

impl Example {
    pub fn new(
        text: Vec<usize>,
        i_h: &Image,
        i_p: &Image,
        i_gt: &Image,
        mask: &Mask,
        patch: usize,
        hf: &HighPassConfig,
    ) -> Result<Self> {
        if !i_h.same_dims(i_gt) {
            return contract("human and target images must share dimensions");
        }
        Ok(Self {
            cond: Conditioning::new(text, i_h, i_p, mask, patch, hf)?,
            target: patchify(i_gt, patch)?,
            target_pixels: image_rows(i_gt)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_da: f64,
    /// Filter for the detail loss; must be unnormalized.
    pub hf: HighPassConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_da: 1.0,
            hf: HighPassConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mse: f64,
    pub l_da: f64,
    pub l_overall: f64,
    pub lambda_da: f64,
    /// Samples whose mask was empty (their detail term is zero).
    pub empty_masks: usize,
}

/// One element of a training batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub example: &'a Example,
    pub t: f64,
    pub eps: &'a Tensor,
}

/// Batch-mean `L_MSE + λ·L_DA`, recorded on `tape` through `model`. With
/// `λ = 0` the detail term is still reported but kept off the tape.
pub fn loss_overall<'t, M: VelocityField<'t>>(
    tape: &'t Tape,
    model: &M,
    batch: &[BatchItem<'_>],
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossReport)> {
    if batch.is_empty() {
        return contract("empty batch");
    }
    let hf = da_config(&cfg.hf)?;
    let mut mse_terms = Vec::with_capacity(batch.len());
    let mut da_terms = Vec::with_capacity(batch.len());
    let mut da_values = Vec::with_capacity(batch.len());
    let mut empty = 0;
    for (slot, item) in batch.iter().enumerate() {
        let ex = item.example;
        let cond = &ex.cond;
        let ns = make_noisy(&ex.target, item.t, item.eps)?;
        let (z, z_hf) = cond.token_batches(&ns.x_t)?;
        let input = ModelInput {
            z: &z,
            z_hf: &z_hf,
            t: item.t,
            mask: &cond.mask_ds,
        };
        let v = model.velocity(&input, slot)?;
        if v.shape() != ns.v_target.shape() {
            return contract("model velocity does not match the latent shape");
        }
        mse_terms.push(
            v.sub(tape.constant(ns.v_target.clone()))?
                .square()?
                .mean()?,
        );

        let (w, h, c) = cond.size;
        let plan = DaPlan::new(w, h, c, &cond.mask)?;
        if plan.count == 0 {
            empty += 1;
            da_values.push(0.0);
            continue;
        }
        let index = unpatchify_index(w, h, c, cond.patch)?;
        if cfg.lambda_da == 0.0 {
            let x0 = predict_x0(&ns.x_t, &v.value(), item.t)?;
            let t2 = Tape::new();
            let pixels = t2.constant(x0).gather(index, &[w * h, c])?;
            da_values.push(
                plan.loss(&t2, pixels, &ex.target_pixels, &hf)?
                    .value()
                    .item()?,
            );
        } else {
            let x0 = tape.constant(ns.x_t.clone()).sub(v.scale(item.t)?)?;
            let pixels = x0.gather(index, &[w * h, c])?;
            let term = plan.loss(tape, pixels, &ex.target_pixels, &hf)?;
            da_values.push(term.value().item()?);
            da_terms.push(term);
        }
    }
    let n = batch.len() as f64;
    let l_mse = sum_vars(tape, &mse_terms)?.scale(1.0 / n)?;
    let l_da = da_values.iter().sum::<f64>() / n;
    let total = if cfg.lambda_da == 0.0 || da_terms.is_empty() {
        l_mse
    } else {
        l_mse.add(sum_vars(tape, &da_terms)?.scale(cfg.lambda_da / n)?)?
    };
    let l_mse_value = l_mse.value().item()?;
    let report = LossReport {
        l_mse: l_mse_value,
        l_da,
        l_overall: total.value().item()?,
        lambda_da: cfg.lambda_da,
        empty_masks: empty,
    };
    Ok((total, report))
}

/// Left-to-right sum.
fn sum_vars<'t>(tape: &'t Tape, terms: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return Ok(tape.constant(Tensor::scalar(0.0))),
    };
    for &t in &terms[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc)
}
