//! Space-to-depth patching (the toy image encoder) and mask down-sampling.

use std::rc::Rc;

use ndarr::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::image::{Image, Mask};

fn check_divisible(w: usize, h: usize, p: usize) -> Result<()> {
    if p == 0 || w % p != 0 || h % p != 0 {
        return contract(format!("patch size {p} does not divide {w}x{h}"));
    }
    Ok(())
}

/// Flat image index (HWC) for every element of the `[n, C·p²]` token matrix.
/// Tokens run row-major over the patch grid; inside a token the order is
/// `(dy, dx, c)`.
fn token_to_pixel(w: usize, h: usize, c: usize, p: usize) -> Vec<usize> {
    let (gw, gh) = (w / p, h / p);
    let mut idx = Vec::with_capacity(w * h * c);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    let (x, y) = (gx * p + dx, gy * p + dy);
                    for ch in 0..c {
                        idx.push((y * w + x) * c + ch);
                    }
                }
            }
        }
    }
    idx
}

/// `[HW/p², C·p²]` tokens of `img`.
pub fn patchify(img: &Image, p: usize) -> Result<Tensor> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    check_divisible(w, h, p)?;
    let data = token_to_pixel(w, h, c, p)
        .into_iter()
        .map(|i| img.data()[i] as f64)
        .collect();
    Ok(Tensor::new(&[(w / p) * (h / p), c * p * p], data)?)
}

/// Gather index turning a flattened token matrix back into HWC pixel order.
pub fn unpatchify_index(w: usize, h: usize, c: usize, p: usize) -> Result<Rc<[usize]>> {
    check_divisible(w, h, p)?;
    let forward = token_to_pixel(w, h, c, p);
    let mut inverse = vec![0; forward.len()];
    for (token_pos, &pixel) in forward.iter().enumerate() {
        inverse[pixel] = token_pos;
    }
    Ok(inverse.into())
}

pub fn unpatchify(tokens: &Tensor, w: usize, h: usize, c: usize, p: usize) -> Result<Image> {
    check_divisible(w, h, p)?;
    if tokens.shape() != [(w / p) * (h / p), c * p * p] {
        return contract(format!(
            "token matrix {:?} does not match a {w}x{h}x{c} image at p={p}",
            tokens.shape()
        ));
    }
    let index = unpatchify_index(w, h, c, p)?;
    let data = index.iter().map(|&i| tokens.data()[i] as f32).collect();
    Image::new(w, h, c, data)
}

/// Patch-grid mask: a cell is set when any of its pixels is masked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownsampledMask {
    pub grid_w: usize,
    pub grid_h: usize,
    pub cells: Vec<bool>,
}

impl DownsampledMask {
    pub fn filled(grid_w: usize, grid_h: usize, value: bool) -> Self {
        Self {
            grid_w,
            grid_h,
            cells: vec![value; grid_w * grid_h],
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }
}

pub fn downsample_mask(mask: &Mask, p: usize) -> Result<DownsampledMask> {
    let (w, h) = (mask.width(), mask.height());
    check_divisible(w, h, p)?;
    let (gw, gh) = (w / p, h / p);
    let mut out = DownsampledMask::filled(gw, gh, false);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                out.cells[(y / p) * gw + x / p] = true;
            }
        }
    }
    Ok(out)
}
