//! Bundled property checks shared by the command line and the acceptance suite.

use ndarr::{grad_check, grad_check_sampled, Tape, Tensor};
use serde::Serialize;

use crate::error::Result;
use crate::hifidit::{
    predict_velocity, Dit, DownsampledMask, ForwardOptions, ModelConfig, ModelInput, ModelState,
};
use crate::image::{Image, Mask};
use crate::objective::{loss_da, loss_overall, BatchItem, Example, LossConfig};
use crate::spectral::{dft2, extract_hf, extract_hf_var, idft2, HighPassConfig, Normalize};
use crate::vocab;

/// Small model used by the structural and gradient checks.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        width: 16,
        heads: 2,
        single_blocks: 1,
        dual_blocks: 2,
        ..ModelConfig::default()
    }
}

pub fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
    let t = Tensor::uniform(&[w * h * c], 0.0, 1.0, seed);
    Image::new(w, h, c, t.data().iter().map(|&v| v as f32).collect()).expect("sizes agree")
}

fn box_mask(n: usize, x: std::ops::Range<usize>, y: std::ops::Range<usize>) -> Mask {
    let mut m = Mask::empty(n, n);
    for yy in y {
        for xx in x.clone() {
            m.set(xx, yy, true);
        }
    }
    m
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SpectralCheck {
    pub round_trip_err: f64,
    pub parseval_rel_err: f64,
    pub constant_hf_max: f64,
}

/// DFT round trip and Parseval on a random 16×16 plane, and the high-pass
/// map of a constant image.
pub fn spectral_identities(seed: u64) -> Result<SpectralCheck> {
    let img = random_image(16, 16, 1, seed);
    let f = dft2(&img)?;
    let back = idft2(&f);
    let round_trip_err = back
        .data()
        .iter()
        .zip(img.data())
        .map(|(z, &v)| (z.re - v as f64).abs().max(z.im.abs()))
        .fold(0.0, f64::max);
    let spatial: f64 = img.data().iter().map(|&v| (v as f64).powi(2)).sum();
    let parseval_rel_err = (spatial - f.energy() / 256.0).abs() / spatial;
    let flat = Image::filled(16, 16, 1, 0.37);
    let hf = extract_hf(&flat, &HighPassConfig::new(0.25, Normalize::None)?)?;
    let constant_hf_max = hf.data().iter().map(|v| v.abs() as f64).fold(0.0, f64::max);
    Ok(SpectralCheck {
        round_trip_err,
        parseval_rel_err,
        constant_hf_max,
    })
}

struct Fixture {
    example: Example,
    eps: Tensor,
}

fn fixture(cfg: &ModelConfig, seed: u64, mask: &Mask) -> Result<Fixture> {
    let n = cfg.image_size;
    let example = Example::new(
        vocab::tokenize("a red striped bottle next to a person"),
        &random_image(n, n, 3, seed),
        &random_image(n, n, 3, seed + 1),
        &random_image(n, n, 3, seed + 2),
        mask,
        cfg.patch,
        &HighPassConfig::new(0.25, Normalize::MinMax)?,
    )?;
    let eps = Tensor::uniform(
        &[cfg.tokens_per_segment(), cfg.latent_dim()],
        -1.5,
        1.5,
        seed + 3,
    );
    Ok(Fixture { example, eps })
}

fn velocity(state: &ModelState, f: &Fixture, mask: &DownsampledMask, t: f64) -> Result<Tensor> {
    let noisy = crate::objective::make_noisy(&f.example.target, t, &f.eps)?;
    let (z, z_hf) = f.example.cond.token_batches(&noisy.x_t)?;
    predict_velocity(
        state,
        &ModelInput {
            z: &z,
            z_hf: &z_hf,
            t,
            mask,
        },
    )
}

/// Copy of `with` minus the gates.
pub fn without_sea(with: &ModelState) -> Result<ModelState> {
    let cfg = ModelConfig {
        use_sea: false,
        ..with.config.clone()
    };
    let mut base = ModelState::init(&cfg, 0)?;
    for i in 0..base.layout.len() {
        let name = base.layout.name(i).to_string();
        let value = with
            .get(&name)
            .ok_or_else(|| crate::HifiError::Contract(format!("missing {name}")))?;
        base.set(&name, value.clone())?;
    }
    Ok(base)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SeaCheck {
    pub alpha_zero_exact: bool,
    pub empty_mask_exact: bool,
    pub param_delta: usize,
    pub dual_blocks: usize,
    /// Gradient w.r.t. the branch contribution is exactly zero off the mask
    /// and nonzero somewhere on it.
    pub locality_exact: bool,
}

impl SeaCheck {
    pub fn passed(&self) -> bool {
        self.alpha_zero_exact
            && self.empty_mask_exact
            && self.param_delta == self.dual_blocks
            && self.locality_exact
    }
}

pub fn sea_invariants(seed: u64) -> Result<SeaCheck> {
    let cfg = check_model_config();
    let n = cfg.image_size;
    let mask = box_mask(n, 5..11, 3..9);
    let f = fixture(&cfg, seed, &mask)?;
    let ds = f.example.cond.mask_ds.clone();

    let mut closed = ModelState::init_dense(&cfg, seed)?;
    closed.set_sea_alpha(0.0)?;
    let alpha_zero_exact = bits(&velocity(&closed, &f, &ds, 0.4)?)
        == bits(&velocity(&without_sea(&closed)?, &f, &ds, 0.4)?);

    let open = ModelState::init_dense(&cfg, seed + 1)?;
    let empty = DownsampledMask::filled(ds.grid_w, ds.grid_h, false);
    let empty_mask_exact = bits(&velocity(&open, &f, &empty, 0.4)?)
        == bits(&velocity(&without_sea(&open)?, &f, &empty, 0.4)?);

    let param_delta = open.parameter_count() - without_sea(&open)?.parameter_count();

    let noisy = crate::objective::make_noisy(&f.example.target, 0.4, &f.eps)?;
    let (z, z_hf) = f.example.cond.token_batches(&noisy.x_t)?;
    let tape = Tape::new();
    let dit = Dit::trainable(&open, &tape);
    let out = dit.forward(
        &ModelInput {
            z: &z,
            z_hf: &z_hf,
            t: 0.4,
            mask: &ds,
        },
        ForwardOptions { probe_sea: true },
    )?;
    let w = tape.constant(Tensor::uniform(&out.velocity.shape(), -1.0, 1.0, seed + 7));
    let grads = tape.backward(out.velocity.mul(w)?.sum()?)?;
    let tokens = cfg.tokens_per_segment();
    let mut locality_exact = !out.sea_probes.is_empty();
    for probe in &out.sea_probes {
        let g = grads.wrt(*probe);
        let mut inside = false;
        for tok in 0..3 * tokens {
            let on = tok >= 2 * tokens && ds.cells[tok - 2 * tokens];
            let row = &g.data()[tok * cfg.width..(tok + 1) * cfg.width];
            if on {
                inside |= row.iter().any(|&v| v != 0.0);
            } else if row.iter().any(|&v| v != 0.0) {
                locality_exact = false;
            }
        }
        locality_exact &= inside;
    }
    Ok(SeaCheck {
        alpha_zero_exact,
        empty_mask_exact,
        param_delta,
        dual_blocks: cfg.dual_blocks,
        locality_exact,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DalCheck {
    pub at_equality: f64,
    pub outside_edit_bit_invariant: bool,
    pub inside_edit_positive: bool,
}

impl DalCheck {
    pub fn passed(&self) -> bool {
        self.at_equality == 0.0 && self.outside_edit_bit_invariant && self.inside_edit_positive
    }
}

/// Detail loss is zero at equality and only sees pixels inside the mask.
pub fn dal_locality(seed: u64) -> Result<DalCheck> {
    let mask = box_mask(16, 4..12, 2..10);
    let pred = random_image(16, 16, 3, seed);
    let gt = random_image(16, 16, 3, seed + 1);
    let cfg = HighPassConfig::new(0.25, Normalize::None)?;
    let base = loss_da(&pred, &gt, &mask, &cfg)?.value;
    let mut edited = pred.clone();
    let mut inside = pred.clone();
    for y in 0..16 {
        for x in 0..16 {
            for c in 0..3 {
                if mask.get(x, y) {
                    inside.set(x, y, c, 1.0 - pred.get(x, y, c));
                } else {
                    edited.set(x, y, c, 1.0 - pred.get(x, y, c));
                }
            }
        }
    }
    Ok(DalCheck {
        at_equality: loss_da(&gt, &gt, &mask, &cfg)?.value,
        outside_edit_bit_invariant: loss_da(&edited, &gt, &mask, &cfg)?.value.to_bits()
            == base.to_bits(),
        inside_edit_positive: loss_da(&inside, &pred, &mask, &cfg)?.value > 0.0,
    })
}

/// Largest relative error between the taped gradient of the batch loss and
/// central differences over `count` sampled parameters of the check model.
pub fn model_grad_check(count: usize, seed: u64) -> Result<f64> {
    let cfg = check_model_config();
    let state = ModelState::init_dense(&cfg, seed)?;
    let fixtures = [
        fixture(&cfg, seed + 10, &box_mask(16, 3..11, 2..9))?,
        fixture(&cfg, seed + 20, &box_mask(16, 6..14, 5..15))?,
    ];
    let batch: Vec<BatchItem> = fixtures
        .iter()
        .zip([0.3, 0.7])
        .map(|(f, t)| BatchItem {
            example: &f.example,
            t,
            eps: &f.eps,
        })
        .collect();
    Ok(grad_check_sampled(
        |tape, vars| {
            let dit = Dit::with_params(&state, tape, vars.to_vec())?;
            Ok(loss_overall(tape, &dit, &batch, &LossConfig::default())?.0)
        },
        &state.params,
        1e-4,
        count,
        seed,
    )?)
}

/// Relative gradient error of the summed high-pass map on a random plane.
pub fn hf_grad_check(seed: u64) -> Result<f64> {
    let img = random_image(8, 8, 1, seed);
    let cfg = HighPassConfig::new(0.3, Normalize::None)?;
    let point = Tensor::new(&[64], img.data().iter().map(|&v| v as f64).collect())?;
    Ok(grad_check(
        |tape, v| extract_hf_var(tape, v[0], 8, 8, &cfg)?.sum(),
        &[point],
        1e-4,
    )?)
}
