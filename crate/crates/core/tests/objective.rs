use std::f64::consts::PI;

use hifi_core::hifidit::{oracle::FixedVelocity, Dit, ModelConfig, ModelState};
use hifi_core::image::{Image, Mask, LUMA};
use hifi_core::objective::{
    loss_da, loss_overall, make_noisy, predict_x0, BatchItem, Example, LossConfig,
};
use hifi_core::spectral::{HighPassConfig, Normalize};
use hifi_core::vocab;
use ndarr::{grad_check_sampled, Tape, Tensor};
use num_complex::Complex64;
use proptest::prelude::*;

fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
    let t = Tensor::uniform(&[w * h * c], 0.0, 1.0, seed);
    Image::new(w, h, c, t.data().iter().map(|&v| v as f32).collect()).unwrap()
}

fn hp(frac: f64) -> HighPassConfig {
    HighPassConfig::new(frac, Normalize::None).unwrap()
}

/// Direct-sum DFT chain on the masked luma plane, then the masked squared
/// difference averaged over masked pixels.
fn oracle_da(pred: &Image, gt: &Image, mask: &Mask, r: usize) -> f64 {
    let (w, h) = (pred.width(), pred.height());
    let hf = |img: &Image| -> Vec<f64> {
        let plane: Vec<f64> = (0..h * w)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                if !mask.get(x, y) {
                    return 0.0;
                }
                (0..3)
                    .map(|c| LUMA[c] as f64 * img.get(x, y, c) as f64)
                    .sum()
            })
            .collect();
        let mut spec = vec![Complex64::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                for (i, &p) in plane.iter().enumerate() {
                    let (x, y) = (i % w, i / w);
                    let ph = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    spec[u * w + v] += Complex64::from_polar(p, ph);
                }
                let cu = ((u + h / 2) % h) as f64 - (h / 2) as f64;
                let cv = ((v + w / 2) % w) as f64 - (w / 2) as f64;
                if cu * cu + cv * cv < (r * r) as f64 {
                    spec[u * w + v] = Complex64::new(0.0, 0.0);
                }
            }
        }
        (0..h * w)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                let mut acc = Complex64::new(0.0, 0.0);
                for u in 0..h {
                    for v in 0..w {
                        let ph = 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        acc += spec[u * w + v] * Complex64::from_polar(1.0, ph);
                    }
                }
                let m = if mask.get(x, y) { 1.0 } else { 0.0 };
                m * acc.norm() / (h * w) as f64
            })
            .collect()
    };
    let (a, b) = (hf(pred), hf(gt));
    let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    sq / mask.count() as f64
}

fn half_mask(w: usize, h: usize) -> Mask {
    let mut m = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w / 2 {
            m.set(x, y, true);
        }
    }
    m
}

#[test]
fn detail_loss_matches_direct_oracle_on_4x4() {
    let (pred, gt) = (random_image(4, 4, 3, 1), random_image(4, 4, 3, 2));
    let mask = half_mask(4, 4);
    let cfg = hp(0.5);
    assert_eq!(cfg.radius(4, 4), 1);
    let got = loss_da(&pred, &gt, &mask, &cfg).unwrap();
    let want = oracle_da(&pred, &gt, &mask, 1);
    assert!(!got.empty_mask);
    assert!(want > 1e-4);
    assert!((got.value - want).abs() < 1e-6, "{} vs {want}", got.value);
}

#[test]
fn detail_loss_is_zero_at_equality_and_blind_outside_the_mask() {
    let gt = random_image(16, 16, 3, 3);
    let mask = half_mask(16, 16);
    let cfg = hp(0.1);
    assert_eq!(loss_da(&gt, &gt, &mask, &cfg).unwrap().value, 0.0);
    let pred = random_image(16, 16, 3, 4);
    let base = loss_da(&pred, &gt, &mask, &cfg).unwrap().value;
    let mut outside = pred.clone();
    for y in 0..16 {
        for x in 8..16 {
            for c in 0..3 {
                outside.set(x, y, c, 1.0 - outside.get(x, y, c));
            }
        }
    }
    assert_eq!(
        loss_da(&outside, &gt, &mask, &cfg).unwrap().value.to_bits(),
        base.to_bits()
    );
    let mut inside = gt.clone();
    inside.set(2, 5, 1, 1.0 - inside.get(2, 5, 1));
    assert!(loss_da(&inside, &gt, &mask, &cfg).unwrap().value > 0.0);
}

#[test]
fn velocity_target_recovers_the_clean_latent() {
    for seed in 0..100u64 {
        let x0 = Tensor::uniform(&[6, 4], -1.0, 1.0, seed);
        let eps = Tensor::uniform(&[6, 4], -3.0, 3.0, seed + 1000);
        let t = Tensor::uniform(&[1], 0.0, 1.0, seed + 2000).data()[0];
        let ns = make_noisy(&x0, t, &eps).unwrap();
        let back = predict_x0(&ns.x_t, &ns.v_target, t).unwrap();
        // exact up to one rounding of each of the two affine steps
        assert!(back.max_abs_diff(&x0).unwrap() < 1e-14, "seed {seed}");
    }
}

proptest! {
    #[test]
    fn corruption_identity(seed in 0u64..1000, t in 0.0f64..=1.0) {
        let x0 = Tensor::uniform(&[3, 3], -1.0, 1.0, seed);
        let eps = Tensor::uniform(&[3, 3], -2.0, 2.0, seed + 1);
        let ns = make_noisy(&x0, t, &eps).unwrap();
        let lhs = ns.x_t.zip_map(&ns.v_target, |x, v| x - t * v).unwrap();
        prop_assert!(lhs.max_abs_diff(&x0).unwrap() < 1e-14);
    }
}

fn toy() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        width: 16,
        heads: 2,
        single_blocks: 1,
        dual_blocks: 1,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

fn examples(cfg: &ModelConfig, n: usize) -> Vec<Example> {
    let s = cfg.image_size;
    (0..n as u64)
        .map(|k| {
            let gt = random_image(s, s, 3, 10 + k);
            let mut mask = Mask::empty(s, s);
            for y in 2..9 + k as usize {
                for x in 3..11 {
                    mask.set(x, y, true);
                }
            }
            let mut human = gt.clone();
            for y in 0..s {
                for x in 0..s {
                    if mask.get(x, y) {
                        (0..3).for_each(|c| human.set(x, y, c, 128.0 / 255.0));
                    }
                }
            }
            Example::new(
                vocab::tokenize("a blue dotted can next to a person"),
                &human,
                &random_image(s, s, 3, 50 + k),
                &gt,
                &mask,
                cfg.patch,
                &HighPassConfig::new(0.25, Normalize::MinMax).unwrap(),
            )
            .unwrap()
        })
        .collect()
}

fn noises(cfg: &ModelConfig, n: usize) -> Vec<Tensor> {
    (0..n as u64)
        .map(|k| {
            Tensor::uniform(
                &[cfg.tokens_per_segment(), cfg.latent_dim()],
                -1.5,
                1.5,
                90 + k,
            )
        })
        .collect()
}

fn items<'a>(ex: &'a [Example], eps: &'a [Tensor]) -> Vec<BatchItem<'a>> {
    ex.iter()
        .zip(eps)
        .enumerate()
        .map(|(i, (e, n))| BatchItem {
            example: e,
            t: 0.15 + 0.2 * i as f64,
            eps: n,
        })
        .collect()
}

#[test]
fn oracle_velocity_has_zero_loss() {
    let cfg = toy();
    let ex = examples(&cfg, 3);
    let eps = noises(&cfg, 3);
    let batch = items(&ex, &eps);
    let targets = batch
        .iter()
        .map(|b| make_noisy(&b.example.target, b.t, b.eps).unwrap().v_target)
        .collect();
    let tape = Tape::new();
    let stub = FixedVelocity {
        tape: &tape,
        targets,
    };
    let (_, report) = loss_overall(&tape, &stub, &batch, &LossConfig::default()).unwrap();
    assert_eq!(report.l_mse, 0.0);
    // x_t − t·v_target reproduces x₀ only up to rounding
    assert!(report.l_da < 1e-24, "{}", report.l_da);
    assert!(report.l_overall < 1e-24);
}

#[test]
fn report_is_consistent_and_lambda_zero_drops_the_detail_term() {
    let cfg = toy();
    let state = ModelState::init_dense(&cfg, 3).unwrap();
    let ex = examples(&cfg, 2);
    let eps = noises(&cfg, 2);
    let batch = items(&ex, &eps);
    let tape = Tape::new();
    let dit = Dit::frozen(&state, &tape);
    let (_, r) = loss_overall(&tape, &dit, &batch, &LossConfig::default()).unwrap();
    assert!(r.l_mse > 0.0 && r.l_da > 0.0);
    assert!((r.l_overall - (r.l_mse + r.l_da)).abs() < 1e-12);
    let zero = LossConfig {
        lambda_da: 0.0,
        ..LossConfig::default()
    };
    let (_, r0) = loss_overall(&tape, &dit, &batch, &zero).unwrap();
    assert_eq!(r0.l_overall, r0.l_mse);
    assert_eq!(r0.l_da, r.l_da);
}

#[test]
fn losses_do_not_depend_on_batch_order() {
    let cfg = toy();
    let state = ModelState::init_dense(&cfg, 4).unwrap();
    let ex = examples(&cfg, 3);
    let eps = noises(&cfg, 3);
    let batch = items(&ex, &eps);
    let reversed: Vec<_> = batch.iter().rev().cloned().collect();
    let tape = Tape::new();
    let dit = Dit::frozen(&state, &tape);
    let (_, a) = loss_overall(&tape, &dit, &batch, &LossConfig::default()).unwrap();
    let (_, b) = loss_overall(&tape, &dit, &reversed, &LossConfig::default()).unwrap();
    assert!((a.l_mse - b.l_mse).abs() < 1e-7);
    assert!((a.l_da - b.l_da).abs() < 1e-7);
}

#[test]
fn overall_loss_gradient_matches_finite_differences() {
    let cfg = toy();
    let state = ModelState::init_dense(&cfg, 5).unwrap();
    let ex = examples(&cfg, 2);
    let eps = noises(&cfg, 2);
    let batch = items(&ex, &eps);
    let err = grad_check_sampled(
        |tape, vars| {
            let dit = Dit::with_params(&state, tape, vars.to_vec())?;
            Ok(loss_overall(tape, &dit, &batch, &LossConfig::default())?.0)
        },
        &state.params,
        1e-4,
        60,
        7,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}
