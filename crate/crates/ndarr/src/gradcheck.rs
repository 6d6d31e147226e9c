//! Central-difference validation of tape gradients.

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Magnitudes below this are treated as zero when forming relative errors.
/// Central differences in f64 with `h >= 1e-4` carry roughly 1e-12 of
/// round-off, so two values that both sit under this floor are equal.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Coordinate `(tensor, flat index)` into a list of input tensors.
pub type Coordinate = (usize, usize);

/// Max relative error between tape gradients and central differences over
/// every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let coords: Vec<Coordinate> = point
        .iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.numel()).map(move |i| (t, i)))
        .collect();
    grad_check_at(f, point, h, &coords)
}

/// Like [`grad_check`] over `count` coordinates drawn without replacement.
pub fn grad_check_sampled<F>(f: F, point: &[Tensor], h: f64, count: usize, seed: u64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let all: Vec<Coordinate> = point
        .iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.numel()).map(move |i| (t, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, all.len(), count.min(all.len()));
    let mut coords: Vec<Coordinate> = picks.into_iter().map(|i| all[i]).collect();
    coords.sort_unstable();
    grad_check_at(f, point, h, &coords)
}

/// Checks only the listed coordinates.
pub fn grad_check_at<F>(f: F, point: &[Tensor], h: f64, coords: &[Coordinate]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return contract(format!("finite-difference step {h} outside [1e-4, 1e-2]"));
    }
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = point.iter().map(|x| tape.var(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.wrt(*v)).collect::<Vec<_>>()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.numel() != 1 {
            return contract(format!(
                "grad_check needs a scalar function, got {:?}",
                v.shape()
            ));
        }
        Ok(v.data()[0])
    };

    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for &(t, i) in coords {
        let x = point[t].data()[i];
        probe[t] = point[t].with_value(i, x + h)?;
        let plus = eval(&probe)?;
        probe[t] = point[t].with_value(i, x - h)?;
        let minus = eval(&probe)?;
        probe[t] = point[t].clone();
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[t].data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_has_analytic_gradient() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let loss = v.square().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(v).data(), &[2.0, 4.0, 6.0]);

        let err = grad_check(|_, v| v[0].square()?.sum(), &[x], 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::uniform(&[4], -1.0, 1.0, 3);
        let err = grad_check(
            |tape, v| {
                let c = tape.constant(Tensor::scalar(2.5));
                v[0].scale(0.0)?.sum()?.add(c)
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_scalar_and_bad_step() {
        let x = Tensor::uniform(&[2], -1.0, 1.0, 4);
        assert!(grad_check(|_, v| Ok(v[0]), std::slice::from_ref(&x), 1e-3).is_err());
        assert!(grad_check(|_, v| v[0].sum(), &[x], 1.0).is_err());
    }
}
