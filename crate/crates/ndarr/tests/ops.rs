use std::rc::Rc;

use ndarr::{gelu, grad_check, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, seed)
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let y = x.softmax().unwrap().value();
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn identity_matmul() {
    let tape = Tape::new();
    let a = rand(&[3, 5], 1);
    let i3 = tape.constant(Tensor::eye(3));
    let out = i3.matmul(tape.constant(a.clone())).unwrap().value();
    assert_eq!(*out, a);
}

#[test]
fn gelu_matches_central_differences() {
    let h = 1e-3;
    for x in [-2.0, -0.5, 0.0, 0.5, 2.0] {
        let tape = Tape::new();
        let v = tape.var(Tensor::scalar(x));
        let y = v.gelu().unwrap().sum().unwrap();
        let analytic = tape.backward(y).unwrap().wrt(v).data()[0];
        let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(1e-12);
        assert!(rel < 1e-4, "x={x}: {analytic} vs {numeric}");
    }
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(a.matmul(b), Err(TensorError::Contract(_))));
}

#[test]
fn concat_rejects_mismatched_extents() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(tape.concat(&[a, b], 0).is_err());
    assert!(tape.concat(&[a, b], 1).is_ok());
}

#[test]
fn backward_requires_scalar() {
    let tape = Tape::new();
    let a = tape.var(Tensor::zeros(&[2]));
    assert!(tape.backward(a).is_err());
}

#[test]
fn non_finite_results_are_reported() {
    let tape = Tape::new();
    let a = tape.var(Tensor::full(&[1], 1e300));
    let r = a.scale(1e300);
    if cfg!(debug_assertions) {
        assert!(matches!(r, Err(TensorError::Numeric { op: "scale" })));
    }
}

fn weighted<'t>(tape: &'t Tape, x: Var<'t>) -> ndarr::Result<Var<'t>> {
    let w = tape.constant(rand(&x.shape(), 99));
    x.mul(w)?.sum()
}

// One grad check per registered op, inputs in [-2, 2].
#[test]
fn every_op_passes_grad_check() {
    let h = 1e-4;
    let tol = 1e-4;
    let m = rand(&[3, 4], 10);
    let n = rand(&[4, 2], 11);
    let same = rand(&[3, 4], 12);
    let row = rand(&[1, 4], 13);
    let col = rand(&[3, 1], 14);
    let weight = rand(&[3, 4], 15);

    let cases: Vec<(&str, f64)> = vec![
        (
            "matmul",
            grad_check(
                |t, v| weighted(t, v[0].matmul(v[1])?),
                &[m.clone(), n.clone()],
                h,
            )
            .unwrap(),
        ),
        (
            "add",
            grad_check(
                |t, v| weighted(t, v[0].add(v[1])?),
                &[m.clone(), same.clone()],
                h,
            )
            .unwrap(),
        ),
        (
            "add_row",
            grad_check(
                |t, v| weighted(t, v[0].add(v[1])?),
                &[m.clone(), row.clone()],
                h,
            )
            .unwrap(),
        ),
        (
            "sub_col",
            grad_check(
                |t, v| weighted(t, v[0].sub(v[1])?),
                &[m.clone(), col.clone()],
                h,
            )
            .unwrap(),
        ),
        (
            "mul",
            grad_check(
                |t, v| weighted(t, v[0].mul(v[1])?),
                &[m.clone(), same.clone()],
                h,
            )
            .unwrap(),
        ),
        (
            "mul_scalar",
            grad_check(
                |t, v| weighted(t, v[0].mul(v[1])?),
                &[m.clone(), Tensor::scalar(0.7)],
                h,
            )
            .unwrap(),
        ),
        (
            "scale",
            grad_check(|t, v| weighted(t, v[0].scale(-1.5)?), &[m.clone()], h).unwrap(),
        ),
        (
            "concat0",
            grad_check(
                |t, v| weighted(t, t.concat(&[v[0], v[1]], 0)?),
                &[m.clone(), same.clone()],
                h,
            )
            .unwrap(),
        ),
        (
            "concat1",
            grad_check(
                |t, v| weighted(t, t.concat(&[v[0], v[1]], 1)?),
                &[m.clone(), col.clone()],
                h,
            )
            .unwrap(),
        ),
        (
            "slice",
            grad_check(|t, v| weighted(t, v[0].slice(1, 1, 2)?), &[m.clone()], h).unwrap(),
        ),
        (
            "transpose",
            grad_check(|t, v| weighted(t, v[0].transpose()?), &[m.clone()], h).unwrap(),
        ),
        (
            "softmax",
            grad_check(|t, v| weighted(t, v[0].softmax()?), &[m.clone()], h).unwrap(),
        ),
        (
            "rmsnorm",
            grad_check(|t, v| weighted(t, v[0].rmsnorm(1e-6)?), &[m.clone()], h).unwrap(),
        ),
        (
            "gelu",
            grad_check(|t, v| weighted(t, v[0].gelu()?), &[m.clone()], h).unwrap(),
        ),
        (
            "abs",
            grad_check(
                |t, v| weighted(t, v[0].abs()?),
                &[weight.map(|x| if x.abs() < 1e-2 { 0.5 } else { x })],
                h,
            )
            .unwrap(),
        ),
        (
            "sum",
            grad_check(|_, v| v[0].square()?.sum(), &[m.clone()], h).unwrap(),
        ),
        (
            "mean",
            grad_check(|_, v| v[0].square()?.mean(), &[m.clone()], h).unwrap(),
        ),
        (
            "gather",
            grad_check(
                |t, v| {
                    weighted(
                        t,
                        v[0].gather(Rc::from(vec![0usize, 5, 5, 11, 2, 7]), &[2, 3])?,
                    )
                },
                &[m.clone()],
                h,
            )
            .unwrap(),
        ),
        (
            "rope",
            grad_check(
                |t, v| {
                    let cos: Rc<[f64]> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
                    let sin: Rc<[f64]> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
                    weighted(t, v[0].rope(cos, sin)?)
                },
                &[m.clone()],
                h,
            )
            .unwrap(),
        ),
    ];
    for (name, err) in cases {
        assert!(err < tol, "{name}: rel err {err}");
    }
}

#[test]
fn concat_backward_has_no_cross_talk() {
    let a = rand(&[2, 3], 20);
    let b = rand(&[4, 3], 21);
    let grad_of_b = |wa: f64| {
        let tape = Tape::new();
        let va = tape.var(a.clone());
        let vb = tape.var(b.clone());
        let joint = tape.concat(&[va, vb], 0).unwrap();
        let top = joint
            .slice(0, 0, 2)
            .unwrap()
            .square()
            .unwrap()
            .sum()
            .unwrap()
            .scale(wa)
            .unwrap();
        let bottom = joint.slice(0, 2, 4).unwrap().sum().unwrap();
        let loss = top.add(bottom).unwrap();
        tape.backward(loss).unwrap().wrt(vb)
    };
    assert_eq!(grad_of_b(1.0), grad_of_b(-7.0));
}

proptest! {
    #[test]
    fn concat_then_slice_is_identity(
        rows_a in 1usize..5, rows_b in 1usize..5, cols in 1usize..5, axis in 0usize..2, seed in 0u64..1000,
    ) {
        let (sa, sb) = if axis == 0 {
            ([rows_a, cols], [rows_b, cols])
        } else {
            ([cols, rows_a], [cols, rows_b])
        };
        let a = rand(&sa, seed);
        let b = rand(&sb, seed + 1);
        let tape = Tape::new();
        let joint = tape.concat(&[tape.constant(a.clone()), tape.constant(b.clone())], axis).unwrap();
        let back_a = joint.slice(axis, 0, rows_a).unwrap().value();
        let back_b = joint.slice(axis, rows_a, rows_b).unwrap().value();
        prop_assert_eq!(&*back_a, &a);
        prop_assert_eq!(&*back_b, &b);
    }

    #[test]
    fn leaf_gradients_match_leaf_shapes(seed in 0u64..500) {
        let x = rand(&[3, 4], seed);
        let w = rand(&[4, 2], seed + 7);
        let tape = Tape::new();
        let vx = tape.var(x);
        let vw = tape.var(w);
        let loss = vx.matmul(vw).unwrap().gelu().unwrap().mean().unwrap();
        let g = tape.backward(loss).unwrap();
        prop_assert_eq!(g.wrt(vx).shape().to_vec(), vec![3, 4]);
        prop_assert_eq!(g.wrt(vw).shape().to_vec(), vec![4, 2]);
    }
}
