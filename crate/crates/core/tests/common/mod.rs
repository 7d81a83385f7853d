#![allow(dead_code)]

use errlab_core::{ErroneousValue, SmoothMap};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// `fₖ(x) = cₖ + aₖ·x + ½ xᵀQₖx + sₖ sin(wₖ·x)` with random coefficients.
pub fn random_map<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> SmoothMap {
    let mut coef = || rng.random_range(-1.0..1.0);
    let c: Vec<f64> = (0..d_out).map(|_| coef()).collect();
    let a: Vec<DVector<f64>> = (0..d_out)
        .map(|_| DVector::from_fn(d_in, |_, _| coef()))
        .collect();
    let q: Vec<DMatrix<f64>> = (0..d_out)
        .map(|_| {
            let m = DMatrix::from_fn(d_in, d_in, |_, _| coef());
            (&m + m.transpose()) * 0.5
        })
        .collect();
    let s: Vec<f64> = (0..d_out).map(|_| coef()).collect();
    let w: Vec<DVector<f64>> = (0..d_out)
        .map(|_| DVector::from_fn(d_in, |_, _| coef()))
        .collect();
    let (c1, a1, q1, s1, w1) = (c.clone(), a.clone(), q.clone(), s.clone(), w.clone());
    let (a2, q2, s2, w2) = (a.clone(), q.clone(), s.clone(), w.clone());
    SmoothMap::new(
        d_in,
        d_out,
        move |x| {
            let x = DVector::from_column_slice(x);
            DVector::from_fn(d_out, |k, _| {
                c1[k] + a1[k].dot(&x) + 0.5 * x.dot(&(&q1[k] * &x)) + s1[k] * w1[k].dot(&x).sin()
            })
        },
        move |x| {
            let x = DVector::from_column_slice(x);
            let mut j = DMatrix::zeros(d_out, d_in);
            for k in 0..d_out {
                let row = &a2[k] + &q2[k] * &x + &w2[k] * (s2[k] * w2[k].dot(&x).cos());
                j.set_row(k, &row.transpose());
            }
            j
        },
        move |x| {
            let x = DVector::from_column_slice(x);
            (0..d_out)
                .map(|k| &q[k] - &w[k] * w[k].transpose() * (s[k] * w[k].dot(&x).sin()))
                .collect()
        },
    )
}

pub fn random_value<R: Rng>(rng: &mut R, d: usize) -> ErroneousValue {
    let value = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let bias = DVector::from_fn(d, |_, _| rng.random_range(-0.1..0.1));
    let l = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
    ErroneousValue::new(value, bias, &l * l.transpose()).unwrap()
}

/// Largest entrywise gap between two erroneous values, relative to their scale.
pub fn value_gap(a: &ErroneousValue, b: &ErroneousValue) -> f64 {
    let scale = 1.0f64
        .max(a.bias().amax())
        .max(a.covariance().amax())
        .max(a.value().amax());
    let gaps = [
        (a.value() - b.value()).amax(),
        (a.bias() - b.bias()).amax(),
        (a.covariance() - b.covariance()).amax(),
    ];
    gaps.iter().fold(0.0f64, |m, g| m.max(*g)) / scale
}

/// Composite Simpson rule on `panels` (even) panels.
pub fn simpson(lo: f64, hi: f64, panels: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (hi - lo) / panels as f64;
    let mut acc = f(lo) + f(hi);
    for k in 1..panels {
        acc += f(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}
