//! Test functions with explicit gradients and Hessians.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_dim, Error, Result};

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
type HessFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// A C² real function on `ℝ^dim` carrying its own first and second derivatives.
#[derive(Clone)]
pub struct TestFunction {
    dim: usize,
    eval: ValueFn,
    grad: GradFn,
    hess: HessFn,
    support_hint: Option<(f64, f64)>,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("dim", &self.dim)
            .field("support_hint", &self.support_hint)
            .finish_non_exhaustive()
    }
}

impl TestFunction {
    pub fn new<E, G, H>(dim: usize, eval: E, grad: G, hess: H) -> Self
    where
        E: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
        H: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            eval: Arc::new(eval),
            grad: Arc::new(grad),
            hess: Arc::new(hess),
            support_hint: None,
        }
    }

    /// One-dimensional function from `f`, `f'`, `f''`.
    pub fn scalar<F, D1, D2>(f: F, d1: D1, d2: D2) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D1: Fn(f64) -> f64 + Send + Sync + 'static,
        D2: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self::new(
            1,
            move |x| f(x[0]),
            move |x| DVector::from_element(1, d1(x[0])),
            move |x| DMatrix::from_element(1, 1, d2(x[0])),
        )
    }

    pub fn with_support(mut self, lo: f64, hi: f64) -> Self {
        self.support_hint = Some((lo, hi));
        self
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::new(
            dim,
            move |_| c,
            move |_| DVector::zeros(dim),
            move |_| DMatrix::zeros(dim, dim),
        )
    }

    /// `x ↦ x[i]`.
    pub fn coordinate(dim: usize, i: usize) -> Self {
        Self::new(
            dim,
            move |x| x[i],
            move |_| {
                let mut g = DVector::zeros(dim);
                g[i] = 1.0;
                g
            },
            move |_| DMatrix::zeros(dim, dim),
        )
    }

    /// `x ↦ x^k` in one dimension.
    pub fn monomial(k: i32) -> Self {
        let kf = k as f64;
        Self::scalar(
            move |x| x.powi(k),
            move |x| if k == 0 { 0.0 } else { kf * x.powi(k - 1) },
            move |x| {
                if k < 2 {
                    0.0
                } else {
                    kf * (kf - 1.0) * x.powi(k - 2)
                }
            },
        )
    }

    /// Compactly supported C² bump of height 1 on `(center − half_width, center + half_width)`,
    /// built from the quintic smoothstep `s(u) = 6u⁵ − 15u⁴ + 10u³` as `s(1 − |t|)`.
    pub fn bump(center: f64, half_width: f64) -> Self {
        assert!(half_width > 0.0, "bump width must be positive");
        let w = half_width;
        Self::scalar(
            move |x| {
                let (u, _) = bump_arg(x, center, w);
                smoothstep(u)
            },
            move |x| {
                let (u, sign) = bump_arg(x, center, w);
                -sign * smoothstep_d1(u) / w
            },
            move |x| {
                let (u, _) = bump_arg(x, center, w);
                smoothstep_d2(u) / (w * w)
            },
        )
        .with_support(center - w, center + w)
    }

    /// Lifts a one-dimensional function to act on coordinate `i` of `ℝ^dim`.
    pub fn on_coordinate(&self, dim: usize, i: usize) -> Self {
        assert_eq!(self.dim, 1, "only scalar functions can be lifted");
        let (f, g, h) = (self.clone(), self.clone(), self.clone());
        Self::new(
            dim,
            move |x| f.value(&x[i..=i]),
            move |x| {
                let mut v = DVector::zeros(dim);
                v[i] = g.gradient(&x[i..=i])[0];
                v
            },
            move |x| {
                let mut m = DMatrix::zeros(dim, dim);
                m[(i, i)] = h.hessian(&x[i..=i])[(0, 0)];
                m
            },
        )
    }

    /// Pointwise product with Leibniz-rule derivatives.
    pub fn product(&self, other: &TestFunction) -> Self {
        assert_eq!(
            self.dim, other.dim,
            "product of functions of different dimension"
        );
        let (a, b) = (self.clone(), other.clone());
        let (a1, b1) = (self.clone(), other.clone());
        let (a2, b2) = (self.clone(), other.clone());
        Self::new(
            self.dim,
            move |x| a.value(x) * b.value(x),
            move |x| a1.gradient(x) * b1.value(x) + b1.gradient(x) * a1.value(x),
            move |x| {
                let (ga, gb) = (a2.gradient(x), b2.gradient(x));
                a2.hessian(x) * b2.value(x)
                    + b2.hessian(x) * a2.value(x)
                    + &ga * gb.transpose()
                    + &gb * ga.transpose()
            },
        )
    }

    /// `self + other`.
    pub fn sum(&self, other: &TestFunction) -> Self {
        assert_eq!(
            self.dim, other.dim,
            "sum of functions of different dimension"
        );
        let (a, b) = (self.clone(), other.clone());
        let (a1, b1) = (self.clone(), other.clone());
        let (a2, b2) = (self.clone(), other.clone());
        Self::new(
            self.dim,
            move |x| a.value(x) + b.value(x),
            move |x| a1.gradient(x) + b1.gradient(x),
            move |x| a2.hessian(x) + b2.hessian(x),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support_hint(&self) -> Option<(f64, f64)> {
        self.support_hint
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn gradient(&self, x: &[f64]) -> DVector<f64> {
        (self.grad)(x)
    }

    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        (self.hess)(x)
    }

    /// Scalar shorthands for one-dimensional functions.
    pub fn f(&self, x: f64) -> f64 {
        (self.eval)(&[x])
    }

    pub fn d1(&self, x: f64) -> f64 {
        (self.grad)(&[x])[0]
    }

    pub fn d2(&self, x: f64) -> f64 {
        (self.hess)(&[x])[(0, 0)]
    }

    /// Compares the supplied derivatives with central differences at the probe
    /// points; relative tolerance 1e-5 against the local derivative scale.
    pub fn validate(&self, probes: &[Vec<f64>]) -> Result<()> {
        const TOL: f64 = 1e-5;
        for x in probes {
            ensure_dim(self.dim, x.len(), "probe point")?;
            let g = self.gradient(x);
            let h = self.hessian(x);
            let mut worst = 0.0f64;
            for i in 0..self.dim {
                let step = f64::EPSILON.cbrt() * (1.0 + x[i].abs());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += step;
                xm[i] -= step;
                let fd = (self.value(&xp) - self.value(&xm)) / (2.0 * step);
                let scale = g.amax().max(fd.abs()).max(1.0);
                worst = worst.max((fd - g[i]).abs() / scale);
                let gp = self.gradient(&xp);
                let gm = self.gradient(&xm);
                let hscale = h.amax().max(1.0);
                for j in 0..self.dim {
                    let hfd = (gp[j] - gm[j]) / (2.0 * step);
                    worst = worst.max((hfd - h[(j, i)]).abs() / hscale);
                }
            }
            if !(worst <= TOL) {
                return Err(Error::DerivativeMismatch(format!(
                    "test function derivatives off by {worst:.3e} at {x:?}"
                )));
            }
        }
        Ok(())
    }
}

fn bump_arg(x: f64, center: f64, w: f64) -> (f64, f64) {
    let t = (x - center) / w;
    let u = (1.0 - t.abs()).max(0.0);
    (u, if t >= 0.0 { 1.0 } else { -1.0 })
}

fn smoothstep(u: f64) -> f64 {
    u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
}

fn smoothstep_d1(u: f64) -> f64 {
    30.0 * u * u * (1.0 - u) * (1.0 - u)
}

fn smoothstep_d2(u: f64) -> f64 {
    60.0 * u * (1.0 - u) * (1.0 - 2.0 * u)
}
