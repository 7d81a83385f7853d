//! Second-order propagation of (value, bias, covariance) triples.
//!
//! A quantity with small errors is carried as its value `x`, the conditional
//! bias `A[X](x)` (mean of `dX + ½d²X`) and the conditional covariance
//! `Γ[X](x)` (mean of `dX dXᵀ`). Through a smooth map `Φ` with Jacobian `J`
//! and Hessian `H` these transform as
//!
//! ```text
//! A[Φ]  = J·A[X] + ½·contract(H, Γ[X])
//! Γ[Φ]  = J·Γ[X]·Jᵀ
//! ```
//!
//! with `contract(H, C)[k] = Σᵢⱼ H[k][i][j]·C[i][j]`. The covariance rule is
//! Gauss' rule for correlated errors; the bias rule is what makes the calculus
//! coherent under composition. The first-order "naive" rule
//! `ΔU = Σ|∂F/∂Xᵢ|ΔXᵢ` is provided for comparison only: it depends on how a map
//! is factored.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg;

type EvalFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
type JacobianFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
type HessianFn = Arc<dyn Fn(&[f64]) -> Vec<DMatrix<f64>> + Send + Sync>;

/// A C² map `ℝ^d_in → ℝ^d_out` with explicit first and second derivatives.
///
/// The Hessian is returned as one `d_in × d_in` matrix per output component.
#[derive(Clone)]
pub struct SmoothMap {
    d_in: usize,
    d_out: usize,
    eval: EvalFn,
    jacobian: JacobianFn,
    hessian: HessianFn,
}

impl fmt::Debug for SmoothMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothMap")
            .field("d_in", &self.d_in)
            .field("d_out", &self.d_out)
            .finish_non_exhaustive()
    }
}

/// Derivatives of a map at one point.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub value: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub hessian: Vec<DMatrix<f64>>,
}

/// Largest discrepancies found by [`SmoothMap::validate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    pub jacobian_rel_error: f64,
    pub hessian_rel_error: f64,
    pub hessian_asymmetry: f64,
}

impl SmoothMap {
    pub fn new<E, J, H>(d_in: usize, d_out: usize, eval: E, jacobian: J, hessian: H) -> Self
    where
        E: Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        H: Fn(&[f64]) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    {
        assert!(d_in > 0 && d_out > 0, "map dimensions must be positive");
        Self {
            d_in,
            d_out,
            eval: Arc::new(eval),
            jacobian: Arc::new(jacobian),
            hessian: Arc::new(hessian),
        }
    }

    /// Scalar map `ℝ → ℝ` from `f`, `f'`, `f''`.
    pub fn scalar<F, D1, D2>(f: F, d1: D1, d2: D2) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D1: Fn(f64) -> f64 + Send + Sync + 'static,
        D2: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self::new(
            1,
            1,
            move |x| DVector::from_element(1, f(x[0])),
            move |x| DMatrix::from_element(1, 1, d1(x[0])),
            move |x| vec![DMatrix::from_element(1, 1, d2(x[0]))],
        )
    }

    pub fn identity(d: usize) -> Self {
        Self::affine(DMatrix::identity(d, d), DVector::zeros(d))
    }

    /// `x ↦ A·x + c`.
    pub fn affine(a: DMatrix<f64>, c: DVector<f64>) -> Self {
        assert_eq!(a.nrows(), c.len(), "offset length must match rows");
        let (d_out, d_in) = a.shape();
        let a_eval = a.clone();
        let a_jac = a;
        Self::new(
            d_in,
            d_out,
            move |x| &a_eval * DVector::from_column_slice(x) + &c,
            move |_| a_jac.clone(),
            move |_| vec![DMatrix::zeros(d_in, d_in); d_out],
        )
    }

    /// Plane rotation by `angle` radians.
    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::affine(
            DMatrix::from_row_slice(2, 2, &[c, -s, s, c]),
            DVector::zeros(2),
        )
    }

    /// Rotation by 45°, with both cosine and sine entries equal to `1/√2`.
    pub fn rotation_45() -> Self {
        let c = std::f64::consts::FRAC_1_SQRT_2;
        Self::affine(
            DMatrix::from_row_slice(2, 2, &[c, -c, c, c]),
            DVector::zeros(2),
        )
    }

    /// Inverse of [`SmoothMap::rotation_45`] (its transpose).
    pub fn rotation_45_inverse() -> Self {
        let c = std::f64::consts::FRAC_1_SQRT_2;
        Self::affine(
            DMatrix::from_row_slice(2, 2, &[c, c, -c, c]),
            DVector::zeros(2),
        )
    }

    /// Projection onto coordinate `coord`, squared: `x ↦ x_coord²`.
    pub fn coordinate_square(d: usize, coord: usize) -> Self {
        Self::new(
            d,
            1,
            move |x| DVector::from_element(1, x[coord] * x[coord]),
            move |x| {
                let mut j = DMatrix::zeros(1, d);
                j[(0, coord)] = 2.0 * x[coord];
                j
            },
            move |_| {
                let mut h = DMatrix::zeros(d, d);
                h[(coord, coord)] = 2.0;
                vec![h]
            },
        )
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        ensure_dim(self.d_in, x.len(), "map input")?;
        Ok((self.eval)(x))
    }

    /// Value, Jacobian and Hessian at `x`, shape- and finiteness-checked.
    pub fn derivatives(&self, x: &[f64]) -> Result<Derivatives> {
        ensure_dim(self.d_in, x.len(), "map input")?;
        let value = (self.eval)(x);
        let jacobian = (self.jacobian)(x);
        let hessian = (self.hessian)(x);
        ensure_dim(self.d_out, value.len(), "map output")?;
        ensure_dim(self.d_out, jacobian.nrows(), "jacobian rows")?;
        ensure_dim(self.d_in, jacobian.ncols(), "jacobian columns")?;
        ensure_dim(self.d_out, hessian.len(), "hessian components")?;
        for h in &hessian {
            ensure_dim(self.d_in, h.nrows(), "hessian rows")?;
            ensure_dim(self.d_in, h.ncols(), "hessian columns")?;
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("map value"));
        }
        if jacobian.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("jacobian"));
        }
        if hessian
            .iter()
            .flat_map(|h| h.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("hessian"));
        }
        Ok(Derivatives {
            value,
            jacobian,
            hessian,
        })
    }

    /// `outer ∘ self`, with chain-rule Jacobian and Hessian.
    pub fn then(&self, outer: &SmoothMap) -> Result<SmoothMap> {
        ensure_dim(outer.d_in, self.d_out, "composition")?;
        let inner = self.clone();
        let outer = outer.clone();
        let (d_in, d_mid, d_out) = (inner.d_in, inner.d_out, outer.d_out);
        let (i1, o1) = (inner.clone(), outer.clone());
        let (i2, o2) = (inner.clone(), outer.clone());
        Ok(SmoothMap::new(
            d_in,
            d_out,
            move |x| (o1.eval)((i1.eval)(x).as_slice()),
            move |x| {
                let y = (i2.eval)(x);
                (o2.jacobian)(y.as_slice()) * (i2.jacobian)(x)
            },
            move |x| {
                let y = (inner.eval)(x);
                let jf = (inner.jacobian)(x);
                let hf = (inner.hessian)(x);
                let jg = (outer.jacobian)(y.as_slice());
                let hg = (outer.hessian)(y.as_slice());
                (0..d_out)
                    .map(|k| {
                        let mut h = jf.transpose() * &hg[k] * &jf;
                        for l in 0..d_mid {
                            h += &hf[l] * jg[(k, l)];
                        }
                        h
                    })
                    .collect()
            },
        ))
    }

    /// Checks the supplied derivatives against central differences of `eval`
    /// at each probe point (relative tolerance 1e-5) and the Hessian symmetry.
    pub fn validate(&self, probes: &[Vec<f64>]) -> Result<DerivativeCheck> {
        const TOL: f64 = 1e-5;
        let mut check = DerivativeCheck {
            jacobian_rel_error: 0.0,
            hessian_rel_error: 0.0,
            hessian_asymmetry: 0.0,
        };
        for x in probes {
            let d = self.derivatives(x)?;
            let (jfd, hfd) = finite_difference_derivatives(self, x);
            let jscale = linalg::max_abs_entry(&d.jacobian).max(1e-300);
            for (a, b) in d.jacobian.iter().zip(jfd.iter()) {
                let err = (a - b).abs() / a.abs().max(b.abs()).max(jscale);
                check.jacobian_rel_error = check.jacobian_rel_error.max(err);
            }
            let hscale = d
                .hessian
                .iter()
                .map(linalg::max_abs_entry)
                .fold(jscale, f64::max);
            for (h, hf) in d.hessian.iter().zip(hfd.iter()) {
                let asym = linalg::max_abs_diff(h, &h.transpose());
                check.hessian_asymmetry = check.hessian_asymmetry.max(asym / hscale);
                for (a, b) in h.iter().zip(hf.iter()) {
                    let err = (a - b).abs() / a.abs().max(b.abs()).max(hscale);
                    check.hessian_rel_error = check.hessian_rel_error.max(err);
                }
            }
        }
        if check.jacobian_rel_error > TOL
            || check.hessian_rel_error > TOL
            || check.hessian_asymmetry > 1e-12
        {
            return Err(Error::DerivativeMismatch(format!(
                "jacobian {:.3e}, hessian {:.3e}, asymmetry {:.3e}",
                check.jacobian_rel_error, check.hessian_rel_error, check.hessian_asymmetry
            )));
        }
        Ok(check)
    }
}

/// Central differences of `eval`: Jacobian with step ε^(1/3)(1+|xᵢ|), Hessian
/// with step ε^(1/4)(1+|xᵢ|).
fn finite_difference_derivatives(map: &SmoothMap, x: &[f64]) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let n = map.d_in;
    let m = map.d_out;
    let h1: Vec<f64> = x
        .iter()
        .map(|xi| f64::EPSILON.cbrt() * (1.0 + xi.abs()))
        .collect();
    let h2: Vec<f64> = x
        .iter()
        .map(|xi| f64::EPSILON.powf(0.25) * (1.0 + xi.abs()))
        .collect();
    let shifted = |steps: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, s) in steps {
            y[i] += s;
        }
        (map.eval)(&y)
    };
    let mut jac = DMatrix::zeros(m, n);
    for i in 0..n {
        let fp = shifted(&[(i, h1[i])]);
        let fm = shifted(&[(i, -h1[i])]);
        for k in 0..m {
            jac[(k, i)] = (fp[k] - fm[k]) / (2.0 * h1[i]);
        }
    }
    let mut hess = vec![DMatrix::zeros(n, n); m];
    for i in 0..n {
        for j in i..n {
            let fpp = shifted(&[(i, h2[i]), (j, h2[j])]);
            let fpm = shifted(&[(i, h2[i]), (j, -h2[j])]);
            let fmp = shifted(&[(i, -h2[i]), (j, h2[j])]);
            let fmm = shifted(&[(i, -h2[i]), (j, -h2[j])]);
            for k in 0..m {
                let v = (fpp[k] - fpm[k] - fmp[k] + fmm[k]) / (4.0 * h2[i] * h2[j]);
                hess[k][(i, j)] = v;
                hess[k][(j, i)] = v;
            }
        }
    }
    (jac, hess)
}

/// `contract(H, C)[k] = Σᵢⱼ H[k][i][j]·C[i][j]`.
pub fn contract(hessian: &[DMatrix<f64>], covariance: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        hessian.len(),
        hessian.iter().map(|h| h.component_mul(covariance).sum()),
    )
}

/// A value with its conditional bias and error covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ErroneousValue {
    value: DVector<f64>,
    bias: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl ErroneousValue {
    /// Validates dimensions, finiteness, symmetry and positive semidefiniteness.
    pub fn new(value: DVector<f64>, bias: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = value.len();
        ensure_dim(d, bias.len(), "bias")?;
        ensure_dim(d, covariance.nrows(), "covariance rows")?;
        ensure_dim(d, covariance.ncols(), "covariance columns")?;
        if value.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("value or bias"));
        }
        linalg::check_psd(&covariance)?;
        Ok(Self {
            value,
            bias,
            covariance,
        })
    }

    pub fn from_slices(value: &[f64], bias: &[f64], covariance_rows: &[&[f64]]) -> Result<Self> {
        let d = value.len();
        ensure_dim(d, covariance_rows.len(), "covariance rows")?;
        let mut flat = Vec::with_capacity(d * d);
        for row in covariance_rows {
            ensure_dim(d, row.len(), "covariance columns")?;
            flat.extend_from_slice(row);
        }
        Self::new(
            DVector::from_column_slice(value),
            DVector::from_column_slice(bias),
            DMatrix::from_row_slice(d, d, &flat),
        )
    }

    pub fn scalar(value: f64, bias: f64, variance: f64) -> Result<Self> {
        Self::from_slices(&[value], &[bias], &[&[variance]])
    }

    pub fn dim(&self) -> usize {
        self.value.len()
    }

    pub fn value(&self) -> &DVector<f64> {
        &self.value
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Same quantity with `shift` added to the bias. Models a deterministic
    /// first-order error upstream; the covariance is untouched.
    pub fn with_bias_shift(&self, shift: &DVector<f64>) -> Result<Self> {
        ensure_dim(self.dim(), shift.len(), "bias shift")?;
        Self::new(
            self.value.clone(),
            &self.bias + shift,
            self.covariance.clone(),
        )
    }
}

/// Second-order propagation through `map`, derivatives taken at the value.
pub fn propagate(map: &SmoothMap, x: &ErroneousValue) -> Result<ErroneousValue> {
    ensure_dim(map.d_in(), x.dim(), "propagate input")?;
    let d = map.derivatives(x.value.as_slice())?;
    let bias = &d.jacobian * &x.bias + contract(&d.hessian, &x.covariance) * 0.5;
    let covariance = &d.jacobian * &x.covariance * d.jacobian.transpose();
    // J·C·Jᵀ is symmetric up to rounding; remove the rounding asymmetry.
    let covariance = (&covariance + covariance.transpose()) * 0.5;
    ErroneousValue::new(d.value, bias, covariance)
}

/// Gauss covariance `∇F·C·∇G` of two scalar maps.
pub fn gauss_covariance(f: &SmoothMap, g: &SmoothMap, x: &ErroneousValue) -> Result<f64> {
    ensure_dim(1, f.d_out(), "scalar map F")?;
    ensure_dim(1, g.d_out(), "scalar map G")?;
    ensure_dim(x.dim(), f.d_in(), "map F input")?;
    ensure_dim(x.dim(), g.d_in(), "map G input")?;
    let df = f.derivatives(x.value.as_slice())?.jacobian;
    let dg = g.derivatives(x.value.as_slice())?.jacobian;
    Ok((&df * &x.covariance * dg.transpose())[(0, 0)])
}

/// A value with absolute error bounds, propagated by the naive first-order rule.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveErrorValue {
    value: DVector<f64>,
    delta: DVector<f64>,
}

impl NaiveErrorValue {
    pub fn new(value: DVector<f64>, delta: DVector<f64>) -> Result<Self> {
        ensure_dim(value.len(), delta.len(), "delta")?;
        if delta.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidParameter(
                "error bounds must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { value, delta })
    }

    pub fn from_slices(value: &[f64], delta: &[f64]) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(value),
            DVector::from_column_slice(delta),
        )
    }

    pub fn value(&self) -> &DVector<f64> {
        &self.value
    }

    pub fn delta(&self) -> &DVector<f64> {
        &self.delta
    }
}

/// `Δ'[k] = Σᵢ |J[k][i]|·Δ[i]`.
pub fn naive_propagate(map: &SmoothMap, x: &NaiveErrorValue) -> Result<NaiveErrorValue> {
    ensure_dim(map.d_in(), x.value.len(), "naive input")?;
    let d = map.derivatives(x.value.as_slice())?;
    let delta = d.jacobian.abs() * &x.delta;
    NaiveErrorValue::new(d.value, delta)
}

/// `|Γ[F] − (A[F²] − 2F·A[F])|` for `F` the coordinate `coord`, with `A[F²]`
/// obtained by propagating through the squaring map.
pub fn square_identity_residual(x: &ErroneousValue, coord: usize) -> Result<f64> {
    if coord >= x.dim() {
        return Err(Error::IndexOutOfRange {
            index: coord,
            dim: x.dim(),
        });
    }
    let sq = propagate(&SmoothMap::coordinate_square(x.dim(), coord), x)?;
    let f = x.value[coord];
    let gamma = x.covariance[(coord, coord)];
    Ok((gamma - (sq.bias[0] - 2.0 * f * x.bias[coord])).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn product_map() -> SmoothMap {
        SmoothMap::new(
            2,
            1,
            |x| DVector::from_element(1, x[0] * x[1]),
            |x| DMatrix::from_row_slice(1, 2, &[x[1], x[0]]),
            |_| vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])],
        )
    }

    fn sum_map() -> SmoothMap {
        SmoothMap::affine(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::zeros(1),
        )
    }

    fn diff_map() -> SmoothMap {
        SmoothMap::affine(
            DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            DVector::zeros(1),
        )
    }

    #[test]
    fn identity_leaves_triple_unchanged() {
        let x =
            ErroneousValue::from_slices(&[2.0, 3.0], &[0.1, -0.2], &[&[0.01, 0.0], &[0.0, 0.04]])
                .unwrap();
        let y = propagate(&SmoothMap::identity(2), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn square_map_example() {
        let sq = SmoothMap::scalar(|t| t * t, |t| 2.0 * t, |_| 2.0);
        let x = ErroneousValue::scalar(2.0, 0.1, 0.04).unwrap();
        let y = propagate(&sq, &x).unwrap();
        assert!((y.value()[0] - 4.0).abs() < 1e-15);
        assert!((y.bias()[0] - 0.44).abs() < 1e-15);
        assert!((y.covariance()[(0, 0)] - 0.64).abs() < 1e-15);
    }

    #[test]
    fn product_map_example() {
        let x =
            ErroneousValue::from_slices(&[2.0, 3.0], &[0.0, 0.0], &[&[0.01, 0.01], &[0.01, 0.04]])
                .unwrap();
        let y = propagate(&product_map(), &x).unwrap();
        assert!((y.bias()[0] - 0.01).abs() < 1e-15);
        assert!((y.covariance()[(0, 0)] - 0.37).abs() < 1e-14);
    }

    #[test]
    fn gauss_covariance_examples() {
        let x = ErroneousValue::from_slices(&[0.3, -1.0], &[0.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]])
            .unwrap();
        assert_eq!(gauss_covariance(&sum_map(), &sum_map(), &x).unwrap(), 2.0);
        assert_eq!(gauss_covariance(&sum_map(), &diff_map(), &x).unwrap(), 0.0);
        let x =
            ErroneousValue::from_slices(&[2.0, 3.0], &[0.0, 0.0], &[&[0.01, 0.0], &[0.0, 0.04]])
                .unwrap();
        let v = gauss_covariance(&product_map(), &product_map(), &x).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gauss_covariance_rejects_vector_maps() {
        let x = ErroneousValue::scalar(1.0, 0.0, 1.0).unwrap();
        let two = SmoothMap::affine(
            DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
            DVector::zeros(2),
        );
        let one = SmoothMap::identity(1);
        assert!(matches!(
            gauss_covariance(&two, &one, &x),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn naive_identity_and_rotation_round_trip() {
        let x = NaiveErrorValue::from_slices(&[1.0, 2.0], &[1.0, 1.0]).unwrap();
        let same = naive_propagate(&SmoothMap::identity(2), &x).unwrap();
        assert_eq!(same.delta(), x.delta());
        let there = naive_propagate(&SmoothMap::rotation_45(), &x).unwrap();
        let back = naive_propagate(&SmoothMap::rotation_45_inverse(), &there).unwrap();
        for d in back.delta().iter() {
            assert!((d - 2.0).abs() <= 4.0 * f64::EPSILON, "{d}");
        }
        // the value itself does come back
        assert!((back.value()[0] - 1.0).abs() < 1e-15);
        assert!((back.value()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn naive_dominates_gauss_for_sum() {
        let sigma = [1.0, 1.0];
        let x = NaiveErrorValue::from_slices(&[0.0, 0.0], &sigma).unwrap();
        let naive = naive_propagate(&sum_map(), &x).unwrap().delta()[0];
        let e = ErroneousValue::from_slices(&[0.0, 0.0], &[0.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]])
            .unwrap();
        let gauss = gauss_covariance(&sum_map(), &sum_map(), &e).unwrap().sqrt();
        assert_eq!(naive, 2.0);
        assert!((gauss - 2f64.sqrt()).abs() < 1e-15);
        assert!(naive >= gauss);
    }

    #[test]
    fn naive_rejects_negative_delta() {
        assert!(NaiveErrorValue::from_slices(&[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn square_identity_examples() {
        let x = ErroneousValue::scalar(2.0, 0.1, 0.04).unwrap();
        assert!(square_identity_residual(&x, 0).unwrap() <= 1e-12);
        let x = ErroneousValue::from_slices(&[1.0, 1.0], &[0.0, 0.0], &[&[1.0, 0.5], &[0.5, 1.0]])
            .unwrap();
        assert!(square_identity_residual(&x, 1).unwrap() <= 1e-12);
        assert!(matches!(
            square_identity_residual(&x, 2),
            Err(Error::IndexOutOfRange { index: 2, dim: 2 })
        ));
    }

    #[test]
    fn construction_rejects_bad_covariance() {
        let asym =
            ErroneousValue::from_slices(&[0.0, 0.0], &[0.0, 0.0], &[&[1.0, 0.2], &[0.0, 1.0]]);
        assert!(matches!(asym, Err(Error::NotSymmetric { .. })));
        let indef =
            ErroneousValue::from_slices(&[0.0, 0.0], &[0.0, 0.0], &[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(matches!(indef, Err(Error::NotPositiveSemidefinite { .. })));
        let dims = ErroneousValue::new(DVector::zeros(2), DVector::zeros(1), DMatrix::zeros(2, 2));
        assert!(matches!(dims, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn propagate_rejects_dimension_mismatch_and_nan() {
        let x = ErroneousValue::scalar(1.0, 0.0, 1.0).unwrap();
        assert!(matches!(
            propagate(&SmoothMap::identity(2), &x),
            Err(Error::DimensionMismatch { .. })
        ));
        let log = SmoothMap::scalar(f64::ln, |t| 1.0 / t, |t| -1.0 / (t * t));
        let zero = ErroneousValue::scalar(0.0, 0.0, 1.0).unwrap();
        assert!(matches!(propagate(&log, &zero), Err(Error::NonFinite(_))));
    }

    #[test]
    fn validate_accepts_correct_and_rejects_wrong_derivatives() {
        let good = SmoothMap::scalar(f64::exp, f64::exp, f64::exp);
        let probes = vec![vec![-1.0], vec![0.0], vec![2.5]];
        good.validate(&probes).unwrap();
        product_map()
            .validate(&[vec![2.0, 3.0], vec![-1.0, 0.5]])
            .unwrap();
        let bad = SmoothMap::scalar(f64::sin, f64::cos, f64::sin);
        assert!(matches!(
            bad.validate(&probes),
            Err(Error::DerivativeMismatch(_))
        ));
    }

    #[test]
    fn composition_derivatives_pass_finite_differences() {
        let f = SmoothMap::new(
            2,
            2,
            |x| DVector::from_column_slice(&[x[0].sin() * x[1], x[0] + x[1] * x[1]]),
            |x| DMatrix::from_row_slice(2, 2, &[x[0].cos() * x[1], x[0].sin(), 1.0, 2.0 * x[1]]),
            |x| {
                vec![
                    DMatrix::from_row_slice(
                        2,
                        2,
                        &[-x[0].sin() * x[1], x[0].cos(), x[0].cos(), 0.0],
                    ),
                    DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]),
                ]
            },
        );
        let fg = f.then(&product_map()).unwrap();
        fg.validate(&[vec![0.3, -0.7], vec![1.2, 0.4]]).unwrap();
    }
}
