//! Concrete error structures on `ℝ^d`.
//!
//! A structure is a probability law (a seeded sampler), a field of symmetric
//! PSD matrices `a(x)` with `Γ[f,g](x) = ∇f(x)ᵀ a(x) ∇g(x)`, and optionally a
//! drift field `A[X](x)` from which the generator follows:
//!
//! ```text
//! A[f](x) = ∇f(x)·A[X](x) + ½ tr(a(x) ∇²f(x))
//! ```
//!
//! Energy convention: `ℰ[f,g] = ½ E[Γ[f,g]] = ⟨−A f, g⟩`. This is the
//! convention under which the Ornstein–Uhlenbeck generator `½f'' − ½x f'` and
//! the Lebesgue-domain generator `½Δ` are the generators of their forms.
//! [`check_form_generator_link`] reports `E[Γ]` as well.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{ensure_dim, Error, Result};
use crate::error_algebra::SmoothMap;
use crate::functions::TestFunction;
use crate::linalg;
use crate::mc::{self, Estimate};

type Sampler = Arc<dyn Fn(&mut dyn RngCore) -> Vec<f64> + Send + Sync>;
pub type CoefficientField = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type VectorField = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    OrnsteinUhlenbeck,
    MonteCarloUnitInterval,
    LebesgueDomain,
    WeightedForm,
    Product,
    Image,
}

impl StructureKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::OrnsteinUhlenbeck => "ornstein_uhlenbeck",
            Self::MonteCarloUnitInterval => "monte_carlo_unit_interval",
            Self::LebesgueDomain => "lebesgue_domain",
            Self::WeightedForm => "weighted_form",
            Self::Product => "product",
            Self::Image => "image",
        }
    }
}

/// Construction parameters for [`make_structure`].
#[derive(Clone)]
pub enum StructureParams {
    /// Standard normal law, `Γ[f] = f'²`, `A f = ½f'' − ½x f'`.
    OrnsteinUhlenbeck,
    /// Uniform law on `[0,1]`, `Γ[f] = f'²`, `A f = ½f''` (Neumann).
    MonteCarloUnitInterval,
    /// Uniform law on the unit cube of `ℝ^dim`, `Γ[f] = |∇f|²`, `A f = ½Δf`.
    LebesgueDomain {
        dim: usize,
    },
    /// Uniform law on the unit cube with `Γ[u,v] = Σ aᵢⱼ ∂ᵢu ∂ⱼv`.
    ///
    /// `divergence(x)[j] = Σᵢ ∂ᵢ aᵢⱼ(x)`; when given, the generator is
    /// `½ div(a∇f)`.
    WeightedForm {
        dim: usize,
        coeff: CoefficientField,
        divergence: Option<VectorField>,
    },
    Product(Vec<ErrorStructure>),
}

impl fmt::Debug for StructureParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::OrnsteinUhlenbeck => write!(f, "OrnsteinUhlenbeck"),
            Self::MonteCarloUnitInterval => write!(f, "MonteCarloUnitInterval"),
            Self::LebesgueDomain { dim } => write!(f, "LebesgueDomain {{ dim: {dim} }}"),
            Self::WeightedForm {
                dim, divergence, ..
            } => write!(
                f,
                "WeightedForm {{ dim: {dim}, generator: {} }}",
                divergence.is_some()
            ),
            Self::Product(c) => write!(f, "Product({} components)", c.len()),
        }
    }
}

/// Support of the law, used to reject evaluation points outside it.
#[derive(Debug, Clone, PartialEq)]
enum Support {
    Whole,
    UnitCube,
    Blocks(Vec<(usize, Support)>),
    Interval(f64, f64),
}

impl Support {
    fn contains(&self, x: &[f64]) -> bool {
        match self {
            Support::Whole => true,
            Support::UnitCube => x.iter().all(|v| (0.0..=1.0).contains(v)),
            Support::Interval(lo, hi) => x.iter().all(|v| *lo <= *v && *v <= *hi),
            Support::Blocks(blocks) => {
                let mut offset = 0;
                blocks.iter().all(|(d, s)| {
                    let ok = s.contains(&x[offset..offset + d]);
                    offset += d;
                    ok
                })
            }
        }
    }
}

/// A finite-dimensional error structure.
#[derive(Clone)]
pub struct ErrorStructure {
    kind: StructureKind,
    dim: usize,
    sampler: Sampler,
    gamma_coeff: CoefficientField,
    drift: Option<VectorField>,
    support: Support,
    image: Option<Arc<ImageTable>>,
}

impl fmt::Debug for ErrorStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ErrorStructure")
            .field("kind", &self.kind)
            .field("dim", &self.dim)
            .field("generator", &self.drift.is_some())
            .finish_non_exhaustive()
    }
}

/// Builds one of the built-in structures, validating the coefficient field.
pub fn make_structure(kind: StructureKind, params: StructureParams) -> Result<ErrorStructure> {
    let s = match (kind, params) {
        (StructureKind::OrnsteinUhlenbeck, StructureParams::OrnsteinUhlenbeck) => ErrorStructure {
            kind,
            dim: 1,
            sampler: Arc::new(|rng: &mut dyn RngCore| vec![rng.sample::<f64, _>(StandardNormal)]),
            gamma_coeff: Arc::new(|_| DMatrix::from_element(1, 1, 1.0)),
            drift: Some(Arc::new(|x| DVector::from_element(1, -0.5 * x[0]))),
            support: Support::Whole,
            image: None,
        },
        (StructureKind::MonteCarloUnitInterval, StructureParams::MonteCarloUnitInterval) => {
            ErrorStructure {
                kind,
                dim: 1,
                sampler: Arc::new(|rng: &mut dyn RngCore| vec![rng.random::<f64>()]),
                gamma_coeff: Arc::new(|_| DMatrix::from_element(1, 1, 1.0)),
                drift: Some(Arc::new(|_| DVector::zeros(1))),
                support: Support::UnitCube,
                image: None,
            }
        }
        (StructureKind::LebesgueDomain, StructureParams::LebesgueDomain { dim }) => {
            if dim == 0 {
                return Err(Error::InvalidParameter("dimension must be positive".into()));
            }
            ErrorStructure {
                kind,
                dim,
                sampler: Arc::new(move |rng: &mut dyn RngCore| {
                    (0..dim).map(|_| rng.random::<f64>()).collect()
                }),
                gamma_coeff: Arc::new(move |_| DMatrix::identity(dim, dim)),
                drift: Some(Arc::new(move |_| DVector::zeros(dim))),
                support: Support::UnitCube,
                image: None,
            }
        }
        (
            StructureKind::WeightedForm,
            StructureParams::WeightedForm {
                dim,
                coeff,
                divergence,
            },
        ) => {
            if dim == 0 {
                return Err(Error::InvalidParameter("dimension must be positive".into()));
            }
            validate_coefficient_field(dim, &coeff)?;
            let drift =
                divergence.map(|div| -> VectorField { Arc::new(move |x: &[f64]| div(x) * 0.5) });
            ErrorStructure {
                kind,
                dim,
                sampler: Arc::new(move |rng: &mut dyn RngCore| {
                    (0..dim).map(|_| rng.random::<f64>()).collect()
                }),
                gamma_coeff: coeff,
                drift,
                support: Support::UnitCube,
                image: None,
            }
        }
        (StructureKind::Product, StructureParams::Product(components)) => product(&components)?,
        (kind, params) => {
            return Err(Error::Unsupported(format!(
                "kind {} with parameters {params:?}",
                kind.name()
            )))
        }
    };
    Ok(s)
}

/// Probes `a(x)` on a fixed grid of the unit cube plus deterministic
/// pseudo-random interior points.
fn validate_coefficient_field(dim: usize, coeff: &CoefficientField) -> Result<()> {
    let mut probes: Vec<Vec<f64>> = Vec::new();
    if dim == 1 {
        probes.extend((0..=200).map(|i| vec![i as f64 / 200.0]));
    } else {
        probes.push(vec![0.5; dim]);
        probes.push(vec![0.0; dim]);
        probes.push(vec![1.0; dim]);
    }
    let mut rng = mc::stream_rng(0x5eed_c0ef, 0);
    probes.extend((0..256).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()));
    for x in &probes {
        let a = coeff(x);
        ensure_dim(dim, a.nrows(), "coefficient rows")?;
        ensure_dim(dim, a.ncols(), "coefficient columns")?;
        linalg::check_psd(&a)?;
    }
    Ok(())
}

/// Finite product; `Γ` acts blockwise and sums.
pub fn product(components: &[ErrorStructure]) -> Result<ErrorStructure> {
    match components {
        [] => Err(Error::InvalidParameter(
            "product of an empty list of structures".into(),
        )),
        [single] => Ok(single.clone()),
        _ => {
            let dims: Vec<usize> = components.iter().map(|c| c.dim).collect();
            let dim: usize = dims.iter().sum();
            let samplers: Vec<Sampler> = components.iter().map(|c| c.sampler.clone()).collect();
            let coeffs: Vec<CoefficientField> =
                components.iter().map(|c| c.gamma_coeff.clone()).collect();
            let drifts: Option<Vec<VectorField>> =
                components.iter().map(|c| c.drift.clone()).collect();
            let (d1, d2, d3) = (dims.clone(), dims.clone(), dims.clone());
            let drift = drifts.map(|drifts| -> VectorField {
                Arc::new(move |x: &[f64]| {
                    let mut out = DVector::zeros(dim);
                    let mut off = 0;
                    for (d, f) in d3.iter().zip(&drifts) {
                        out.rows_mut(off, *d).copy_from(&f(&x[off..off + d]));
                        off += d;
                    }
                    out
                })
            });
            Ok(ErrorStructure {
                kind: StructureKind::Product,
                dim,
                sampler: Arc::new(move |rng: &mut dyn RngCore| {
                    let mut x = Vec::with_capacity(dim);
                    for s in &samplers {
                        x.extend(s(rng));
                    }
                    debug_assert_eq!(x.len(), d1.iter().sum::<usize>());
                    x
                }),
                gamma_coeff: Arc::new(move |x: &[f64]| {
                    let mut a = DMatrix::zeros(dim, dim);
                    let mut off = 0;
                    for (d, c) in d2.iter().zip(&coeffs) {
                        a.view_mut((off, off), (*d, *d))
                            .copy_from(&c(&x[off..off + d]));
                        off += d;
                    }
                    a
                }),
                drift,
                support: Support::Blocks(
                    components
                        .iter()
                        .map(|c| (c.dim, c.support.clone()))
                        .collect(),
                ),
                image: None,
            })
        }
    }
}

impl ErrorStructure {
    pub fn kind(&self) -> StructureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_generator(&self) -> bool {
        self.drift.is_some()
    }

    /// Estimation cells, for image structures.
    pub fn image_table(&self) -> Option<&ImageTable> {
        self.image.as_deref()
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        (self.sampler)(rng)
    }

    /// `count` points of the law, block-seeded.
    pub fn sample_points(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        mc::sample_blocks(count, seed, |rng| self.sample(rng))
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        ensure_dim(self.dim, x.len(), "structure point")?;
        if !self.support.contains(x) {
            return Err(Error::InvalidParameter(format!(
                "point {x:?} outside the support of the {} law",
                self.kind.name()
            )));
        }
        Ok(())
    }

    /// `a(x)`.
    pub fn gamma_coeff(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let a = (self.gamma_coeff)(x);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Estimation(format!(
                "coefficient unavailable at {x:?}"
            )));
        }
        Ok(a)
    }

    /// Bias field `A[X](x)`.
    pub fn drift(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_point(x)?;
        let d = self
            .drift
            .as_ref()
            .ok_or(Error::MissingGenerator(self.kind.name()))?;
        Ok(d(x))
    }

    /// `A[f](x) = ∇f·A[X] + ½ tr(a ∇²f)`.
    pub fn generator(&self, f: &TestFunction, x: &[f64]) -> Result<f64> {
        ensure_dim(self.dim, f.dim(), "test function")?;
        let drift = self.drift(x)?;
        let a = self.gamma_coeff(x)?;
        let v = f.gradient(x).dot(&drift) + 0.5 * a.component_mul(&f.hessian(x)).sum();
        finite(v, "generator value")
    }
}

fn finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `Γ[f,g](x) = ∇f(x)ᵀ a(x) ∇g(x)`.
pub fn gamma(s: &ErrorStructure, f: &TestFunction, g: &TestFunction, x: &[f64]) -> Result<f64> {
    ensure_dim(s.dim, f.dim(), "test function f")?;
    ensure_dim(s.dim, g.dim(), "test function g")?;
    let a = s.gamma_coeff(x)?;
    finite(f.gradient(x).dot(&(a * g.gradient(x))), "gamma value")
}

/// `|Γ[f] − (A[f²] − 2f·A[f])|` at `x`.
pub fn generator_identity_residual(s: &ErrorStructure, f: &TestFunction, x: &[f64]) -> Result<f64> {
    let g = gamma(s, f, f, x)?;
    let af2 = s.generator(&f.product(f), x)?;
    let af = s.generator(f, x)?;
    Ok((g - (af2 - 2.0 * f.value(x) * af)).abs())
}

/// Range on which the battery functions of [`standard_pairs`] live: `None`
/// for the whole line.
fn battery_range(s: &Support) -> Option<(f64, f64)> {
    match s {
        Support::Whole => None,
        Support::UnitCube => Some((0.0, 1.0)),
        Support::Interval(lo, hi) => Some((*lo, *hi)),
        Support::Blocks(blocks) => blocks.first().and_then(|(_, b)| battery_range(b)),
    }
}

/// Six fixed test-function pairs acting on the first coordinate of `s`:
/// polynomial and trigonometric functions on the line, compact bumps inside
/// a bounded support.
pub fn standard_pairs(s: &ErrorStructure) -> Vec<(TestFunction, TestFunction)> {
    let lift = |f: TestFunction| {
        if s.dim == 1 {
            f
        } else {
            f.on_coordinate(s.dim, 0)
        }
    };
    let pairs = match battery_range(&s.support) {
        None => {
            let x = TestFunction::monomial(1);
            let sin = TestFunction::scalar(f64::sin, f64::cos, |t| -t.sin());
            let cos = TestFunction::scalar(f64::cos, |t| -t.sin(), |t| -t.cos());
            let gauss = TestFunction::scalar(
                |t| (-t * t).exp(),
                |t| -2.0 * t * (-t * t).exp(),
                |t| (4.0 * t * t - 2.0) * (-t * t).exp(),
            );
            vec![
                (x.clone(), TestFunction::monomial(2).sum(&x)),
                (TestFunction::monomial(2), TestFunction::monomial(3)),
                (sin.clone(), cos),
                (x.clone(), TestFunction::monomial(3)),
                (TestFunction::bump(0.0, 1.5), TestFunction::monomial(2)),
                (gauss, sin),
            ]
        }
        Some((lo, hi)) => {
            let at = |c: f64, w: f64| TestFunction::bump(lo + c * (hi - lo), w * (hi - lo));
            let ramp = TestFunction::scalar(move |t| t - lo, |_| 1.0, |_| 0.0);
            vec![
                (at(0.4, 0.3), at(0.6, 0.3)),
                (at(0.5, 0.4), at(0.5, 0.2)),
                (at(0.3, 0.25), at(0.5, 0.3)),
                (at(0.5, 0.45).product(&ramp), at(0.6, 0.35)),
                (at(0.7, 0.25), at(0.6, 0.35)),
                (at(0.45, 0.4), at(0.55, 0.4).product(&ramp)),
            ]
        }
    };
    pairs.into_iter().map(|(f, g)| (lift(f), lift(g))).collect()
}

/// Deterministic evaluation points inside the support of `s`.
pub fn probe_points(s: &ErrorStructure) -> Vec<Vec<f64>> {
    let (lo, hi) = battery_range(&s.support).unwrap_or((-3.0, 3.0));
    (0..=24)
        .map(|i| {
            let mut x = vec![0.5 * (lo + hi); s.dim];
            x[0] = lo + (hi - lo) * (0.02 + 0.96 * i as f64 / 24.0);
            x
        })
        .collect()
}

/// Monte-Carlo comparison of `E[f·A g]` and `E[g·A f]`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SymmetryCheck {
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// Standard error of `lhs − rhs`, computed on the paired samples.
    pub diff_stderr: f64,
}

impl SymmetryCheck {
    pub fn passed(&self) -> bool {
        (self.lhs.mean - self.rhs.mean).abs() <= 3.0 * self.diff_stderr
    }
}

fn require_generator(s: &ErrorStructure) -> Result<()> {
    if s.has_generator() {
        Ok(())
    } else {
        Err(Error::MissingGenerator(s.kind.name()))
    }
}

fn paired_estimates<F>(
    s: &ErrorStructure,
    count: usize,
    seed: u64,
    integrand: F,
) -> Result<(Estimate, Estimate, f64)>
where
    F: Fn(&[f64]) -> Result<(f64, f64)> + Sync,
{
    if count < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    let pairs: Vec<Result<(f64, f64)>> = mc::sample_blocks(count, seed, |rng| {
        let x = s.sample(rng);
        integrand(&x)
    });
    let pairs: Vec<(f64, f64)> = pairs.into_iter().collect::<Result<_>>()?;
    let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let d: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    Ok((
        Estimate::from_samples(&a),
        Estimate::from_samples(&b),
        Estimate::from_samples(&d).stderr,
    ))
}

pub fn check_symmetry(
    s: &ErrorStructure,
    f: &TestFunction,
    g: &TestFunction,
    count: usize,
    seed: u64,
) -> Result<SymmetryCheck> {
    require_generator(s)?;
    let (lhs, rhs, diff_stderr) = paired_estimates(s, count, seed, |x| {
        Ok((
            f.value(x) * s.generator(g, x)?,
            g.value(x) * s.generator(f, x)?,
        ))
    })?;
    Ok(SymmetryCheck {
        lhs,
        rhs,
        diff_stderr,
    })
}

/// Energy versus generator pairing.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FormLinkCheck {
    /// `½ E[Γ[f,g]]`, the adopted energy.
    pub half_energy: Estimate,
    /// `E[Γ[f,g]]`, reported for comparison.
    pub full_energy: Estimate,
    /// `E[(−A f)·g]`.
    pub generator_pairing: Estimate,
    pub diff_stderr: f64,
}

impl FormLinkCheck {
    pub fn passed(&self) -> bool {
        (self.half_energy.mean - self.generator_pairing.mean).abs() <= 3.0 * self.diff_stderr
    }
}

pub fn check_form_generator_link(
    s: &ErrorStructure,
    f: &TestFunction,
    g: &TestFunction,
    count: usize,
    seed: u64,
) -> Result<FormLinkCheck> {
    require_generator(s)?;
    let (energy, pairing, diff_stderr) = paired_estimates(s, count, seed, |x| {
        Ok((0.5 * gamma(s, f, g, x)?, -s.generator(f, x)? * g.value(x)))
    })?;
    Ok(FormLinkCheck {
        half_energy: energy,
        full_energy: energy.scaled(2.0),
        generator_pairing: pairing,
        diff_stderr,
    })
}

/// Conditional-expectation estimator for image structures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageEstimator {
    /// Equal-count bins.
    Bins { bins: usize },
    /// Nadaraya–Watson regression with a Gaussian kernel on `grid` nodes;
    /// default bandwidth `1.06·sd·N^(−1/5)`.
    Kernel { bandwidth: Option<f64>, grid: usize },
}

impl Default for ImageEstimator {
    fn default() -> Self {
        ImageEstimator::Bins { bins: 256 }
    }
}

/// Minimum samples (or effective samples, for the kernel) per cell.
pub const MIN_CELL_SAMPLES: usize = 30;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ImageCell {
    pub lo: f64,
    pub hi: f64,
    /// Node at which `value` is attached (mean of `X` over a bin, or a grid node).
    pub center: f64,
    pub count: usize,
    pub value: f64,
    pub stderr: f64,
    pub ok: bool,
}

/// Tabulated `Γ_X[I]` on the image space, interpolated piecewise linearly
/// between cell nodes and held constant beyond the outermost nodes.
#[derive(Debug, Clone, Serialize)]
pub struct ImageTable {
    pub estimator: ImageEstimator,
    pub bandwidth: Option<f64>,
    pub cells: Vec<ImageCell>,
}

impl ImageTable {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.ok).count()
    }

    pub fn range(&self) -> (f64, f64) {
        (
            self.cells.first().map_or(f64::NAN, |c| c.lo),
            self.cells.last().map_or(f64::NAN, |c| c.hi),
        )
    }

    pub fn eval(&self, y: f64) -> f64 {
        let cells = &self.cells;
        if cells.is_empty() || y.is_nan() {
            return f64::NAN;
        }
        let value = |c: &ImageCell| if c.ok { c.value } else { f64::NAN };
        let k = cells.partition_point(|c| c.center <= y);
        if k == 0 {
            return value(&cells[0]);
        }
        if k == cells.len() {
            return value(&cells[k - 1]);
        }
        let (a, b) = (&cells[k - 1], &cells[k]);
        let t = (y - a.center) / (b.center - a.center);
        (1.0 - t) * value(a) + t * value(b)
    }
}

/// Image ("Dirichlet law") of `s` under a scalar map `map`:
/// `Γ_X[I](y) = E[Γ[X] | X = y]`, estimated from `count` draws.
pub fn image(
    s: &ErrorStructure,
    map: &SmoothMap,
    estimator: ImageEstimator,
    count: usize,
    seed: u64,
) -> Result<ErrorStructure> {
    ensure_dim(s.dim, map.d_in(), "image map input")?;
    if map.d_out() != 1 {
        return Err(Error::Unsupported(
            "image structures are estimated for scalar maps only".into(),
        ));
    }
    match estimator {
        ImageEstimator::Bins { bins } if bins == 0 => {
            return Err(Error::InvalidParameter("bin count must be positive".into()))
        }
        ImageEstimator::Kernel { bandwidth, grid } => {
            if grid < 2 || bandwidth.is_some_and(|h| !(h > 0.0)) {
                return Err(Error::InvalidParameter(
                    "kernel estimator needs ≥ 2 grid nodes and a positive bandwidth".into(),
                ));
            }
        }
        _ => {}
    }
    let draws: Vec<Result<(f64, f64)>> = mc::sample_blocks(count, seed, |rng| {
        let x = s.sample(rng);
        let d = map.derivatives(&x)?;
        let a = (s.gamma_coeff)(&x);
        let g = (&d.jacobian * a * d.jacobian.transpose())[(0, 0)];
        Ok((d.value[0], g))
    });
    let mut pairs: Vec<(f64, f64)> = draws.into_iter().collect::<Result<_>>()?;
    if pairs.iter().any(|(y, g)| !y.is_finite() || !g.is_finite()) {
        return Err(Error::NonFinite("image sample"));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let table = match estimator {
        ImageEstimator::Bins { bins } => bin_table(&pairs, bins, estimator),
        ImageEstimator::Kernel { bandwidth, grid } => {
            kernel_table(&pairs, bandwidth, grid, estimator)
        }
    };
    let table = Arc::new(table);
    let lookup = table.clone();
    let base = s.clone();
    let push = map.clone();
    let (lo, hi) = table.range();
    Ok(ErrorStructure {
        kind: StructureKind::Image,
        dim: 1,
        sampler: Arc::new(move |rng: &mut dyn RngCore| {
            let x = base.sample(rng);
            vec![push.eval(&x).map_or(f64::NAN, |v| v[0])]
        }),
        gamma_coeff: Arc::new(move |y: &[f64]| DMatrix::from_element(1, 1, lookup.eval(y[0]))),
        drift: None,
        support: Support::Interval(lo, hi),
        image: Some(table),
    })
}

fn bin_table(sorted: &[(f64, f64)], bins: usize, estimator: ImageEstimator) -> ImageTable {
    let n = sorted.len();
    let bins = bins.min(n.max(1));
    let mut cells = Vec::with_capacity(bins);
    for b in 0..bins {
        let start = b * n / bins;
        let end = (b + 1) * n / bins;
        let chunk = &sorted[start..end];
        let ys: Vec<f64> = chunk.iter().map(|p| p.0).collect();
        let gs: Vec<f64> = chunk.iter().map(|p| p.1).collect();
        let lo = if start == 0 {
            sorted[0].0
        } else {
            0.5 * (sorted[start - 1].0 + sorted[start].0)
        };
        let hi = if end == n {
            sorted[n - 1].0
        } else {
            0.5 * (sorted[end - 1].0 + sorted[end].0)
        };
        let ok = chunk.len() >= MIN_CELL_SAMPLES;
        let g = Estimate::from_samples(&gs);
        cells.push(ImageCell {
            lo,
            hi,
            center: if ys.is_empty() {
                0.5 * (lo + hi)
            } else {
                mc::mean(&ys)
            },
            count: chunk.len(),
            value: if ok { g.mean } else { f64::NAN },
            stderr: g.stderr,
            ok,
        });
    }
    ImageTable {
        estimator,
        bandwidth: None,
        cells,
    }
}

fn kernel_table(
    sorted: &[(f64, f64)],
    bandwidth: Option<f64>,
    grid: usize,
    estimator: ImageEstimator,
) -> ImageTable {
    let n = sorted.len();
    let ys: Vec<f64> = sorted.iter().map(|p| p.0).collect();
    let sd = Estimate::from_samples(&ys).stderr * (n as f64).sqrt();
    let h = bandwidth.unwrap_or(1.06 * sd * (n as f64).powf(-0.2));
    let q = |p: f64| ys[((n - 1) as f64 * p).round() as usize];
    let (lo, hi) = (q(0.005), q(0.995));
    let step = (hi - lo) / (grid - 1) as f64;
    let cells = (0..grid)
        .map(|i| {
            let node = lo + step * i as f64;
            let a = ys.partition_point(|y| *y < node - 6.0 * h);
            let b = ys.partition_point(|y| *y <= node + 6.0 * h);
            let mut w_sum = 0.0;
            let mut w2_sum = 0.0;
            let mut wg = 0.0;
            for &(y, g) in &sorted[a..b] {
                let z = (y - node) / h;
                let w = (-0.5 * z * z).exp();
                w_sum += w;
                w2_sum += w * w;
                wg += w * g;
            }
            let m = wg / w_sum;
            let mut var = 0.0;
            for &(y, g) in &sorted[a..b] {
                let z = (y - node) / h;
                let w = (-0.5 * z * z).exp();
                var += w * w * (g - m) * (g - m);
            }
            let ess = if w2_sum > 0.0 {
                w_sum * w_sum / w2_sum
            } else {
                0.0
            };
            let ok = ess >= MIN_CELL_SAMPLES as f64;
            ImageCell {
                lo: (node - 0.5 * step).max(lo),
                hi: (node + 0.5 * step).min(hi),
                center: node,
                count: b - a,
                value: if ok { m } else { f64::NAN },
                stderr: var.sqrt() / w_sum,
                ok,
            }
        })
        .collect();
    ImageTable {
        estimator,
        bandwidth: Some(h),
        cells,
    }
}

/// Result of the drift/diffusion correspondence check.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DiffusionCheck {
    /// `(E[F(S_t)] − F(x)) / t`.
    pub empirical_rate: Estimate,
    /// `A[F](x)`.
    pub predicted: f64,
    pub horizon: f64,
    pub steps: usize,
    /// Declared time-discretisation budget `t·max(1, |A[F](x)|)`.
    pub bias_budget: f64,
}

impl DiffusionCheck {
    pub fn passed(&self) -> bool {
        self.empirical_rate
            .within(self.predicted, 3.0, self.bias_budget)
    }
}

/// Euler simulation of `dS = A[X](S) dt + √a(S) dB` from `x` over `[0, t]`,
/// compared with the generator at `x`.
///
/// `steps` defaults to `max(10, ⌈t/0.001⌉)`.
pub fn diffusion_consistency(
    s: &ErrorStructure,
    f: &TestFunction,
    x: &[f64],
    horizon: f64,
    steps: Option<usize>,
    count: usize,
    seed: u64,
) -> Result<DiffusionCheck> {
    require_generator(s)?;
    ensure_dim(s.dim, f.dim(), "test function")?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidParameter("horizon must be positive".into()));
    }
    let steps = steps.unwrap_or_else(|| 10usize.max((horizon / 0.001).ceil() as usize));
    if steps < 10 {
        return Err(Error::InvalidParameter(format!(
            "diffusion stepping needs at least 10 steps, got {steps}"
        )));
    }
    if count < 2 {
        return Err(Error::InvalidParameter("need at least two paths".into()));
    }
    let predicted = s.generator(f, x)?;
    linalg::psd_sqrt(&s.gamma_coeff(x)?)?;
    let dt = horizon / steps as f64;
    let sqrt_dt = dt.sqrt();
    let drift = s.drift.clone().expect("checked above");
    let coeff = s.gamma_coeff.clone();
    let f0 = f.value(x);
    let d = s.dim;
    let outcomes: Vec<Result<f64>> = mc::sample_blocks(count, seed, |rng| {
        let mut state = DVector::from_column_slice(x);
        let mut noise = DVector::zeros(d);
        for _ in 0..steps {
            let root = linalg::psd_sqrt(&coeff(state.as_slice()))?;
            for v in noise.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
            state += drift(state.as_slice()) * dt + root * &noise * sqrt_dt;
        }
        Ok((f.value(state.as_slice()) - f0) / horizon)
    });
    let rates: Vec<f64> = outcomes.into_iter().collect::<Result<_>>()?;
    Ok(DiffusionCheck {
        empirical_rate: Estimate::from_samples(&rates),
        predicted,
        horizon,
        steps,
        bias_budget: horizon * predicted.abs().max(1.0),
    })
}
