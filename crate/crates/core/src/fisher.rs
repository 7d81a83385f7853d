//! Fisher information of parametric models and the identification
//! `Γ[I](x) = J(x)⁻¹`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Exp1, StandardNormal};
use serde::Serialize;

use crate::error::{ensure_dim, Error, Result};
use crate::error_algebra::{ErroneousValue, SmoothMap};
use crate::linalg;
use crate::mc::{self, Estimate};

/// Where a single observation lives, for quadrature.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationSupport {
    Discrete(Vec<f64>),
    /// Integrated with composite Simpson on `QUADRATURE_PANELS` panels.
    Interval {
        lo: f64,
        hi: f64,
    },
}

pub const QUADRATURE_PANELS: usize = 1 << 14;

/// A family of laws `Q_x` of a scalar observation, `x ∈ ℝ^d`.
///
/// Observations are produced from a noise draw through [`observe`], so the
/// same noise can be reused at neighbouring parameters.
///
/// [`observe`]: ParametricModel::observe
pub trait ParametricModel: Send + Sync {
    fn name(&self) -> String;
    fn param_dim(&self) -> usize;
    fn in_domain(&self, x: &[f64]) -> bool;
    fn draw_noise(&self, rng: &mut dyn RngCore) -> f64;
    fn observe(&self, x: &[f64], noise: f64) -> f64;
    fn log_likelihood(&self, x: &[f64], obs: f64) -> f64;

    /// Analytic score, if known.
    fn score(&self, _x: &[f64], _obs: f64) -> Option<DVector<f64>> {
        None
    }

    /// Closed-form information, if known.
    fn analytic_fisher(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    fn observation_support(&self, _x: &[f64]) -> Option<ObservationSupport> {
        None
    }
}

impl fmt::Debug for dyn ParametricModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ParametricModel({})", self.name())
    }
}

/// Score from the model, or central differences of the log-likelihood with
/// step `1e-5·(1 + |xᵢ|)`.
pub fn score(m: &dyn ParametricModel, x: &[f64], obs: f64) -> DVector<f64> {
    if let Some(s) = m.score(x, obs) {
        return s;
    }
    let mut g = DVector::zeros(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-5 * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let up = m.log_likelihood(&xp, obs);
        xp[i] = x[i] - h;
        let down = m.log_likelihood(&xp, obs);
        xp[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMethod {
    Analytic,
    MonteCarlo,
    Quadrature,
}

impl FisherMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "analytic" => Some(Self::Analytic),
            "monte_carlo" | "mc" => Some(Self::MonteCarlo),
            "quadrature" => Some(Self::Quadrature),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FisherResult {
    pub x: Vec<f64>,
    #[serde(serialize_with = "crate::bias_operators::serialize_matrix")]
    pub j: DMatrix<f64>,
    /// `J⁻¹`; absent when `J` is singular.
    #[serde(serialize_with = "serialize_opt_matrix")]
    pub gamma_i: Option<DMatrix<f64>>,
    pub method: FisherMethod,
    /// Entrywise standard errors, Monte Carlo only.
    #[serde(serialize_with = "serialize_opt_matrix")]
    pub stderr: Option<DMatrix<f64>>,
    pub singular: bool,
}

fn serialize_opt_matrix<S: serde::Serializer>(
    m: &Option<DMatrix<f64>>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    match m {
        Some(m) => crate::bias_operators::serialize_matrix(m, s),
        None => s.serialize_none(),
    }
}

fn check_point(m: &dyn ParametricModel, x: &[f64]) -> Result<()> {
    ensure_dim(m.param_dim(), x.len(), "model parameter")?;
    if x.iter().all(|v| v.is_finite()) && m.in_domain(x) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "parameter {x:?} outside the domain of {}",
            m.name()
        )))
    }
}

fn outer(s: &DVector<f64>) -> DMatrix<f64> {
    s * s.transpose()
}

fn quadrature_fisher(m: &dyn ParametricModel, x: &[f64]) -> Result<DMatrix<f64>> {
    let d = x.len();
    let support = m
        .observation_support(x)
        .ok_or_else(|| Error::Unsupported(format!("{} has no quadrature support", m.name())))?;
    let density_outer = |obs: f64| -> DMatrix<f64> {
        let p = m.log_likelihood(x, obs).exp();
        if p == 0.0 {
            DMatrix::zeros(d, d)
        } else {
            outer(&score(m, x, obs)) * p
        }
    };
    let j = match support {
        ObservationSupport::Discrete(points) => points
            .iter()
            .fold(DMatrix::zeros(d, d), |acc, &o| acc + density_outer(o)),
        ObservationSupport::Interval { lo, hi } => {
            let panels = QUADRATURE_PANELS;
            let h = (hi - lo) / panels as f64;
            let mut acc = DMatrix::zeros(d, d);
            for k in 0..=panels {
                let w = if k == 0 || k == panels {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += density_outer(lo + k as f64 * h) * w;
            }
            acc * (h / 3.0)
        }
    };
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quadrature Fisher information"));
    }
    Ok(j)
}

fn mc_fisher(
    m: &dyn ParametricModel,
    x: &[f64],
    count: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if count < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    let d = x.len();
    let scores: Vec<DVector<f64>> = mc::sample_blocks(count, seed, |rng| {
        let obs = m.observe(x, m.draw_noise(rng));
        score(m, x, obs)
    });
    if scores.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("score sample"));
    }
    let mut j = DMatrix::zeros(d, d);
    let mut se = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            let e = Estimate::of(&scores, |s| s[a] * s[b]);
            j[(a, b)] = e.mean;
            se[(a, b)] = e.stderr;
        }
    }
    Ok((j, se))
}

/// `J(x) = E_x[∂ᵢ log L · ∂ⱼ log L]` and, when invertible, `Γ[I](x) = J⁻¹`.
pub fn fisher_info(
    m: &dyn ParametricModel,
    x: &[f64],
    method: FisherMethod,
    count: usize,
    seed: u64,
) -> Result<FisherResult> {
    check_point(m, x)?;
    let (j, stderr) = match method {
        FisherMethod::Analytic => (
            m.analytic_fisher(x).ok_or_else(|| {
                Error::Unsupported(format!("{} has no closed-form information", m.name()))
            })?,
            None,
        ),
        FisherMethod::Quadrature => (quadrature_fisher(m, x)?, None),
        FisherMethod::MonteCarlo => {
            let (j, se) = mc_fisher(m, x, count, seed)?;
            (j, Some(se))
        }
    };
    let j = (&j + j.transpose()) * 0.5;
    let gamma_i = match linalg::sym_inverse(&j) {
        Ok(g) => Some(g),
        Err(Error::Singular { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(FisherResult {
        x: x.to_vec(),
        singular: gamma_i.is_none(),
        j,
        gamma_i,
        method,
        stderr,
    })
}

/// Per-coordinate mean of the score at `x`.
pub fn score_identity(
    m: &dyn ParametricModel,
    x: &[f64],
    count: usize,
    seed: u64,
) -> Result<Vec<Estimate>> {
    check_point(m, x)?;
    let scores: Vec<DVector<f64>> = mc::sample_blocks(count, seed, |rng| {
        let obs = m.observe(x, m.draw_noise(rng));
        score(m, x, obs)
    });
    Ok((0..x.len())
        .map(|i| Estimate::of(&scores, |s| s[i]))
        .collect())
}

/// Bernoulli law with success probability `p ∈ (0, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct Bernoulli;

impl ParametricModel for Bernoulli {
    fn name(&self) -> String {
        "bernoulli".into()
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn in_domain(&self, x: &[f64]) -> bool {
        x[0] > 0.0 && x[0] < 1.0
    }
    fn draw_noise(&self, rng: &mut dyn RngCore) -> f64 {
        rng.random::<f64>()
    }
    fn observe(&self, x: &[f64], u: f64) -> f64 {
        if u < x[0] {
            1.0
        } else {
            0.0
        }
    }
    fn log_likelihood(&self, x: &[f64], obs: f64) -> f64 {
        obs * x[0].ln() + (1.0 - obs) * (1.0 - x[0]).ln()
    }
    fn score(&self, x: &[f64], obs: f64) -> Option<DVector<f64>> {
        let p = x[0];
        Some(DVector::from_element(1, obs / p - (1.0 - obs) / (1.0 - p)))
    }
    fn analytic_fisher(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, 1.0 / (x[0] * (1.0 - x[0]))))
    }
    fn observation_support(&self, _x: &[f64]) -> Option<ObservationSupport> {
        Some(ObservationSupport::Discrete(vec![0.0, 1.0]))
    }
}

/// Bernoulli law parametrized by its odds `θ = p/(1 − p) > 0`.
#[derive(Debug, Clone, Copy)]
pub struct BernoulliOdds;

impl ParametricModel for BernoulliOdds {
    fn name(&self) -> String {
        "bernoulli_odds".into()
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn in_domain(&self, x: &[f64]) -> bool {
        x[0] > 0.0
    }
    fn draw_noise(&self, rng: &mut dyn RngCore) -> f64 {
        rng.random::<f64>()
    }
    fn observe(&self, x: &[f64], u: f64) -> f64 {
        if u < x[0] / (1.0 + x[0]) {
            1.0
        } else {
            0.0
        }
    }
    fn log_likelihood(&self, x: &[f64], obs: f64) -> f64 {
        let t = x[0];
        obs * t.ln() - (1.0 + t).ln()
    }
    fn score(&self, x: &[f64], obs: f64) -> Option<DVector<f64>> {
        let t = x[0];
        Some(DVector::from_element(1, obs / t - 1.0 / (1.0 + t)))
    }
    fn analytic_fisher(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let t = x[0];
        Some(DMatrix::from_element(
            1,
            1,
            1.0 / (t * (1.0 + t) * (1.0 + t)),
        ))
    }
    fn observation_support(&self, _x: &[f64]) -> Option<ObservationSupport> {
        Some(ObservationSupport::Discrete(vec![0.0, 1.0]))
    }
}

/// Normal law with unknown mean and known standard deviation.
#[derive(Debug, Clone, Copy)]
pub struct NormalMean {
    pub sigma: f64,
}

impl ParametricModel for NormalMean {
    fn name(&self) -> String {
        format!("normal_mean(sigma={})", self.sigma)
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn in_domain(&self, _x: &[f64]) -> bool {
        self.sigma > 0.0
    }
    fn draw_noise(&self, rng: &mut dyn RngCore) -> f64 {
        rng.sample(StandardNormal)
    }
    fn observe(&self, x: &[f64], z: f64) -> f64 {
        x[0] + self.sigma * z
    }
    fn log_likelihood(&self, x: &[f64], obs: f64) -> f64 {
        let z = (obs - x[0]) / self.sigma;
        -0.5 * z * z - self.sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
    fn score(&self, x: &[f64], obs: f64) -> Option<DVector<f64>> {
        Some(DVector::from_element(
            1,
            (obs - x[0]) / (self.sigma * self.sigma),
        ))
    }
    fn analytic_fisher(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, 1.0 / (self.sigma * self.sigma)))
    }
    fn observation_support(&self, x: &[f64]) -> Option<ObservationSupport> {
        Some(ObservationSupport::Interval {
            lo: x[0] - 12.0 * self.sigma,
            hi: x[0] + 12.0 * self.sigma,
        })
    }
}

/// Normal law with parameter `(mean, sd)`.
#[derive(Debug, Clone, Copy)]
pub struct NormalMeanSd;

impl ParametricModel for NormalMeanSd {
    fn name(&self) -> String {
        "normal_mean_sd".into()
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn in_domain(&self, x: &[f64]) -> bool {
        x[1] > 0.0
    }
    fn draw_noise(&self, rng: &mut dyn RngCore) -> f64 {
        rng.sample(StandardNormal)
    }
    fn observe(&self, x: &[f64], z: f64) -> f64 {
        x[0] + x[1] * z
    }
    fn log_likelihood(&self, x: &[f64], obs: f64) -> f64 {
        let z = (obs - x[0]) / x[1];
        -0.5 * z * z - x[1].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
    fn analytic_fisher(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let v = x[1] * x[1];
        Some(DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0 / v,
            2.0 / v,
        ])))
    }
    fn observation_support(&self, x: &[f64]) -> Option<ObservationSupport> {
        Some(ObservationSupport::Interval {
            lo: x[0] - 12.0 * x[1],
            hi: x[0] + 12.0 * x[1],
        })
    }
}

/// Exponential law with rate `λ > 0`.
#[derive(Debug, Clone, Copy)]
pub struct Exponential;

impl ParametricModel for Exponential {
    fn name(&self) -> String {
        "exponential".into()
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn in_domain(&self, x: &[f64]) -> bool {
        x[0] > 0.0
    }
    fn draw_noise(&self, rng: &mut dyn RngCore) -> f64 {
        rng.sample(Exp1)
    }
    fn observe(&self, x: &[f64], e: f64) -> f64 {
        e / x[0]
    }
    fn log_likelihood(&self, x: &[f64], obs: f64) -> f64 {
        x[0].ln() - x[0] * obs
    }
    fn score(&self, x: &[f64], obs: f64) -> Option<DVector<f64>> {
        Some(DVector::from_element(1, 1.0 / x[0] - obs))
    }
    fn analytic_fisher(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, 1.0 / (x[0] * x[0])))
    }
    fn observation_support(&self, x: &[f64]) -> Option<ObservationSupport> {
        Some(ObservationSupport::Interval {
            lo: 0.0,
            hi: 60.0 / x[0],
        })
    }
}

/// A model whose law does not depend on the parameter.
#[derive(Debug, Clone, Copy)]
pub struct Flat;

impl ParametricModel for Flat {
    fn name(&self) -> String {
        "flat".into()
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn in_domain(&self, _x: &[f64]) -> bool {
        true
    }
    fn draw_noise(&self, rng: &mut dyn RngCore) -> f64 {
        rng.random::<f64>()
    }
    fn observe(&self, _x: &[f64], u: f64) -> f64 {
        u
    }
    fn log_likelihood(&self, _x: &[f64], _obs: f64) -> f64 {
        0.0
    }
    fn analytic_fisher(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(1, 1))
    }
    fn observation_support(&self, _x: &[f64]) -> Option<ObservationSupport> {
        Some(ObservationSupport::Interval { lo: 0.0, hi: 1.0 })
    }
}

/// A smooth bijection given with its inverse.
#[derive(Debug, Clone)]
pub struct InvertibleMap {
    pub forward: SmoothMap,
    pub inverse: SmoothMap,
}

impl InvertibleMap {
    pub fn new(forward: SmoothMap, inverse: SmoothMap) -> Result<Self> {
        ensure_dim(forward.d_in(), forward.d_out(), "invertible map")?;
        ensure_dim(forward.d_in(), inverse.d_in(), "inverse map")?;
        ensure_dim(forward.d_out(), inverse.d_out(), "inverse map output")?;
        Ok(Self { forward, inverse })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            forward: SmoothMap::identity(d),
            inverse: SmoothMap::identity(d),
        }
    }

    /// `p ↦ p/(1 − p)` on `(0, 1)`.
    pub fn odds() -> Self {
        Self {
            forward: SmoothMap::scalar(
                |p| p / (1.0 - p),
                |p| 1.0 / ((1.0 - p) * (1.0 - p)),
                |p| 2.0 / (1.0 - p).powi(3),
            ),
            inverse: SmoothMap::scalar(
                |t| t / (1.0 + t),
                |t| 1.0 / ((1.0 + t) * (1.0 + t)),
                |t| -2.0 / (1.0 + t).powi(3),
            ),
        }
    }

    /// `x ↦ a·x + c` with `a ≠ 0`.
    pub fn affine_scalar(a: f64, c: f64) -> Result<Self> {
        if a == 0.0 || !a.is_finite() || !c.is_finite() {
            return Err(Error::InvalidParameter(
                "affine map needs a finite non-zero slope".into(),
            ));
        }
        Ok(Self {
            forward: SmoothMap::scalar(move |x| a * x + c, move |_| a, |_| 0.0),
            inverse: SmoothMap::scalar(move |y| (y - c) / a, move |_| 1.0 / a, |_| 0.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.forward.d_in()
    }
}

/// `m` read in the coordinates `y = f(x)`.
#[derive(Clone)]
pub struct Reparametrized {
    pub base: Arc<dyn ParametricModel>,
    pub map: InvertibleMap,
}

impl Reparametrized {
    fn back(&self, y: &[f64]) -> Vec<f64> {
        self.map
            .inverse
            .eval(y)
            .map(|v| v.iter().copied().collect())
            .unwrap_or_else(|_| vec![f64::NAN; y.len()])
    }

    fn inverse_jacobian(&self, y: &[f64]) -> Option<DMatrix<f64>> {
        self.map.inverse.derivatives(y).ok().map(|d| d.jacobian)
    }
}

impl ParametricModel for Reparametrized {
    fn name(&self) -> String {
        format!("reparametrized({})", self.base.name())
    }
    fn param_dim(&self) -> usize {
        self.base.param_dim()
    }
    fn in_domain(&self, y: &[f64]) -> bool {
        let x = self.back(y);
        x.iter().all(|v| v.is_finite()) && self.base.in_domain(&x)
    }
    fn draw_noise(&self, rng: &mut dyn RngCore) -> f64 {
        self.base.draw_noise(rng)
    }
    fn observe(&self, y: &[f64], noise: f64) -> f64 {
        self.base.observe(&self.back(y), noise)
    }
    fn log_likelihood(&self, y: &[f64], obs: f64) -> f64 {
        self.base.log_likelihood(&self.back(y), obs)
    }
    fn score(&self, y: &[f64], obs: f64) -> Option<DVector<f64>> {
        let x = self.back(y);
        let k = self.inverse_jacobian(y)?;
        Some(k.transpose() * score(self.base.as_ref(), &x, obs))
    }
    fn analytic_fisher(&self, y: &[f64]) -> Option<DMatrix<f64>> {
        let x = self.back(y);
        let k = self.inverse_jacobian(y)?;
        Some(k.transpose() * self.base.analytic_fisher(&x)? * k)
    }
    fn observation_support(&self, y: &[f64]) -> Option<ObservationSupport> {
        self.base.observation_support(&self.back(y))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReparametrizationCheck {
    /// `J_f Γ[I](x) J_fᵀ`.
    #[serde(serialize_with = "crate::bias_operators::serialize_matrix")]
    pub image_gamma: DMatrix<f64>,
    /// `J_y⁻¹` of the model read at `y = f(x)`.
    #[serde(serialize_with = "crate::bias_operators::serialize_matrix")]
    pub direct_gamma: DMatrix<f64>,
    /// `max |image − direct| / max |direct|`.
    pub defect: f64,
    /// Propagated Monte-Carlo standard error bound on the defect, if any.
    pub defect_stderr: Option<f64>,
}

/// Compares the image of `Γ[I]` under `f` with the information of `direct`,
/// a model parametrized by `y = f(x)`.
pub fn reparametrize_check_against(
    m: &dyn ParametricModel,
    direct: &dyn ParametricModel,
    f: &InvertibleMap,
    x: &[f64],
    method: FisherMethod,
    count: usize,
    seed: u64,
) -> Result<ReparametrizationCheck> {
    ensure_dim(m.param_dim(), f.dim(), "reparametrization")?;
    let d = f.forward.derivatives(x)?;
    let det = d.jacobian.determinant();
    if !(det.abs() > 1e-300) || !det.is_finite() {
        return Err(Error::Singular {
            condition: f64::INFINITY,
        });
    }
    let y: Vec<f64> = d.value.iter().copied().collect();
    let here = fisher_info(m, x, method, count, seed)?;
    let there = fisher_info(direct, &y, method, count, mc::derive_seed(seed, 1))?;
    let (Some(gx), Some(gy)) = (&here.gamma_i, &there.gamma_i) else {
        return Err(Error::Singular {
            condition: f64::INFINITY,
        });
    };
    let image_gamma = &d.jacobian * gx * d.jacobian.transpose();
    let scale = linalg::max_abs_entry(gy).max(f64::MIN_POSITIVE);
    let defect = linalg::max_abs_diff(&image_gamma, gy) / scale;
    let defect_stderr = match (&here.stderr, &there.stderr) {
        (Some(sx), Some(sy)) => {
            // first-order propagation of the entrywise errors through J⁻¹
            let spread = |g: &DMatrix<f64>, se: &DMatrix<f64>| {
                linalg::max_abs_entry(g).powi(2) * linalg::max_abs_entry(se)
            };
            let jx = d.jacobian.abs().max();
            Some((jx * jx * spread(gx, sx)).hypot(spread(gy, sy)) / scale)
        }
        _ => None,
    };
    Ok(ReparametrizationCheck {
        image_gamma,
        direct_gamma: gy.clone(),
        defect,
        defect_stderr,
    })
}

/// [`reparametrize_check_against`] with the model read through `f⁻¹`.
pub fn reparametrize_check(
    m: Arc<dyn ParametricModel>,
    f: &InvertibleMap,
    x: &[f64],
    method: FisherMethod,
    count: usize,
    seed: u64,
) -> Result<ReparametrizationCheck> {
    let direct = Reparametrized {
        base: m.clone(),
        map: f.clone(),
    };
    reparametrize_check_against(m.as_ref(), &direct, f, x, method, count, seed)
}

pub type Estimator = dyn Fn(&[f64]) -> f64 + Send + Sync;

pub fn sample_mean(obs: &[f64]) -> f64 {
    obs.iter().sum::<f64>() / obs.len() as f64
}

pub fn sample_median(obs: &[f64]) -> f64 {
    let mut v = obs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CramerRaoCheck {
    /// Variance of `T` over `k` observations.
    pub variance: Estimate,
    pub mean: Estimate,
    /// Finite-difference gradient of `E_x[T]`, common random numbers.
    pub gradient: Vec<Estimate>,
    /// `∇E[T]ᵀ (k·J)⁻¹ ∇E[T]`.
    pub bound: f64,
    pub slack: f64,
    /// Combined standard error of `slack`.
    pub slack_stderr: f64,
}

impl CramerRaoCheck {
    pub fn passed(&self) -> bool {
        self.slack >= -3.0 * self.slack_stderr
    }

    pub fn strictly_inefficient(&self) -> bool {
        self.slack > 3.0 * self.slack_stderr
    }
}

pub fn cramer_rao_check(
    m: &dyn ParametricModel,
    x: &[f64],
    estimator: &Estimator,
    k: usize,
    count: usize,
    seed: u64,
) -> Result<CramerRaoCheck> {
    check_point(m, x)?;
    if k == 0 || count < 2 {
        return Err(Error::InvalidParameter(
            "need at least one observation per estimate and two estimates".into(),
        ));
    }
    let d = x.len();
    let j = match m.analytic_fisher(x) {
        Some(j) => j,
        None => match quadrature_fisher(m, x) {
            Ok(j) => j,
            Err(_) => mc_fisher(m, x, count, mc::derive_seed(seed, 2))?.0,
        },
    };
    let inv_kj = linalg::sym_inverse(&(j * k as f64))?;
    let steps: Vec<f64> = x.iter().map(|v| 0.01 * (1.0 + v.abs())).collect();
    for i in 0..d {
        for sign in [1.0, -1.0] {
            let mut xs = x.to_vec();
            xs[i] += sign * steps[i];
            if !m.in_domain(&xs) {
                return Err(Error::InvalidParameter(format!(
                    "finite-difference point {xs:?} leaves the domain"
                )));
            }
        }
    }
    let draws: Vec<(f64, Vec<f64>)> = mc::sample_blocks(count, seed, |rng| {
        let noise: Vec<f64> = (0..k).map(|_| m.draw_noise(rng)).collect();
        let at = |p: &[f64]| -> f64 {
            let obs: Vec<f64> = noise.iter().map(|&z| m.observe(p, z)).collect();
            estimator(&obs)
        };
        let t = at(x);
        let grads = (0..d)
            .map(|i| {
                let mut up = x.to_vec();
                let mut down = x.to_vec();
                up[i] += steps[i];
                down[i] -= steps[i];
                (at(&up) - at(&down)) / (2.0 * steps[i])
            })
            .collect();
        (t, grads)
    });
    if draws
        .iter()
        .any(|(t, g)| !t.is_finite() || g.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite("estimator value"));
    }
    let mean = Estimate::of(&draws, |p| p.0);
    let variance = Estimate::of(&draws, |p| (p.0 - mean.mean).powi(2))
        .scaled(count as f64 / (count - 1) as f64);
    let gradient: Vec<Estimate> = (0..d).map(|i| Estimate::of(&draws, |p| p.1[i])).collect();
    let g = DVector::from_iterator(d, gradient.iter().map(|e| e.mean));
    let bound = (g.transpose() * &inv_kj * &g)[(0, 0)];
    let sensitivity = &inv_kj * &g * 2.0;
    let bound_se = sensitivity
        .iter()
        .zip(&gradient)
        .map(|(s, e)| (s * e.stderr).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(CramerRaoCheck {
        slack: variance.mean - bound,
        slack_stderr: variance.stderr.hypot(bound_se),
        variance,
        mean,
        gradient,
        bound,
    })
}

/// A tabulated `Γ[I]` field over a one-dimensional parameter grid.
#[derive(Debug, Clone, Serialize)]
pub struct IdentifiedField {
    pub model: String,
    pub method: FisherMethod,
    pub nodes: Vec<FieldNode>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldNode {
    pub x: Vec<f64>,
    #[serde(serialize_with = "serialize_opt_matrix")]
    pub gamma: Option<DMatrix<f64>>,
    /// `J` at the node was singular; the cell carries no precision.
    pub singular: bool,
}

impl IdentifiedField {
    /// Piecewise-linear interpolation between neighbouring one-dimensional
    /// nodes; `None` outside the grid or next to a singular node.
    pub fn interpolate(&self, x: f64) -> Option<DMatrix<f64>> {
        let pos = self
            .nodes
            .windows(2)
            .position(|w| w[0].x[0] <= x && x <= w[1].x[0])?;
        let (a, b) = (&self.nodes[pos], &self.nodes[pos + 1]);
        let (ga, gb) = (a.gamma.as_ref()?, b.gamma.as_ref()?);
        let t = if b.x[0] > a.x[0] {
            (x - a.x[0]) / (b.x[0] - a.x[0])
        } else {
            0.0
        };
        Some(ga * (1.0 - t) + gb * t)
    }

    /// An erroneous value at `x` whose covariance is the identified `Γ[I](x)`.
    pub fn to_erroneous_value(&self, x: f64, bias: f64) -> Result<ErroneousValue> {
        let g = self
            .interpolate(x)
            .ok_or_else(|| Error::Estimation(format!("no identified precision at {x}")))?;
        ErroneousValue::new(
            DVector::from_element(1, x),
            DVector::from_element(1, bias),
            g,
        )
    }

    pub fn all_singular(&self) -> bool {
        self.nodes.iter().all(|n| n.singular)
    }
}

pub fn identify_structure(
    m: &dyn ParametricModel,
    grid: &[Vec<f64>],
    method: FisherMethod,
    count: usize,
    seed: u64,
) -> Result<IdentifiedField> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty parameter grid".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let nodes = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let r = fisher_info(m, x, method, count, mc::derive_seed(seed, i as u64))?;
            Ok(FieldNode {
                x: x.clone(),
                singular: r.singular,
                gamma: r.gamma_i,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IdentifiedField {
        model: m.name(),
        method,
        nodes,
    })
}
