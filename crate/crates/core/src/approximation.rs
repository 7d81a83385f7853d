//! Coupled approximation sequences `(Y, Yₙ)` and their error moments.
//!
//! Every scheme draws the limit `Y` together with the approximations `Yₙ`
//! for a whole list of indices from one underlying path, so errors at
//! different `n` are coupled exactly as in the underlying construction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::functions::TestFunction;
use crate::mc::{self, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    BinaryDigits,
    PolyaUrn,
    SeriesIndependent,
    StochasticIntegral,
    WienerPerturbation,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::BinaryDigits => "binary_digits",
            Self::PolyaUrn => "polya_urn",
            Self::SeriesIndependent => "series_independent",
            Self::StochasticIntegral => "stochastic_integral",
            Self::WienerPerturbation => "wiener_perturbation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Self::BinaryDigits,
            Self::PolyaUrn,
            Self::SeriesIndependent,
            Self::StochasticIntegral,
            Self::WienerPerturbation,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

/// Law of the series increments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "law")]
pub enum Law {
    Constant {
        value: f64,
    },
    /// Fair ±1.
    Rademacher,
    Normal {
        mean: f64,
        sd: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
}

impl Law {
    pub fn mean(&self) -> f64 {
        match *self {
            Law::Constant { value } => value,
            Law::Rademacher => 0.0,
            Law::Normal { mean, .. } => mean,
            Law::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Law::Constant { .. } => 0.0,
            Law::Rademacher => 1.0,
            Law::Normal { sd, .. } => sd * sd,
            Law::Uniform { lo, hi } => (hi - lo) * (hi - lo) / 12.0,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            Law::Constant { value } => value.is_finite(),
            Law::Rademacher => true,
            Law::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            Law::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid law for {what}: {self:?}"
            )))
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, signs: &mut SignSource) -> f64 {
        match *self {
            Law::Constant { value } => value,
            Law::Rademacher => signs.next(rng),
            Law::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            Law::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

/// Fair signs served from a cached 64-bit word.
struct SignSource {
    bits: u64,
    left: u32,
}

impl SignSource {
    fn new() -> Self {
        Self { bits: 0, left: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        if self.left == 0 {
            self.bits = rng.random();
            self.left = 64;
        }
        let b = self.bits & 1;
        self.bits >>= 1;
        self.left -= 1;
        if b == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Integrand `H` of the stochastic integral `∫₀¹ H_s dB_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "integrand")]
pub enum Integrand {
    /// `H_s = B_s`.
    Brownian,
    /// `H_s = s`.
    Time,
    Constant {
        value: f64,
    },
    /// `H_s = sin(B_s)`.
    SinBrownian,
}

impl Integrand {
    fn at(&self, t: f64, b: f64) -> f64 {
        match *self {
            Integrand::Brownian => b,
            Integrand::Time => t,
            Integrand::Constant { value } => value,
            Integrand::SinBrownian => b.sin(),
        }
    }
}

pub const BINARY_DIGITS: u32 = 53;
pub const DEFAULT_EXPLICIT_TERMS: usize = 1024;
pub const DEFAULT_FINE_STEPS: usize = 1 << 12;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SchemeParams {
    BinaryDigits,
    /// `horizon = None` draws `X∞` exactly from its Beta limit given the
    /// urn state; `Some(h)` runs the urn to `h` draws instead.
    PolyaUrn {
        horizon: Option<usize>,
    },
    /// `S = Σ Xₖ/k² + Zₖ/k`; terms beyond `explicit_terms` are replaced by
    /// a Gaussian with the exact tail mean and variance.
    SeriesIndependent {
        x_law: Law,
        z_law: Law,
        explicit_terms: usize,
    },
    StochasticIntegral {
        integrand: Integrand,
        fine_steps: usize,
    },
    /// `Y = B_t`, `Y_ε = Y + √ε W_t` with `ε = 1/n`.
    WienerPerturbation {
        t: f64,
    },
}

impl SchemeParams {
    pub fn kind(&self) -> SchemeKind {
        match self {
            Self::BinaryDigits => SchemeKind::BinaryDigits,
            Self::PolyaUrn { .. } => SchemeKind::PolyaUrn,
            Self::SeriesIndependent { .. } => SchemeKind::SeriesIndependent,
            Self::StochasticIntegral { .. } => SchemeKind::StochasticIntegral,
            Self::WienerPerturbation { .. } => SchemeKind::WienerPerturbation,
        }
    }

    /// Defaults used by the command line and the examples.
    pub fn default_for(kind: SchemeKind) -> Self {
        match kind {
            SchemeKind::BinaryDigits => Self::BinaryDigits,
            SchemeKind::PolyaUrn => Self::PolyaUrn { horizon: None },
            SchemeKind::SeriesIndependent => Self::SeriesIndependent {
                x_law: Law::Constant { value: 0.0 },
                z_law: Law::Rademacher,
                explicit_terms: DEFAULT_EXPLICIT_TERMS,
            },
            SchemeKind::StochasticIntegral => Self::StochasticIntegral {
                integrand: Integrand::Brownian,
                fine_steps: DEFAULT_FINE_STEPS,
            },
            SchemeKind::WienerPerturbation => Self::WienerPerturbation { t: 1.0 },
        }
    }
}

/// `αₙ = factor · baseⁿ` or `αₙ = factor · n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "rate")]
pub enum Rate {
    Geometric { base: f64, factor: f64 },
    Linear { factor: f64 },
}

impl Rate {
    pub fn alpha(&self, n: usize) -> f64 {
        match *self {
            Rate::Geometric { base, factor } => factor * base.powi(n as i32),
            Rate::Linear { factor } => factor * n as f64,
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, Rate::Geometric { .. })
    }

    /// Bias scale `2^(n+1)` of the binary digits.
    pub const BINARY_BIAS: Rate = Rate::Geometric {
        base: 2.0,
        factor: 2.0,
    };
    /// Variance scale `3·4ⁿ` of the binary digits.
    pub const BINARY_VARIANCE: Rate = Rate::Geometric {
        base: 4.0,
        factor: 3.0,
    };
    pub const LINEAR: Rate = Rate::Linear { factor: 1.0 };
}

/// One draw of the limit and of its approximations at the requested indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoupledSample {
    pub y: f64,
    pub yn: Vec<f64>,
}

/// A batch of coupled draws with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoupledSamples {
    pub kind: SchemeKind,
    pub ns: Vec<usize>,
    pub seed: u64,
    pub samples: Vec<CoupledSample>,
}

impl CoupledSamples {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn index_of(&self, n: usize) -> Result<usize> {
        self.ns
            .iter()
            .position(|&m| m == n)
            .ok_or_else(|| Error::InvalidParameter(format!("index n={n} was not sampled")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApproximationScheme {
    pub params: SchemeParams,
    pub rate: Rate,
}

/// Validates `params` and attaches the documented rate.
pub fn make_scheme(kind: SchemeKind, params: SchemeParams) -> Result<ApproximationScheme> {
    if params.kind() != kind {
        return Err(Error::InvalidParameter(format!(
            "parameters {params:?} do not belong to scheme {}",
            kind.name()
        )));
    }
    match &params {
        SchemeParams::BinaryDigits => {}
        SchemeParams::PolyaUrn { horizon } => {
            if horizon.is_some_and(|h| h < 1) {
                return Err(Error::InvalidParameter(
                    "urn horizon must be positive".into(),
                ));
            }
        }
        SchemeParams::SeriesIndependent {
            x_law,
            z_law,
            explicit_terms,
        } => {
            x_law.validate("X")?;
            z_law.validate("Z")?;
            if z_law.mean() != 0.0 {
                return Err(Error::InvalidParameter("Z must be centered".into()));
            }
            if *explicit_terms < 16 {
                return Err(Error::InvalidParameter(
                    "series needs at least 16 explicit terms".into(),
                ));
            }
        }
        SchemeParams::StochasticIntegral {
            integrand,
            fine_steps,
        } => {
            if !fine_steps.is_power_of_two() || *fine_steps < DEFAULT_FINE_STEPS {
                return Err(Error::InvalidParameter(format!(
                    "fine grid must be a power of two ≥ {DEFAULT_FINE_STEPS}, got {fine_steps}"
                )));
            }
            if let Integrand::Constant { value } = integrand {
                if !value.is_finite() {
                    return Err(Error::InvalidParameter(
                        "non-finite constant integrand".into(),
                    ));
                }
            }
        }
        SchemeParams::WienerPerturbation { t } => {
            if !(*t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidParameter(
                    "observation time must be positive".into(),
                ));
            }
        }
    }
    let rate = match kind {
        SchemeKind::BinaryDigits => Rate::BINARY_BIAS,
        _ => Rate::LINEAR,
    };
    Ok(ApproximationScheme { params, rate })
}

impl ApproximationScheme {
    pub fn kind(&self) -> SchemeKind {
        self.params.kind()
    }

    pub fn with_rate(mut self, rate: Rate) -> Self {
        self.rate = rate;
        self
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.rate.alpha(n)
    }

    /// Checks that every index is admissible for this scheme.
    pub fn check_indices(&self, ns: &[usize]) -> Result<()> {
        if ns.is_empty() {
            return Err(Error::InvalidParameter(
                "no approximation index given".into(),
            ));
        }
        for &n in ns {
            let ok = n >= 1
                && match &self.params {
                    SchemeParams::BinaryDigits => n < BINARY_DIGITS as usize,
                    SchemeParams::PolyaUrn { horizon } => horizon.is_none_or(|h| n <= h),
                    SchemeParams::SeriesIndependent { explicit_terms, .. } => n <= *explicit_terms,
                    SchemeParams::StochasticIntegral { fine_steps, .. } => fine_steps % n == 0,
                    SchemeParams::WienerPerturbation { .. } => true,
                };
            if !ok {
                return Err(Error::InvalidParameter(format!(
                    "index n={n} is outside the range of the {} scheme",
                    self.kind().name()
                )));
            }
        }
        Ok(())
    }

    /// `count` coupled draws of `(Y, Y_{n₁}, …)`, block-seeded from `seed`.
    pub fn sample_pairs(&self, ns: &[usize], count: usize, seed: u64) -> Result<CoupledSamples> {
        self.check_indices(ns)?;
        let samples = mc::sample_blocks(count, seed, |rng| self.draw(rng, ns));
        if samples
            .iter()
            .any(|s| !s.y.is_finite() || s.yn.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("scheme sample"));
        }
        Ok(CoupledSamples {
            kind: self.kind(),
            ns: ns.to_vec(),
            seed,
            samples,
        })
    }

    /// A single `(Y, Yₙ)` draw determined by `(n, seed)`.
    pub fn pair_sampler(&self, n: usize, seed: u64) -> Result<(f64, f64)> {
        let s = self.sample_pairs(&[n], 1, seed)?;
        Ok((s.samples[0].y, s.samples[0].yn[0]))
    }

    fn draw(&self, rng: &mut ChaCha8Rng, ns: &[usize]) -> CoupledSample {
        match &self.params {
            SchemeParams::BinaryDigits => {
                let bits = rng.random::<u64>() >> (64 - BINARY_DIGITS);
                let y = bits as f64 / (1u64 << BINARY_DIGITS) as f64;
                let yn = ns
                    .iter()
                    .map(|&n| (bits >> (BINARY_DIGITS as usize - n)) as f64 / (1u64 << n) as f64)
                    .collect();
                CoupledSample { y, yn }
            }
            SchemeParams::PolyaUrn { horizon } => draw_polya(rng, ns, *horizon),
            SchemeParams::SeriesIndependent {
                x_law,
                z_law,
                explicit_terms,
            } => draw_series(rng, ns, x_law, z_law, *explicit_terms),
            SchemeParams::StochasticIntegral {
                integrand,
                fine_steps,
            } => draw_integral(rng, ns, integrand, *fine_steps),
            SchemeParams::WienerPerturbation { t } => {
                let y = t.sqrt() * rng.sample::<f64, _>(StandardNormal);
                let w = t.sqrt() * rng.sample::<f64, _>(StandardNormal);
                let yn = ns.iter().map(|&n| y + w / (n as f64).sqrt()).collect();
                CoupledSample { y, yn }
            }
        }
    }
}

/// `(n, output slot)` pairs sorted by `n`.
fn checkpoints(ns: &[usize]) -> Vec<(usize, usize)> {
    let mut c: Vec<(usize, usize)> = ns.iter().copied().zip(0..).collect();
    c.sort_unstable();
    c
}

/// Urn with one white and one black ball; `Xₙ = Wₙ/(n+2)` after `n` draws.
fn draw_polya(rng: &mut ChaCha8Rng, ns: &[usize], horizon: Option<usize>) -> CoupledSample {
    let marks = checkpoints(ns);
    let last = marks.last().map_or(0, |m| m.0);
    let end = horizon.unwrap_or(last).max(last);
    let mut yn = vec![0.0; ns.len()];
    let mut white: u64 = 1;
    let mut next = marks.iter().peekable();
    for k in 0..=end {
        while let Some(&&(n, slot)) = next.peek() {
            if n != k {
                break;
            }
            yn[slot] = white as f64 / (k + 2) as f64;
            next.next();
        }
        if k == end {
            break;
        }
        if rng.random_range(0..(k as u64 + 2)) < white {
            white += 1;
        }
    }
    let total = (end + 2) as u64;
    let y = match horizon {
        Some(_) => white as f64 / total as f64,
        None => Beta::new(white as f64, (total - white) as f64)
            .expect("urn counts are positive")
            .sample(rng),
    };
    CoupledSample { y, yn }
}

/// `Σ_{k>K} k⁻²` by Euler–Maclaurin.
pub fn tail_inverse_squares(k: usize) -> f64 {
    let k = k as f64;
    1.0 / k - 1.0 / (2.0 * k * k) + 1.0 / (6.0 * k.powi(3)) - 1.0 / (30.0 * k.powi(5))
}

/// `Σ_{k>K} k⁻⁴` by Euler–Maclaurin.
pub fn tail_inverse_fourth(k: usize) -> f64 {
    let k = k as f64;
    1.0 / (3.0 * k.powi(3)) - 1.0 / (2.0 * k.powi(4)) + 1.0 / (3.0 * k.powi(5))
}

fn draw_series(
    rng: &mut ChaCha8Rng,
    ns: &[usize],
    x_law: &Law,
    z_law: &Law,
    terms: usize,
) -> CoupledSample {
    let marks = checkpoints(ns);
    let mut yn = vec![0.0; ns.len()];
    let mut signs = SignSource::new();
    let mut next = marks.iter().peekable();
    let mut s = 0.0;
    for k in 1..=terms {
        let kf = k as f64;
        let x = x_law.draw(rng, &mut signs);
        let z = z_law.draw(rng, &mut signs);
        s += x / (kf * kf) + z / kf;
        while let Some(&&(n, slot)) = next.peek() {
            if n != k {
                break;
            }
            yn[slot] = s;
            next.next();
        }
    }
    let t2 = tail_inverse_squares(terms);
    let var = z_law.variance() * t2 + x_law.variance() * tail_inverse_fourth(terms);
    let tail = x_law.mean() * t2 + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
    CoupledSample { y: s + tail, yn }
}

fn draw_integral(
    rng: &mut ChaCha8Rng,
    ns: &[usize],
    integrand: &Integrand,
    fine: usize,
) -> CoupledSample {
    let dt = 1.0 / fine as f64;
    let sd = dt.sqrt();
    let strides: Vec<usize> = ns.iter().map(|&n| fine / n).collect();
    let mut held = vec![0.0; ns.len()];
    let mut yn = vec![0.0; ns.len()];
    let mut b = 0.0;
    let mut y = 0.0;
    for i in 0..fine {
        let t = i as f64 * dt;
        let h = integrand.at(t, b);
        for (j, &m) in strides.iter().enumerate() {
            if i % m == 0 {
                held[j] = h;
            }
        }
        let db = sd * rng.sample::<f64, _>(StandardNormal);
        y += h * db;
        for (acc, hj) in yn.iter_mut().zip(&held) {
            *acc += hj * db;
        }
        b += db;
    }
    CoupledSample { y, yn }
}

/// Closed-form `(E[bₙ], E[dₙ], E[vₙ])` where available.
pub fn exact_moments(scheme: &ApproximationScheme, n: usize) -> Option<(f64, f64, f64)> {
    match &scheme.params {
        SchemeParams::BinaryDigits => {
            let b = 0.5f64.powi(n as i32 + 1);
            let d = 0.25f64.powi(n as i32) / 3.0;
            Some((b, d, d - b * b))
        }
        SchemeParams::PolyaUrn { horizon: None } => {
            let v = 1.0 / (6.0 * (n + 2) as f64);
            Some((0.0, v, v))
        }
        SchemeParams::SeriesIndependent { x_law, z_law, .. } => {
            let t2 = tail_inverse_squares_exact(n);
            let t4 = tail_inverse_fourth_exact(n);
            let b = x_law.mean() * t2;
            let v = z_law.variance() * t2 + x_law.variance() * t4;
            Some((b, v + b * b, v))
        }
        SchemeParams::StochasticIntegral {
            integrand: Integrand::Brownian,
            fine_steps,
        } => {
            let d = 0.5 / n as f64 - 0.5 / *fine_steps as f64;
            Some((0.0, d, d))
        }
        SchemeParams::WienerPerturbation { t } => {
            let d = t / n as f64;
            Some((0.0, d, d))
        }
        _ => None,
    }
}

fn tail_inverse_squares_exact(n: usize) -> f64 {
    let cut = 4096.max(n);
    let head: f64 = (n + 1..=cut).rev().map(|k| 1.0 / (k as f64).powi(2)).sum();
    head + tail_inverse_squares(cut)
}

fn tail_inverse_fourth_exact(n: usize) -> f64 {
    let cut = 4096.max(n);
    let head: f64 = (n + 1..=cut).rev().map(|k| 1.0 / (k as f64).powi(4)).sum();
    head + tail_inverse_fourth(cut)
}

/// Moments of `e = Y − Yₙ` at one index.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MomentRow {
    pub n: usize,
    /// `mean(e)`.
    pub b: Estimate,
    /// `mean(e²)`.
    pub d: Estimate,
    /// `d̂ − b̂²`; the standard error is that of `mean((e − b̂)²)`.
    pub v: Estimate,
    /// `mean(e⁴)`.
    pub m4: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub kind: SchemeKind,
    pub seed: u64,
    pub count: usize,
    pub rows: Vec<MomentRow>,
}

impl MomentReport {
    pub fn row(&self, n: usize) -> Option<&MomentRow> {
        self.rows.iter().find(|r| r.n == n)
    }
}

pub fn moments_from_samples(samples: &CoupledSamples) -> Result<MomentReport> {
    if samples.len() < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    let rows = samples
        .ns
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let e: Vec<f64> = samples.samples.iter().map(|s| s.y - s.yn[j]).collect();
            let b = Estimate::from_samples(&e);
            let d = Estimate::of(&e, |x| x * x);
            let centered = Estimate::of(&e, |x| (x - b.mean) * (x - b.mean));
            let v = Estimate {
                mean: d.mean - b.mean * b.mean,
                ..centered
            };
            let m4 = Estimate::of(&e, |x| x.powi(4));
            MomentRow { n, b, d, v, m4 }
        })
        .collect::<Vec<_>>();
    if rows
        .iter()
        .any(|r| [r.b, r.d, r.v, r.m4].iter().any(|e| !e.mean.is_finite()))
    {
        return Err(Error::NonFinite("moment estimate"));
    }
    Ok(MomentReport {
        kind: samples.kind,
        seed: samples.seed,
        count: samples.len(),
        rows,
    })
}

pub fn estimate_moments(
    s: &ApproximationScheme,
    ns: &[usize],
    count: usize,
    seed: u64,
) -> Result<MomentReport> {
    moments_from_samples(&s.sample_pairs(ns, count, seed)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    BiasDominates,
    Comparable,
    VarianceDominates,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::BiasDominates => "bias_dominates",
            Regime::Comparable => "comparable",
            Regime::VarianceDominates => "variance_dominates",
        }
    }
}

/// Weighted least-squares slope with its 95% half-width.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Slope {
    pub slope: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegimeClassification {
    pub case: Regime,
    /// Fits of `log|b̂ₙ|` and `log v̂ₙ` against `n` (geometric rates) or `log n`.
    pub slope_b: Slope,
    pub slope_v: Slope,
    /// Slope of `log(v̂ₙ/|b̂ₙ|)` between the two largest indices.
    pub ratio_slope: Slope,
    pub bias_significant: bool,
}

const Z95: f64 = 1.96;

/// Fits `log y = a + s·x` with weights from the relative standard errors.
pub fn weighted_log_slope(xs: &[f64], ys: &[f64], rel_se: &[f64]) -> Result<Slope> {
    let w: Vec<f64> = rel_se.iter().map(|r| 1.0 / r.max(1e-12).powi(2)).collect();
    let sw: f64 = w.iter().sum();
    let mx = xs.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let my = ly.iter().zip(&w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = xs.iter().zip(&w).map(|(x, w)| w * (x - mx).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ly)
        .zip(&w)
        .map(|((x, y), w)| w * (x - mx) * (y - my))
        .sum();
    let slope = sxy / sxx;
    let half_width = Z95 / sxx.sqrt();
    if !slope.is_finite() || !half_width.is_finite() {
        return Err(Error::DegenerateFit(format!(
            "log-slope fit over {} points is not finite",
            xs.len()
        )));
    }
    Ok(Slope { slope, half_width })
}

/// Decides which of `bₙ`, `vₙ` dominates as `n` grows.
///
/// When `b̂ₙ` is within 3 standard errors of zero at the two largest indices
/// the bias is treated as negligible. Otherwise the log-ratio `log(vₙ/|bₙ|)`
/// between the two largest indices decides: significantly decreasing means
/// the bias dominates, significantly increasing that the variance does.
pub fn classify_regime(r: &MomentReport) -> Result<RegimeClassification> {
    if r.rows.len() < 4 {
        return Err(Error::InvalidParameter(
            "regime classification needs at least four indices".into(),
        ));
    }
    let mut rows = r.rows.clone();
    rows.sort_by_key(|row| row.n);
    let geometric = r.kind == SchemeKind::BinaryDigits;
    let x = |n: usize| if geometric { n as f64 } else { (n as f64).ln() };
    let noise = |e: &Estimate| e.mean.abs().max(e.stderr).max(f64::MIN_POSITIVE);
    if rows
        .iter()
        .all(|row| row.v.mean.abs() <= 3.0 * row.v.stderr)
        && rows
            .iter()
            .all(|row| row.b.mean.abs() <= 3.0 * row.b.stderr)
    {
        return Err(Error::DegenerateFit(
            "all moments are below the Monte-Carlo noise floor".into(),
        ));
    }
    let xs: Vec<f64> = rows.iter().map(|row| x(row.n)).collect();
    let fit = |pick: fn(&MomentRow) -> Estimate| {
        let ys: Vec<f64> = rows.iter().map(|row| noise(&pick(row))).collect();
        let rel: Vec<f64> = rows
            .iter()
            .zip(&ys)
            .map(|(row, y)| pick(row).stderr / y)
            .collect();
        weighted_log_slope(&xs, &ys, &rel)
    };
    let slope_b = fit(|row| row.b)?;
    let slope_v = fit(|row| row.v)?;

    let tail = &rows[rows.len() - 2..];
    let bias_significant = tail.iter().any(|row| row.b.mean.abs() > 3.0 * row.b.stderr);
    let log_ratio = |row: &MomentRow| {
        let (b, v) = (noise(&row.b), noise(&row.v));
        let se = ((row.v.stderr / v).powi(2) + (row.b.stderr / b).powi(2)).sqrt();
        ((v / b).ln(), se)
    };
    let (r1, s1) = log_ratio(&tail[0]);
    let (r2, s2) = log_ratio(&tail[1]);
    let dx = x(tail[1].n) - x(tail[0].n);
    let ratio_slope = Slope {
        slope: (r2 - r1) / dx,
        half_width: Z95 * (s1 * s1 + s2 * s2).sqrt() / dx,
    };
    let v_significant = tail.iter().all(|row| row.v.mean > 3.0 * row.v.stderr);
    let case = if !bias_significant && v_significant {
        Regime::VarianceDominates
    } else if ratio_slope.slope + ratio_slope.half_width < 0.0 {
        Regime::BiasDominates
    } else if ratio_slope.slope - ratio_slope.half_width > 0.0 {
        Regime::VarianceDominates
    } else {
        Regime::Comparable
    };
    Ok(RegimeClassification {
        case,
        slope_b,
        slope_v,
        ratio_slope,
        bias_significant,
    })
}

/// Empirical `Bₙ`, `Dₙ` of `f(Y) − f(Yₙ)` against the expansions in `bₙ`, `vₙ`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PropagationRow {
    pub n: usize,
    pub big_b: Estimate,
    pub big_d: Estimate,
    /// `b̂ₙ·mean f′(Yₙ) + ½ v̂ₙ·mean f″(Yₙ)`.
    pub predicted_b: f64,
    /// `mean[e f′(Yₙ) + ½ e² f″(Yₙ)]`, the expansion applied per sample.
    pub coupled_b: Estimate,
    /// `v̂ₙ·mean f′(Yₙ)²`.
    pub predicted_d: f64,
    /// `mean[e² f′(Yₙ)²]`.
    pub coupled_d: Estimate,
}

impl PropagationRow {
    pub fn bias_ratio(&self) -> f64 {
        self.big_b.mean / self.coupled_b.mean
    }

    pub fn variance_ratio(&self) -> f64 {
        self.big_d.mean / self.coupled_d.mean
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PropagationReport {
    pub kind: SchemeKind,
    pub seed: u64,
    pub count: usize,
    pub rows: Vec<PropagationRow>,
}

pub fn propagate_through(
    s: &ApproximationScheme,
    f: &TestFunction,
    ns: &[usize],
    count: usize,
    seed: u64,
) -> Result<PropagationReport> {
    if f.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: f.dim(),
            context: "propagated function",
        });
    }
    let samples = s.sample_pairs(ns, count, seed)?;
    let moments = moments_from_samples(&samples)?;
    let rows = moments
        .rows
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let pts = &samples.samples;
            let diff: Vec<f64> = pts.iter().map(|p| f.f(p.y) - f.f(p.yn[j])).collect();
            let d1: Vec<f64> = pts.iter().map(|p| f.d1(p.yn[j])).collect();
            let d2: Vec<f64> = pts.iter().map(|p| f.d2(p.yn[j])).collect();
            let e: Vec<f64> = pts.iter().map(|p| p.y - p.yn[j]).collect();
            let coupled_b: Vec<f64> = (0..pts.len())
                .map(|i| e[i] * d1[i] + 0.5 * e[i] * e[i] * d2[i])
                .collect();
            let coupled_d: Vec<f64> = (0..pts.len()).map(|i| (e[i] * d1[i]).powi(2)).collect();
            let mean_d1 = mc::mean(&d1);
            let mean_d2 = mc::mean(&d2);
            let mean_d1_sq = Estimate::of(&d1, |x| x * x).mean;
            PropagationRow {
                n: m.n,
                big_b: Estimate::from_samples(&diff),
                big_d: Estimate::of(&diff, |x| x * x),
                predicted_b: m.b.mean * mean_d1 + 0.5 * m.v.mean * mean_d2,
                coupled_b: Estimate::from_samples(&coupled_b),
                predicted_d: m.v.mean * mean_d1_sq,
                coupled_d: Estimate::from_samples(&coupled_d),
            }
        })
        .collect();
    Ok(PropagationReport {
        kind: s.kind(),
        seed,
        count: samples.len(),
        rows,
    })
}

/// Conditional variance of `X∞ − Xₙ` given the urn state at step `n`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct UrnCell {
    pub white: u64,
    pub x_n: f64,
    pub conditional_variance: Estimate,
    /// `Xₙ(1 − Xₙ)/(n + 3)`.
    pub exact: f64,
}

/// Groups Pólya draws by the exact urn state after `n` draws.
pub fn polya_conditional_variance(
    s: &ApproximationScheme,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<UrnCell>> {
    if s.kind() != SchemeKind::PolyaUrn {
        return Err(Error::Unsupported(
            "conditional moments are provided for the Pólya urn only".into(),
        ));
    }
    let samples = s.sample_pairs(&[n], count, seed)?;
    let total = (n + 2) as f64;
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); n + 2];
    for p in &samples.samples {
        let w = (p.yn[0] * total).round() as usize;
        groups[w].push((p.y - p.yn[0]).powi(2));
    }
    Ok(groups
        .iter()
        .enumerate()
        .filter(|(_, g)| g.len() >= 2)
        .map(|(w, g)| {
            let x = w as f64 / total;
            UrnCell {
                white: w as u64,
                x_n: x,
                conditional_variance: Estimate::from_samples(g),
                exact: x * (1.0 - x) / (n + 3) as f64,
            }
        })
        .collect())
}
