//! Weak estimates of the four asymptotic bias operators.
//!
//! For an approximation `Yₙ → Y` with rate `αₙ`, and bounded test functions
//! `φ, χ`, write `Δφ = φ(Yₙ) − φ(Y)`. The estimated pairings are
//!
//! ```text
//! theoretical  ⟨Ā[φ], χ⟩ ≈  αₙ E[Δφ · χ(Y)]
//! practical    ⟨A̲[φ], χ⟩ ≈ −αₙ E[Δφ · χ(Yₙ)]
//! symmetric    ⟨Ã[φ], χ⟩ ≈ −½αₙ E[Δφ · Δχ]
//! singular     ⟨Ȧ[φ], χ⟩ ≈  ½(theoretical − practical) = αₙ E[Δφ · (χ(Y) + χ(Yₙ))/2]
//! ```
//!
//! All four are computed from one set of coupled samples, so
//! `symmetric = ½(theoretical + practical)` holds to rounding.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::approximation::{
    weighted_log_slope, ApproximationScheme, CoupledSamples, SchemeKind, Slope,
};
use crate::error::{ensure_dim, Error, Result};
use crate::error_algebra::SmoothMap;
use crate::functions::TestFunction;
use crate::mc::{self, Estimate};

pub const DEFAULT_BASIS_SIZE: usize = 8;
const PILOT_SAMPLES: usize = 20_000;

/// A finite family of bounded one-dimensional test functions.
#[derive(Debug, Clone)]
pub struct TestFunctionBasis {
    functions: Vec<TestFunction>,
}

impl TestFunctionBasis {
    pub fn new(functions: Vec<TestFunction>) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::InvalidParameter("empty test-function basis".into()));
        }
        for f in &functions {
            ensure_dim(1, f.dim(), "basis function")?;
        }
        Ok(Self { functions })
    }

    /// `count` bumps with half-width `(hi − lo)/(count + 1)` centred at
    /// `lo + (i + 1)·width`, so neighbours overlap and the outer ones vanish
    /// at `lo` and `hi`.
    pub fn bumps(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo < hi) || count == 0 {
            return Err(Error::InvalidParameter(format!(
                "bump basis needs lo < hi and count > 0, got [{lo}, {hi}] × {count}"
            )));
        }
        let width = (hi - lo) / (count + 1) as f64;
        Self::new(
            (0..count)
                .map(|i| TestFunction::bump(lo + (i + 1) as f64 * width, width))
                .collect(),
        )
    }

    /// Bumps over the 0.5%–99.5% quantile range of `ys`.
    pub fn covering(ys: &[f64], count: usize) -> Result<Self> {
        let mut sorted: Vec<f64> = ys.iter().copied().filter(|y| y.is_finite()).collect();
        if sorted.len() < 2 {
            return Err(Error::InvalidParameter(
                "too few points to place a basis".into(),
            ));
        }
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
        Self::bumps(q(0.005), q(0.995), count)
    }

    /// Default basis for a scheme: bumps on `[0, 1]` for binary digits,
    /// otherwise over the quantile range of a pilot sample of `Y`.
    pub fn default_for(s: &ApproximationScheme, seed: u64) -> Result<Self> {
        if s.kind() == SchemeKind::BinaryDigits {
            return Self::bumps(0.0, 1.0, DEFAULT_BASIS_SIZE);
        }
        let pilot = s.sample_pairs(&[1], PILOT_SAMPLES, mc::derive_seed(seed, 0xba515))?;
        let ys: Vec<f64> = pilot.samples.iter().map(|p| p.y).collect();
        Self::covering(&ys, DEFAULT_BASIS_SIZE)
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<&TestFunction> {
        self.functions.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            dim: self.functions.len(),
        })
    }

    pub fn functions(&self) -> &[TestFunction] {
        &self.functions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Theoretical,
    Practical,
    Symmetric,
    Singular,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 4] = [
        OperatorKind::Theoretical,
        OperatorKind::Practical,
        OperatorKind::Symmetric,
        OperatorKind::Singular,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Theoretical => "theoretical",
            Self::Practical => "practical",
            Self::Symmetric => "symmetric",
            Self::Singular => "singular",
        }
    }

    /// Per-sample integrand in terms of `a = φ(Yₙ)`, `b = φ(Y)`, `c = χ(Yₙ)`, `d = χ(Y)`.
    fn integrand(self, a: f64, b: f64, c: f64, d: f64) -> f64 {
        match self {
            Self::Theoretical => (a - b) * d,
            Self::Practical => (b - a) * c,
            Self::Symmetric => -0.5 * (a - b) * (c - d),
            Self::Singular => 0.5 * (a - b) * (c + d),
        }
    }
}

/// Where an estimate came from; estimates are only combined when these match.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub scheme: SchemeKind,
    pub ns: Vec<usize>,
    pub count: usize,
    pub seed: u64,
    pub basis_size: usize,
}

/// `G[i][j] ≈ ⟨Op[φᵢ], χⱼ⟩` with entrywise standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct WeakOperatorEstimate {
    pub kind: OperatorKind,
    pub n: usize,
    pub alpha: f64,
    #[serde(serialize_with = "serialize_matrix")]
    pub matrix: DMatrix<f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub stderr: DMatrix<f64>,
    pub provenance: Provenance,
}

pub(crate) fn serialize_matrix<S: serde::Serializer>(
    m: &DMatrix<f64>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for i in 0..m.nrows() {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

/// Basis values at `Y` and `Yₙ` for one index of a coupled sample set.
struct Evaluated {
    alpha: f64,
    at_y: Vec<Vec<f64>>,
    at_yn: Vec<Vec<f64>>,
}

impl Evaluated {
    fn new(
        s: &ApproximationScheme,
        basis: &TestFunctionBasis,
        samples: &CoupledSamples,
        n: usize,
    ) -> Result<Self> {
        let j = samples.index_of(n)?;
        let eval = |pick: &dyn Fn(usize) -> f64| -> Result<Vec<Vec<f64>>> {
            basis
                .functions
                .iter()
                .map(|f| {
                    let v: Vec<f64> = (0..samples.len()).map(|i| f.f(pick(i))).collect();
                    if v.iter().all(|x| x.is_finite()) {
                        Ok(v)
                    } else {
                        Err(Error::NonFinite("basis evaluation"))
                    }
                })
                .collect()
        };
        Ok(Self {
            alpha: s.alpha(n),
            at_y: eval(&|i| samples.samples[i].y)?,
            at_yn: eval(&|i| samples.samples[i].yn[j])?,
        })
    }

    fn count(&self) -> usize {
        self.at_y.first().map_or(0, Vec::len)
    }

    /// `α·integrand(a, b, c, d)` for the pair `(i, j)`, per sample.
    fn scaled_integrand(&self, kind: OperatorKind, i: usize, j: usize) -> Vec<f64> {
        (0..self.count())
            .map(|k| {
                self.alpha
                    * kind.integrand(
                        self.at_yn[i][k],
                        self.at_y[i][k],
                        self.at_yn[j][k],
                        self.at_y[j][k],
                    )
            })
            .collect()
    }
}

fn check_sample_count(count: usize) -> Result<()> {
    if count < 2 {
        Err(Error::InvalidParameter("need at least two samples".into()))
    } else {
        Ok(())
    }
}

/// The four weak operators from one shared sample set.
#[derive(Debug, Clone, Serialize)]
pub struct OperatorSet {
    pub theoretical: WeakOperatorEstimate,
    pub practical: WeakOperatorEstimate,
    pub symmetric: WeakOperatorEstimate,
    pub singular: WeakOperatorEstimate,
}

impl OperatorSet {
    pub fn get(&self, kind: OperatorKind) -> &WeakOperatorEstimate {
        match kind {
            OperatorKind::Theoretical => &self.theoretical,
            OperatorKind::Practical => &self.practical,
            OperatorKind::Symmetric => &self.symmetric,
            OperatorKind::Singular => &self.singular,
        }
    }
}

fn matrices(ev: &Evaluated, size: usize, kind: OperatorKind) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut g = DMatrix::zeros(size, size);
    let mut se = DMatrix::zeros(size, size);
    for i in 0..size {
        for j in 0..size {
            let e = Estimate::from_samples(&ev.scaled_integrand(kind, i, j));
            g[(i, j)] = e.mean;
            se[(i, j)] = e.stderr;
        }
    }
    (g, se)
}

pub fn estimate_operators(
    s: &ApproximationScheme,
    basis: &TestFunctionBasis,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<OperatorSet> {
    check_sample_count(count)?;
    let samples = s.sample_pairs(&[n], count, seed)?;
    let ev = Evaluated::new(s, basis, &samples, n)?;
    let provenance = Provenance {
        scheme: s.kind(),
        ns: vec![n],
        count,
        seed,
        basis_size: basis.len(),
    };
    let k = basis.len();
    let build = |kind, (matrix, stderr): (DMatrix<f64>, DMatrix<f64>)| WeakOperatorEstimate {
        kind,
        n,
        alpha: ev.alpha,
        matrix,
        stderr,
        provenance: provenance.clone(),
    };
    let theoretical = build(
        OperatorKind::Theoretical,
        matrices(&ev, k, OperatorKind::Theoretical),
    );
    let practical = build(
        OperatorKind::Practical,
        matrices(&ev, k, OperatorKind::Practical),
    );
    let symmetric = build(
        OperatorKind::Symmetric,
        matrices(&ev, k, OperatorKind::Symmetric),
    );
    let (_, singular_se) = matrices(&ev, k, OperatorKind::Singular);
    let singular = build(
        OperatorKind::Singular,
        ((&theoretical.matrix - &practical.matrix) * 0.5, singular_se),
    );
    Ok(OperatorSet {
        theoretical,
        practical,
        symmetric,
        singular,
    })
}

pub fn estimate_weak(
    s: &ApproximationScheme,
    basis: &TestFunctionBasis,
    kind: OperatorKind,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<WeakOperatorEstimate> {
    Ok(estimate_operators(s, basis, n, count, seed)?
        .get(kind)
        .clone())
}

fn same_provenance(estimates: &[&WeakOperatorEstimate]) -> Result<()> {
    let first = &estimates[0].provenance;
    if estimates
        .iter()
        .all(|e| &e.provenance == first && e.n == estimates[0].n)
    {
        Ok(())
    } else {
        Err(Error::Provenance(
            "estimates were not built from the same scheme, index, sample count and seed".into(),
        ))
    }
}

/// `max |symmetric − ½(theoretical + practical)|`.
pub fn half_sum_residual(
    theo: &WeakOperatorEstimate,
    prac: &WeakOperatorEstimate,
    symm: &WeakOperatorEstimate,
) -> Result<f64> {
    same_provenance(&[theo, prac, symm])?;
    if theo.kind != OperatorKind::Theoretical
        || prac.kind != OperatorKind::Practical
        || symm.kind != OperatorKind::Symmetric
    {
        return Err(Error::InvalidParameter(
            "half-sum residual expects theoretical, practical and symmetric estimates".into(),
        ));
    }
    let half = (&theo.matrix + &prac.matrix) * 0.5;
    Ok(crate::linalg::max_abs_diff(&symm.matrix, &half))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SymmetryDefect {
    /// `max |G − Gᵀ|`.
    pub defect: f64,
    /// `defect / max |G|`.
    pub relative: f64,
    /// `3·max √(se²ᵢⱼ + se²ⱼᵢ)`.
    pub tolerance: f64,
}

impl SymmetryDefect {
    pub fn passed(&self) -> bool {
        self.defect <= self.tolerance
    }
}

/// Asymmetry of a symmetric-operator estimate. A Gram matrix, when supplied,
/// only has its dimensions checked.
pub fn symmetry_defect(
    symm: &WeakOperatorEstimate,
    gram: Option<&DMatrix<f64>>,
) -> Result<SymmetryDefect> {
    if symm.kind != OperatorKind::Symmetric {
        return Err(Error::InvalidParameter(
            "symmetry defect is defined for the symmetric operator".into(),
        ));
    }
    let k = symm.matrix.nrows();
    if let Some(g) = gram {
        ensure_dim(k, g.nrows(), "gram rows")?;
        ensure_dim(k, g.ncols(), "gram columns")?;
    }
    let mut defect = 0.0f64;
    let mut tol = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            defect = defect.max((symm.matrix[(i, j)] - symm.matrix[(j, i)]).abs());
            tol = tol.max(symm.stderr[(i, j)].hypot(symm.stderr[(j, i)]));
        }
    }
    let scale = crate::linalg::max_abs_entry(&symm.matrix);
    Ok(SymmetryDefect {
        defect,
        relative: if scale > 0.0 { defect / scale } else { 0.0 },
        tolerance: 3.0 * tol,
    })
}

/// `Ĝam[i][j] ≈ E_Y[Γ[φᵢ] χⱼ]` with its standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct GammaWeak {
    #[serde(serialize_with = "serialize_matrix")]
    pub matrix: DMatrix<f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub stderr: DMatrix<f64>,
    /// `⟨Ã[φᵢ²], χⱼ⟩ − 2⟨Ã[φᵢ], φᵢχⱼ⟩` from symmetric-operator pairings on the
    /// same samples.
    #[serde(serialize_with = "serialize_matrix")]
    pub assembled: DMatrix<f64>,
    pub provenance: Provenance,
}

impl GammaWeak {
    pub fn max_assembly_gap(&self) -> f64 {
        crate::linalg::max_abs_diff(&self.matrix, &self.assembled)
    }
}

pub fn gamma_weak(
    s: &ApproximationScheme,
    basis: &TestFunctionBasis,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<GammaWeak> {
    check_sample_count(count)?;
    let samples = s.sample_pairs(&[n], count, seed)?;
    let ev = Evaluated::new(s, basis, &samples, n)?;
    let k = basis.len();
    let mut matrix = DMatrix::zeros(k, k);
    let mut stderr = DMatrix::zeros(k, k);
    let mut assembled = DMatrix::zeros(k, k);
    let symm = |u_n: f64, u: f64, w_n: f64, w: f64| -0.5 * (u_n - u) * (w_n - w);
    for i in 0..k {
        for j in 0..k {
            let (phi_n, phi) = (&ev.at_yn[i], &ev.at_y[i]);
            let (chi_n, chi) = (&ev.at_yn[j], &ev.at_y[j]);
            let direct: Vec<f64> = (0..ev.count())
                .map(|m| ev.alpha * (phi_n[m] - phi[m]).powi(2) * 0.5 * (chi_n[m] + chi[m]))
                .collect();
            let e = Estimate::from_samples(&direct);
            matrix[(i, j)] = e.mean;
            stderr[(i, j)] = e.stderr;
            let sq: Vec<f64> = (0..ev.count())
                .map(|m| ev.alpha * symm(phi_n[m] * phi_n[m], phi[m] * phi[m], chi_n[m], chi[m]))
                .collect();
            let cross: Vec<f64> = (0..ev.count())
                .map(|m| ev.alpha * symm(phi_n[m], phi[m], phi_n[m] * chi_n[m], phi[m] * chi[m]))
                .collect();
            assembled[(i, j)] = mc::mean(&sq) - 2.0 * mc::mean(&cross);
        }
    }
    Ok(GammaWeak {
        matrix,
        stderr,
        assembled,
        provenance: Provenance {
            scheme: s.kind(),
            ns: vec![n],
            count,
            seed,
            basis_size: k,
        },
    })
}

/// `αₙ·mean(Δφ⁴)` per basis function and summed over the basis.
#[derive(Debug, Clone, Serialize)]
pub struct LocalityRow {
    pub n: usize,
    pub per_function: Vec<Estimate>,
    pub aggregate: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalityReport {
    pub rows: Vec<LocalityRow>,
    /// Fit of `log aggregate` against `log n` (or `n` for geometric rates).
    pub slope: Slope,
    pub strictly_decreasing: bool,
}

impl LocalityReport {
    pub fn passed(&self) -> bool {
        self.strictly_decreasing && self.slope.slope + self.slope.half_width < 0.0
    }
}

pub fn locality_statistic(
    s: &ApproximationScheme,
    basis: &TestFunctionBasis,
    ns: &[usize],
    count: usize,
    seed: u64,
) -> Result<LocalityReport> {
    if ns.len() < 3 {
        return Err(Error::InvalidParameter(
            "locality statistic needs at least three indices".into(),
        ));
    }
    check_sample_count(count)?;
    let mut sorted = ns.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let samples = s.sample_pairs(&sorted, count, seed)?;
    let mut rows = Vec::with_capacity(sorted.len());
    for &n in &sorted {
        let ev = Evaluated::new(s, basis, &samples, n)?;
        let quartic = |i: usize| -> Vec<f64> {
            (0..ev.count())
                .map(|m| ev.alpha * (ev.at_yn[i][m] - ev.at_y[i][m]).powi(4))
                .collect()
        };
        let per_function = (0..basis.len())
            .map(|i| Estimate::from_samples(&quartic(i)))
            .collect();
        let total: Vec<f64> = (0..ev.count())
            .map(|m| {
                (0..basis.len())
                    .map(|i| ev.alpha * (ev.at_yn[i][m] - ev.at_y[i][m]).powi(4))
                    .sum()
            })
            .collect();
        rows.push(LocalityRow {
            n,
            per_function,
            aggregate: Estimate::from_samples(&total),
        });
    }
    if rows.iter().any(|r| !(r.aggregate.mean > 0.0)) {
        return Err(Error::DegenerateFit(
            "locality statistic vanishes at some index".into(),
        ));
    }
    let geometric = s.rate.is_geometric();
    let xs: Vec<f64> = rows
        .iter()
        .map(|r| {
            if geometric {
                r.n as f64
            } else {
                (r.n as f64).ln()
            }
        })
        .collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.aggregate.mean).collect();
    let rel: Vec<f64> = rows
        .iter()
        .map(|r| r.aggregate.stderr / r.aggregate.mean)
        .collect();
    let slope = weighted_log_slope(&xs, &ys, &rel)?;
    let strictly_decreasing = ys.windows(2).all(|w| w[1] < w[0]);
    Ok(LocalityReport {
        rows,
        slope,
        strictly_decreasing,
    })
}

/// Evaluations of three named basis members plus their pairwise products.
struct Triple {
    alpha: f64,
    phi: (Vec<f64>, Vec<f64>),
    chi: (Vec<f64>, Vec<f64>),
    psi: (Vec<f64>, Vec<f64>),
}

fn triple(
    s: &ApproximationScheme,
    basis: &TestFunctionBasis,
    samples: &CoupledSamples,
    n: usize,
    idx: (usize, usize, usize),
) -> Result<Triple> {
    let j = samples.index_of(n)?;
    let eval = |f: &TestFunction| -> (Vec<f64>, Vec<f64>) {
        (
            samples.samples.iter().map(|p| f.f(p.yn[j])).collect(),
            samples.samples.iter().map(|p| f.f(p.y)).collect(),
        )
    };
    Ok(Triple {
        alpha: s.alpha(n),
        phi: eval(basis.get(idx.0)?),
        chi: eval(basis.get(idx.1)?),
        psi: eval(basis.get(idx.2)?),
    })
}

/// `⟨Ȧ[φχ],ψ⟩ − ⟨Ȧ[φ]χ,ψ⟩ − ⟨φȦ[χ],ψ⟩` with its standard error.
pub fn first_order_residual(
    s: &ApproximationScheme,
    basis: &TestFunctionBasis,
    n: usize,
    count: usize,
    seed: u64,
    phi: usize,
    chi: usize,
    psi: usize,
) -> Result<Estimate> {
    check_sample_count(count)?;
    let samples = s.sample_pairs(&[n], count, seed)?;
    let t = triple(s, basis, &samples, n, (phi, chi, psi))?;
    Ok(Estimate::from_samples(&first_order_integrand(&t)))
}

fn first_order_integrand(t: &Triple) -> Vec<f64> {
    // singular pairing ⟨Ȧ[u], w⟩ per sample
    let pair = |un: f64, u: f64, wn: f64, w: f64| 0.5 * (un - u) * (wn + w);
    (0..t.phi.0.len())
        .map(|m| {
            let (a, b) = (t.phi.0[m], t.phi.1[m]);
            let (c, d) = (t.chi.0[m], t.chi.1[m]);
            let (p, q) = (t.psi.0[m], t.psi.1[m]);
            t.alpha
                * (pair(a * c, b * d, p, q) - pair(a, b, c * p, d * q) - pair(c, d, a * p, b * q))
        })
        .collect()
}

/// Theoretical and practical variances `αₙE[ΔφΔχ ψ(Y)]`, `αₙE[ΔφΔχ ψ(Yₙ)]`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct VarianceComparison {
    pub theoretical_var: Estimate,
    pub practical_var: Estimate,
    /// Standard error of their difference on the paired samples.
    pub diff_stderr: f64,
}

impl VarianceComparison {
    pub fn passed(&self) -> bool {
        (self.theoretical_var.mean - self.practical_var.mean).abs() <= 3.0 * self.diff_stderr
    }
}

pub fn variance_comparison(
    s: &ApproximationScheme,
    basis: &TestFunctionBasis,
    n: usize,
    count: usize,
    seed: u64,
    phi: usize,
    chi: usize,
    psi: usize,
) -> Result<VarianceComparison> {
    check_sample_count(count)?;
    let samples = s.sample_pairs(&[n], count, seed)?;
    let t = triple(s, basis, &samples, n, (phi, chi, psi))?;
    let prod = |m: usize| t.alpha * (t.phi.0[m] - t.phi.1[m]) * (t.chi.0[m] - t.chi.1[m]);
    let len = t.phi.0.len();
    let theo: Vec<f64> = (0..len).map(|m| prod(m) * t.psi.1[m]).collect();
    let prac: Vec<f64> = (0..len).map(|m| prod(m) * t.psi.0[m]).collect();
    let diff: Vec<f64> = theo.iter().zip(&prac).map(|(a, b)| a - b).collect();
    Ok(VarianceComparison {
        theoretical_var: Estimate::from_samples(&theo),
        practical_var: Estimate::from_samples(&prac),
        diff_stderr: Estimate::from_samples(&diff).stderr,
    })
}

/// `αₙ·mean[(F(f(Yₙ)) − F(f(Y)))²]` against `Σ F′ᵢF′ⱼ Γ[fᵢ,fⱼ]` at one index.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CalculusRow {
    pub n: usize,
    pub direct: Estimate,
    pub assembled: Estimate,
    pub ratio: f64,
    /// Delta-method standard error of `ratio`.
    pub ratio_stderr: f64,
}

pub fn asymptotic_calculus_check(
    s: &ApproximationScheme,
    basis: &TestFunctionBasis,
    indices: &[usize],
    big_f: &SmoothMap,
    ns: &[usize],
    count: usize,
    seed: u64,
) -> Result<Vec<CalculusRow>> {
    ensure_dim(indices.len(), big_f.d_in(), "outer map input")?;
    ensure_dim(1, big_f.d_out(), "outer map output")?;
    check_sample_count(count)?;
    let funcs: Vec<&TestFunction> = indices
        .iter()
        .map(|&i| basis.get(i))
        .collect::<Result<_>>()?;
    let samples = s.sample_pairs(ns, count, seed)?;
    let mut rows = Vec::with_capacity(ns.len());
    for (j, &n) in ns.iter().enumerate() {
        let alpha = s.alpha(n);
        let mut lhs = Vec::with_capacity(count);
        let mut rhs = Vec::with_capacity(count);
        for p in &samples.samples {
            let fy: Vec<f64> = funcs.iter().map(|f| f.f(p.y)).collect();
            let fyn: Vec<f64> = funcs.iter().map(|f| f.f(p.yn[j])).collect();
            let dy = big_f.derivatives(&fy)?;
            let dyn_ = big_f.derivatives(&fyn)?;
            let delta: Vec<f64> = fyn.iter().zip(&fy).map(|(a, b)| a - b).collect();
            let grad = |d: &crate::error_algebra::Derivatives| -> f64 {
                d.jacobian
                    .row(0)
                    .iter()
                    .zip(&delta)
                    .map(|(g, x)| g * x)
                    .sum()
            };
            lhs.push(alpha * (dyn_.value[0] - dy.value[0]).powi(2));
            rhs.push(alpha * 0.5 * (grad(&dyn_).powi(2) + grad(&dy).powi(2)));
        }
        let direct = Estimate::from_samples(&lhs);
        let assembled = Estimate::from_samples(&rhs);
        let ratio = direct.mean / assembled.mean;
        let resid: Vec<f64> = lhs.iter().zip(&rhs).map(|(l, r)| l - ratio * r).collect();
        let ratio_stderr = Estimate::from_samples(&resid).stderr / assembled.mean.abs();
        rows.push(CalculusRow {
            n,
            direct,
            assembled,
            ratio,
            ratio_stderr,
        });
    }
    Ok(rows)
}

/// Two-point extrapolation `L ≈ (αₘᵖ Lₘ − αₙᵖ Lₙ)/(αₘᵖ − αₙᵖ)` removing a
/// leading `αₙ⁻ᵖ` term; returns the combination weights `(wₙ, wₘ)`.
pub fn richardson_weights(alpha_n: f64, alpha_m: f64, order: i32) -> Result<(f64, f64)> {
    let (an, am) = (alpha_n.powi(order), alpha_m.powi(order));
    if !(am != an) || order < 1 {
        return Err(Error::InvalidParameter(
            "extrapolation needs two distinct rates and a positive order".into(),
        ));
    }
    Ok((-an / (am - an), am / (am - an)))
}

/// Weak operator extrapolated from indices `n < m` sampled on shared paths.
pub fn extrapolate_weak(
    s: &ApproximationScheme,
    basis: &TestFunctionBasis,
    kind: OperatorKind,
    (n, m): (usize, usize),
    order: i32,
    count: usize,
    seed: u64,
) -> Result<WeakOperatorEstimate> {
    check_sample_count(count)?;
    let samples = s.sample_pairs(&[n, m], count, seed)?;
    let en = Evaluated::new(s, basis, &samples, n)?;
    let em = Evaluated::new(s, basis, &samples, m)?;
    let (wn, wm) = richardson_weights(en.alpha, em.alpha, order)?;
    let k = basis.len();
    let mut matrix = DMatrix::zeros(k, k);
    let mut stderr = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let a = en.scaled_integrand(kind, i, j);
            let b = em.scaled_integrand(kind, i, j);
            let c: Vec<f64> = a.iter().zip(&b).map(|(x, y)| wn * x + wm * y).collect();
            let e = Estimate::from_samples(&c);
            matrix[(i, j)] = e.mean;
            stderr[(i, j)] = e.stderr;
        }
    }
    Ok(WeakOperatorEstimate {
        kind,
        n: m,
        alpha: em.alpha,
        matrix,
        stderr,
        provenance: Provenance {
            scheme: s.kind(),
            ns: vec![n, m],
            count,
            seed,
            basis_size: k,
        },
    })
}

/// First-order residual extrapolated from `n < m`.
pub fn extrapolate_first_order_residual(
    s: &ApproximationScheme,
    basis: &TestFunctionBasis,
    (n, m): (usize, usize),
    order: i32,
    count: usize,
    seed: u64,
    idx: (usize, usize, usize),
) -> Result<Estimate> {
    check_sample_count(count)?;
    let samples = s.sample_pairs(&[n, m], count, seed)?;
    let a = first_order_integrand(&triple(s, basis, &samples, n, idx)?);
    let b = first_order_integrand(&triple(s, basis, &samples, m, idx)?);
    let (wn, wm) = richardson_weights(s.alpha(n), s.alpha(m), order)?;
    let c: Vec<f64> = a.iter().zip(&b).map(|(x, y)| wn * x + wm * y).collect();
    Ok(Estimate::from_samples(&c))
}

/// Drift of a weak estimate between `n` and `2n` on shared samples.
#[derive(Debug, Clone, Serialize)]
pub struct RichardsonCheck {
    pub n: usize,
    pub m: usize,
    #[serde(serialize_with = "serialize_matrix")]
    pub drift: DMatrix<f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub drift_stderr: DMatrix<f64>,
    /// Any entry drifting by more than 3 standard errors.
    pub flagged: bool,
}

pub fn richardson_check(
    s: &ApproximationScheme,
    basis: &TestFunctionBasis,
    kind: OperatorKind,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<RichardsonCheck> {
    check_sample_count(count)?;
    let m = 2 * n;
    let samples = s.sample_pairs(&[n, m], count, seed)?;
    let en = Evaluated::new(s, basis, &samples, n)?;
    let em = Evaluated::new(s, basis, &samples, m)?;
    let k = basis.len();
    let mut drift = DMatrix::zeros(k, k);
    let mut drift_stderr = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let a = en.scaled_integrand(kind, i, j);
            let b = em.scaled_integrand(kind, i, j);
            let d: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
            let e = Estimate::from_samples(&d);
            drift[(i, j)] = e.mean;
            drift_stderr[(i, j)] = e.stderr;
        }
    }
    let flagged = drift
        .iter()
        .zip(drift_stderr.iter())
        .any(|(d, se)| d.abs() > 3.0 * se);
    Ok(RichardsonCheck {
        n,
        m,
        drift,
        drift_stderr,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximation::{make_scheme, SchemeParams};

    fn binary() -> ApproximationScheme {
        make_scheme(SchemeKind::BinaryDigits, SchemeParams::BinaryDigits).unwrap()
    }

    fn rademacher_series() -> ApproximationScheme {
        make_scheme(
            SchemeKind::SeriesIndependent,
            SchemeParams::default_for(SchemeKind::SeriesIndependent),
        )
        .unwrap()
    }

    #[test]
    fn bump_basis_layout() {
        let b = TestFunctionBasis::bumps(0.0, 1.0, 8).unwrap();
        assert_eq!(b.len(), 8);
        let w = 1.0 / 9.0;
        assert_eq!(b.get(0).unwrap().support_hint(), Some((0.0, 2.0 * w)));
        assert!((b.get(7).unwrap().support_hint().unwrap().1 - 1.0).abs() < 1e-15);
        assert!(b.get(8).is_err());
        assert!(TestFunctionBasis::bumps(1.0, 0.0, 3).is_err());
    }

    #[test]
    fn half_sum_and_singular_identities() {
        for s in [binary(), rademacher_series()] {
            let basis = TestFunctionBasis::default_for(&s, 1).unwrap();
            let set = estimate_operators(&s, &basis, 8, 5_000, 2).unwrap();
            let scale = crate::linalg::max_abs_entry(&set.theoretical.matrix).max(1.0);
            let r = half_sum_residual(&set.theoretical, &set.practical, &set.symmetric).unwrap();
            assert!(r <= 1e-12 * scale, "{r}");
            let half = (&set.theoretical.matrix - &set.practical.matrix) * 0.5;
            assert_eq!(set.singular.matrix, half);
        }
    }

    #[test]
    fn mismatched_provenance_is_rejected() {
        let s = binary();
        let basis = TestFunctionBasis::default_for(&s, 1).unwrap();
        let a = estimate_operators(&s, &basis, 8, 1_000, 1).unwrap();
        let b = estimate_operators(&s, &basis, 8, 1_000, 2).unwrap();
        assert!(matches!(
            half_sum_residual(&a.theoretical, &b.practical, &a.symmetric),
            Err(Error::Provenance(_))
        ));
    }

    #[test]
    fn single_function_symmetry_defect_is_zero() {
        let s = rademacher_series();
        let basis = TestFunctionBasis::new(vec![TestFunction::bump(0.0, 1.0)]).unwrap();
        let symm = estimate_weak(&s, &basis, OperatorKind::Symmetric, 16, 2_000, 1).unwrap();
        let d = symmetry_defect(&symm, None).unwrap();
        assert_eq!(d.defect, 0.0);
        assert!(d.passed());
        let theo = estimate_weak(&s, &basis, OperatorKind::Theoretical, 16, 2_000, 1).unwrap();
        assert!(symmetry_defect(&theo, None).is_err());
        assert!(symmetry_defect(&symm, Some(&DMatrix::zeros(2, 2))).is_err());
    }

    /// `∫₀¹ (φ(⌊y/h⌋h) − φ(y))·w(y) dy` by composite Simpson on each cell.
    fn binary_oracle(n: usize, integrand: impl Fn(f64, f64) -> f64) -> f64 {
        let h = 0.5f64.powi(n as i32);
        let cells = 1usize << n;
        let sub = 16;
        let mut total = 0.0;
        for c in 0..cells {
            let left = c as f64 * h;
            let step = h / sub as f64;
            let mut acc = 0.0;
            for k in 0..=sub {
                let y = left + k as f64 * step;
                let w = if k == 0 || k == sub {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += w * integrand(left, y.min(1.0 - f64::EPSILON));
            }
            total += acc * step / 3.0;
        }
        total
    }

    #[test]
    fn binary_finite_n_operators_match_quadrature() {
        let s = binary();
        let basis = TestFunctionBasis::default_for(&s, 1).unwrap();
        let n = 10;
        let set = estimate_operators(&s, &basis, n, 200_000, 3).unwrap();
        let alpha = s.alpha(n);
        for (i, j) in [(3, 3), (3, 4), (4, 3), (0, 1)] {
            let (f, g) = (basis.get(i).unwrap().clone(), basis.get(j).unwrap().clone());
            let theo = alpha * binary_oracle(n, |yn, y| (f.f(yn) - f.f(y)) * g.f(y));
            let prac = alpha * binary_oracle(n, |yn, y| (f.f(y) - f.f(yn)) * g.f(yn));
            let symm =
                -0.5 * alpha * binary_oracle(n, |yn, y| (f.f(yn) - f.f(y)) * (g.f(yn) - g.f(y)));
            for (est, exact) in [
                (&set.theoretical, theo),
                (&set.practical, prac),
                (&set.symmetric, symm),
            ] {
                let e = Estimate {
                    mean: est.matrix[(i, j)],
                    stderr: est.stderr[(i, j)],
                    count: 0,
                };
                assert!(
                    e.within(exact, 4.0, 1e-12),
                    "{:?} ({i},{j}): {e:?} vs {exact}",
                    est.kind
                );
            }
        }
    }

    #[test]
    fn binary_singular_operator_is_minus_derivative() {
        let s = binary();
        let basis = TestFunctionBasis::default_for(&s, 1).unwrap();
        let set = estimate_operators(&s, &basis, 16, 100_000, 5).unwrap();
        for (i, j) in [(2, 2), (2, 3), (3, 2)] {
            let (f, g) = (basis.get(i).unwrap(), basis.get(j).unwrap());
            let m = 20_000;
            let exact: f64 = -(0..m)
                .map(|k| {
                    let y = (k as f64 + 0.5) / m as f64;
                    f.d1(y) * g.f(y)
                })
                .sum::<f64>()
                / m as f64;
            let got = set.singular.matrix[(i, j)];
            assert!(
                (got - exact).abs() <= 4.0 * set.singular.stderr[(i, j)] + 1e-3,
                "{got} vs {exact}"
            );
        }
    }

    #[test]
    fn extrapolation_removes_leading_term() {
        let (wn, wm) = richardson_weights(2.0, 4.0, 1).unwrap();
        // L_k = 3 + 5/α_k
        assert!((wn * (3.0 + 2.5) + wm * (3.0 + 1.25) - 3.0).abs() < 1e-15);
        let (wn, wm) = richardson_weights(2.0, 4.0, 2).unwrap();
        assert!((wn * (3.0 + 5.0 / 4.0) + wm * (3.0 + 5.0 / 16.0) - 3.0).abs() < 1e-15);
        assert!(richardson_weights(2.0, 2.0, 1).is_err());
    }

    #[test]
    fn trivial_first_order_residual() {
        let s = rademacher_series();
        let mut fns = TestFunctionBasis::default_for(&s, 1)
            .unwrap()
            .functions()
            .to_vec();
        fns.push(TestFunction::constant(1, 1.0));
        let basis = TestFunctionBasis::new(fns).unwrap();
        let one = basis.len() - 1;
        let r = first_order_residual(&s, &basis, 16, 5_000, 1, 3, 3, one).unwrap();
        assert!(r.mean.abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn constant_weight_variances_coincide() {
        let s = rademacher_series();
        let mut fns = TestFunctionBasis::default_for(&s, 1)
            .unwrap()
            .functions()
            .to_vec();
        fns.push(TestFunction::constant(1, 1.0));
        let basis = TestFunctionBasis::new(fns).unwrap();
        let one = basis.len() - 1;
        let v = variance_comparison(&s, &basis, 16, 5_000, 1, 3, 4, one).unwrap();
        assert_eq!(v.theoretical_var.mean, v.practical_var.mean);
        let symm = estimate_weak(&s, &basis, OperatorKind::Symmetric, 16, 5_000, 1).unwrap();
        assert!((v.theoretical_var.mean + 2.0 * symm.matrix[(3, 4)]).abs() < 1e-12);
    }

    #[test]
    fn identity_outer_map_gives_unit_ratio() {
        let s = rademacher_series();
        let basis = TestFunctionBasis::default_for(&s, 1).unwrap();
        let rows = asymptotic_calculus_check(
            &s,
            &basis,
            &[4],
            &SmoothMap::identity(1),
            &[16, 64],
            5_000,
            2,
        )
        .unwrap();
        for r in rows {
            assert!((r.ratio - 1.0).abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn gamma_assembly_matches_direct_formula() {
        let s = rademacher_series();
        let basis = TestFunctionBasis::default_for(&s, 3).unwrap();
        let g = gamma_weak(&s, &basis, 32, 20_000, 4).unwrap();
        let scale = crate::linalg::max_abs_entry(&g.matrix).max(1.0);
        assert!(
            g.max_assembly_gap() <= 1e-10 * scale,
            "{}",
            g.max_assembly_gap()
        );
    }

    #[test]
    fn locality_needs_three_indices() {
        let s = rademacher_series();
        let basis = TestFunctionBasis::default_for(&s, 1).unwrap();
        assert!(locality_statistic(&s, &basis, &[4, 8], 100, 1).is_err());
        let r = locality_statistic(&s, &basis, &[8, 32, 128], 20_000, 1).unwrap();
        assert!(r.passed(), "{:?}", r.slope);
    }
}
