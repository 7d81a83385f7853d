use std::sync::Arc;

use errlab_core::approximation::{
    classify_regime, estimate_moments, exact_moments, make_scheme, SchemeKind, SchemeParams,
};
use errlab_core::bias_operators::{
    estimate_operators, gamma_weak, half_sum_residual, richardson_check, symmetry_defect,
    OperatorKind, TestFunctionBasis,
};
use errlab_core::error_algebra::{
    gauss_covariance, naive_propagate, propagate, square_identity_residual, ErroneousValue,
    NaiveErrorValue, SmoothMap,
};
use errlab_core::fisher::{
    fisher_info, score_identity, Bernoulli, BernoulliOdds, Exponential, FisherMethod, Flat,
    NormalMean, NormalMeanSd, ParametricModel,
};
use errlab_core::structures::{
    check_form_generator_link, check_symmetry, diffusion_consistency, generator_identity_residual,
    make_structure, probe_points, standard_pairs, StructureKind, StructureParams,
};
use errlab_core::{linalg, mc, Error, TestFunction};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::config::{Command, ExperimentConfig};
use crate::report::{moments_csv, Check, Report};

/// Why a run stopped; maps onto the exit code.
#[derive(Debug)]
pub enum Failure {
    Invalid(Vec<String>),
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_)
            | Error::NotSymmetric { .. }
            | Error::NotPositiveSemidefinite { .. }
            | Error::Singular { .. }
            | Error::DegenerateFit(_)
            | Error::DerivativeMismatch(_)
            | Error::Estimation(_) => Failure::Numerical(e.to_string()),
            _ => Failure::Invalid(vec![e.to_string()]),
        }
    }
}

type Outcome = Result<Report, Failure>;

pub fn scheme_kind(name: &str) -> Option<SchemeKind> {
    let full = match name {
        "binary" => "binary_digits",
        "polya" => "polya_urn",
        "series" => "series_independent",
        "integral" => "stochastic_integral",
        "wiener" => "wiener_perturbation",
        other => other,
    };
    SchemeKind::parse(full)
}

pub fn scheme_params(kind: SchemeKind, horizon: Option<usize>) -> SchemeParams {
    match kind {
        SchemeKind::PolyaUrn => SchemeParams::PolyaUrn { horizon },
        k => SchemeParams::default_for(k),
    }
}

pub fn structure_kind(name: &str) -> Option<(StructureKind, StructureParams)> {
    match name {
        "ou" | "ornstein_uhlenbeck" => Some((
            StructureKind::OrnsteinUhlenbeck,
            StructureParams::OrnsteinUhlenbeck,
        )),
        "unit_interval" | "monte_carlo_unit_interval" => Some((
            StructureKind::MonteCarloUnitInterval,
            StructureParams::MonteCarloUnitInterval,
        )),
        "lebesgue" | "lebesgue_domain" => Some((
            StructureKind::LebesgueDomain,
            StructureParams::LebesgueDomain { dim: 1 },
        )),
        _ => None,
    }
}

pub fn model_by_name(name: &str, sigma: Option<f64>) -> Result<Arc<dyn ParametricModel>, String> {
    if sigma.is_some() && name != "normal_mean" {
        return Err(format!("sigma only applies to normal_mean, not {name}"));
    }
    Ok(match name {
        "bernoulli" => Arc::new(Bernoulli),
        "bernoulli_odds" => Arc::new(BernoulliOdds),
        "normal_mean" => {
            let sigma = sigma.unwrap_or(1.0);
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(format!("sigma must be positive, got {sigma}"));
            }
            Arc::new(NormalMean { sigma })
        }
        "normal_mean_sd" => Arc::new(NormalMeanSd),
        "exponential" => Arc::new(Exponential),
        "flat" => Arc::new(Flat),
        other => return Err(format!("unknown model '{other}'")),
    })
}

pub fn map_by_name(name: &str, d: usize) -> Result<SmoothMap, String> {
    let unit = |k: usize| {
        let mut a = DMatrix::zeros(1, d);
        a[(0, k)] = 1.0;
        a
    };
    Ok(match name {
        "identity" => SmoothMap::identity(d),
        "square" => SmoothMap::coordinate_square(d, 0),
        "sum" => SmoothMap::affine(DMatrix::from_element(1, d, 1.0), DVector::zeros(1)),
        "product" if d == 2 => SmoothMap::new(
            2,
            1,
            |x| DVector::from_element(1, x[0] * x[1]),
            |x| DMatrix::from_row_slice(1, 2, &[x[1], x[0]]),
            |_| vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])],
        ),
        "rotation45" if d == 2 => SmoothMap::rotation_45(),
        "rotation45_inverse" if d == 2 => SmoothMap::rotation_45_inverse(),
        "exp" if d == 1 => SmoothMap::scalar(f64::exp, f64::exp, f64::exp),
        "sin" if d == 1 => SmoothMap::scalar(f64::sin, f64::cos, |t| -t.sin()),
        "first" => SmoothMap::affine(unit(0), DVector::zeros(1)),
        "product" | "rotation45" | "rotation45_inverse" => {
            return Err(format!("map {name} needs a 2-dimensional value"))
        }
        "exp" | "sin" => return Err(format!("map {name} needs a scalar value")),
        other => return Err(format!("unknown map '{other}'")),
    })
}

pub fn run(config: &ExperimentConfig) -> Outcome {
    let violations = crate::config::validate(config);
    if !violations.is_empty() {
        return Err(Failure::Invalid(violations));
    }
    match config.command.expect("validated") {
        Command::Propagate => run_propagate(config),
        Command::GaussDemo => run_gauss_demo(config),
        Command::NaiveDemo => run_naive_demo(config),
        Command::Simulate => run_simulate(config),
        Command::BiasOps => run_bias_ops(config),
        Command::Fisher => run_fisher(config),
        Command::StructureCheck => run_structure_check(config),
    }
}

fn invalid(e: Error) -> Failure {
    Failure::Invalid(vec![e.to_string()])
}

fn erroneous(value: &[f64], bias: &[f64], cov: &[f64]) -> Result<ErroneousValue, Failure> {
    let d = value.len();
    ErroneousValue::new(
        DVector::from_column_slice(value),
        DVector::from_column_slice(bias),
        DMatrix::from_row_slice(d, d, cov),
    )
    .map_err(invalid)
}

fn value_json(v: &ErroneousValue) -> serde_json::Value {
    json!({
        "value": v.value().as_slice(),
        "bias": v.bias().as_slice(),
        "covariance": rows(v.covariance()),
    })
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn psd_check(c: &DMatrix<f64>) -> Check {
    let min = linalg::min_eigenvalue(c);
    Check::new(
        "error_algebra.propagate",
        min >= -1e-10 * (1.0 + c.trace()),
        format!("output covariance smallest eigenvalue {min:.3e}"),
    )
}

fn run_propagate(config: &ExperimentConfig) -> Outcome {
    let value = config.value.as_deref().expect("validated");
    let d = value.len();
    let bias = config.bias.clone().unwrap_or_else(|| vec![0.0; d]);
    let x = erroneous(
        value,
        &bias,
        config.covariance.as_deref().expect("validated"),
    )?;
    let name = config.map.as_deref().expect("validated");
    let map = map_by_name(name, d).map_err(|e| Failure::Invalid(vec![e]))?;
    let y = propagate(&map, &x)?;
    let mut checks = vec![psd_check(y.covariance())];
    if name == "square" {
        let r = square_identity_residual(&x, 0)?;
        checks.push(Check::new(
            "error_algebra.square_identity_residual",
            r <= 1e-12,
            format!("Γ[F] − (A[F²] − 2F·A[F]) = {r:.3e}"),
        ));
    }
    let results = json!({ "map": name, "input": value_json(&x), "output": value_json(&y) });
    Ok(Report::new(config, results, checks))
}

fn demo_value(config: &ExperimentConfig) -> Vec<f64> {
    config.value.clone().unwrap_or_else(|| vec![1.0, 1.0])
}

fn run_gauss_demo(config: &ExperimentConfig) -> Outcome {
    let value = demo_value(config);
    let cov = config
        .covariance
        .clone()
        .unwrap_or_else(|| vec![1.0, 0.0, 0.0, 1.0]);
    if cov.len() != 4 {
        return Err(Failure::Invalid(vec![
            "covariance must have 4 entries".into()
        ]));
    }
    let x = erroneous(&value, &[0.0, 0.0], &cov)?;
    let there = propagate(&SmoothMap::rotation_45(), &x)?;
    let back = propagate(&SmoothMap::rotation_45_inverse(), &there)?;
    let gap = linalg::max_abs_diff(back.covariance(), x.covariance());
    let sum = map_by_name("sum", 2).expect("built in");
    let diff = SmoothMap::affine(
        DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
        DVector::zeros(1),
    );
    let var_sum = gauss_covariance(&sum, &sum, &x)?;
    let cov_sum_diff = gauss_covariance(&sum, &diff, &x)?;
    let expected = cov[0] - cov[3];
    let checks = vec![
        Check::new(
            "error_algebra.propagate",
            gap <= 1e-12,
            format!("rotation round trip covariance gap {gap:.3e}"),
        ),
        Check::new(
            "error_algebra.gauss_covariance",
            (cov_sum_diff - expected).abs() <= 1e-12 * (1.0 + expected.abs()),
            format!("Γ[x+y, x−y] = {cov_sum_diff} (Γ[x] − Γ[y] = {expected})"),
        ),
    ];
    let results = json!({
        "input": value_json(&x),
        "rotated": value_json(&there),
        "round_trip": value_json(&back),
        "gamma_sum": var_sum,
        "gamma_sum_difference": cov_sum_diff,
    });
    Ok(Report::new(config, results, checks))
}

fn run_naive_demo(config: &ExperimentConfig) -> Outcome {
    let value = demo_value(config);
    let delta = config.covariance.clone().unwrap_or_else(|| vec![1.0, 1.0]);
    if delta.len() != 2 {
        return Err(Failure::Invalid(vec![
            "naive-demo takes two error bounds".into()
        ]));
    }
    let x = NaiveErrorValue::from_slices(&value, &delta).map_err(invalid)?;
    let there = naive_propagate(&SmoothMap::rotation_45(), &x)?;
    let back = naive_propagate(&SmoothMap::rotation_45_inverse(), &there)?;
    let inflated = back
        .delta()
        .iter()
        .zip(x.delta().iter())
        .all(|(b, a)| *a == 0.0 || b > a);
    // |J| of either rotation is (1/√2)·ones, so both bounds come back as δ₀ + δ₁
    let total = delta[0] + delta[1];
    let ulp = 4.0 * f64::EPSILON * total.max(1.0);
    let exact = back.delta().iter().all(|b| (b - total).abs() <= ulp);
    let checks = vec![
        Check::new(
            "error_algebra.naive_propagate",
            inflated,
            "rotation and its inverse inflate every positive bound",
        ),
        Check::new(
            "error_algebra.naive_propagate",
            exact,
            format!(
                "Δ after round trip = ({}, {}), expected δ₀ + δ₁ = {}",
                back.delta()[0],
                back.delta()[1],
                total
            ),
        ),
    ];
    let results = json!({
        "value": value,
        "delta": delta,
        "rotated_delta": there.delta().as_slice(),
        "round_trip_delta": back.delta().as_slice(),
    });
    Ok(Report::new(config, results, checks))
}

fn run_simulate(config: &ExperimentConfig) -> Outcome {
    let kind = scheme_kind(config.kind.as_deref().expect("validated")).expect("validated");
    let params = scheme_params(kind, config.horizon);
    let s = make_scheme(kind, params.clone())?;
    let ns = config.ns.clone().expect("validated");
    let count = config.n_samples.expect("validated");
    let seed = config.seed.expect("validated");
    let r = estimate_moments(&s, &ns, count, seed)?;
    let mut checks = Vec::new();
    for row in &r.rows {
        checks.push(Check::new(
            "approximation_lab.estimate_moments",
            row.v.mean >= -3.0 * row.v.stderr,
            format!("n={} v̂ = {:.6e} ≥ −3·stderr", row.n, row.v.mean),
        ));
        if let Some((b, d, v)) = exact_moments(&s, row.n) {
            for (name, e, exact) in [("b", row.b, b), ("d", row.d, d), ("v", row.v, v)] {
                checks.push(Check::new(
                    "approximation_lab.estimate_moments",
                    e.within(exact, 3.0, 1e-15 * exact.abs()),
                    format!(
                        "n={} {name}̂ = {:.6e} ± {:.2e} vs closed form {exact:.6e}",
                        row.n, e.mean, e.stderr
                    ),
                ));
            }
        }
    }
    let regime = if r.rows.len() >= 4 {
        match classify_regime(&r) {
            Ok(c) => json!(c),
            Err(e) => json!({ "error": e.to_string() }),
        }
    } else {
        serde_json::Value::Null
    };
    let results = json!({ "scheme": params, "moments": r, "regime": regime });
    let mut report = Report::new(config, results, checks);
    report.csv = Some(moments_csv(&r));
    Ok(report)
}

fn run_bias_ops(config: &ExperimentConfig) -> Outcome {
    let kind = scheme_kind(config.kind.as_deref().expect("validated")).expect("validated");
    let params = scheme_params(kind, config.horizon);
    let s = make_scheme(kind, params.clone())?;
    let n = config.n.expect("validated");
    let count = config.n_samples.expect("validated");
    let seed = config.seed.expect("validated");
    let basis = TestFunctionBasis::default_for(&s, seed)?;
    let set = estimate_operators(&s, &basis, n, count, seed)?;
    let scale = set.theoretical.matrix.amax().max(1.0);
    let residual = half_sum_residual(&set.theoretical, &set.practical, &set.symmetric)?;
    let half = (&set.theoretical.matrix - &set.practical.matrix) * 0.5;
    let defect = symmetry_defect(&set.symmetric, None)?;
    let gamma = gamma_weak(&s, &basis, n, count, seed)?;
    let gap = gamma.max_assembly_gap();
    let drift = richardson_check(
        &s,
        &basis,
        OperatorKind::Practical,
        n,
        count,
        mc::derive_seed(seed, 1),
    )?;
    let checks = vec![
        Check::new(
            "bias_operators.half_sum_residual",
            residual <= 1e-12 * scale,
            format!("‖Ã − ½(Ā + A̲)‖ = {residual:.3e}"),
        ),
        Check::new(
            "bias_operators.estimate_weak",
            set.singular.matrix == half,
            "singular estimate equals ½(theoretical − practical) entrywise",
        ),
        Check::new(
            "bias_operators.symmetry_defect",
            defect.passed(),
            format!(
                "defect {:.3e}, tolerance {:.3e}",
                defect.defect, defect.tolerance
            ),
        ),
        Check::new(
            "bias_operators.gamma_weak",
            gap <= 1e-10 * gamma.matrix.amax().max(1.0),
            format!("Γ against its symmetric-operator assembly: gap {gap:.3e}"),
        ),
        Check::new(
            "bias_operators.richardson_check",
            !drift.flagged,
            format!(
                "practical operator drift between n={} and n={}",
                drift.n, drift.m
            ),
        ),
    ];
    let supports: Vec<Option<(f64, f64)>> = basis
        .functions()
        .iter()
        .map(TestFunction::support_hint)
        .collect();
    let results = json!({
        "scheme": params,
        "n": n,
        "basis_supports": supports,
        "operators": {
            "theoretical": set.theoretical,
            "practical": set.practical,
            "symmetric": set.symmetric,
            "singular": set.singular,
        },
        "gamma": gamma,
        "richardson": drift,
    });
    Ok(Report::new(config, results, checks))
}

fn run_fisher(config: &ExperimentConfig) -> Outcome {
    let m = model_by_name(config.model.as_deref().expect("validated"), config.sigma)
        .map_err(|e| Failure::Invalid(vec![e]))?;
    let x = config.x.clone().expect("validated");
    let method = config.fisher_method().expect("validated");
    let count = config.n_samples.expect("validated");
    let seed = config.seed.expect("validated");
    let r = fisher_info(m.as_ref(), &x, method, count, seed)?;
    let mut checks = vec![Check::new(
        "fisher.fisher_info",
        linalg::min_eigenvalue(&r.j) >= -1e-10 * (1.0 + r.j.trace()),
        "J symmetric positive semidefinite",
    )];
    match &r.gamma_i {
        Some(g) => {
            let gap = (g * &r.j - DMatrix::identity(x.len(), x.len())).amax();
            checks.push(Check::new(
                "fisher.fisher_info",
                gap <= 1e-8,
                format!("Γ[I]·J − I = {gap:.3e}"),
            ));
        }
        None => checks.push(Check::new(
            "fisher.fisher_info",
            false,
            "J is singular; Γ[I] is not defined",
        )),
    }
    if method != FisherMethod::Analytic {
        if let Some(a) = m.analytic_fisher(&x) {
            let ok = match &r.stderr {
                Some(se) => (0..a.len()).all(|k| (r.j[k] - a[k]).abs() <= 3.0 * se[k] + 1e-12),
                None => linalg::max_abs_diff(&r.j, &a) <= 1e-8 * a.amax().max(1.0),
            };
            checks.push(Check::new(
                "fisher.fisher_info",
                ok,
                "agrees with the closed form",
            ));
        }
    }
    let score = score_identity(m.as_ref(), &x, count, mc::derive_seed(seed, 1))?;
    for (i, e) in score.iter().enumerate() {
        checks.push(Check::new(
            "fisher.score_identity",
            e.within(0.0, 3.0, 0.0),
            format!("E[score_{i}] = {:.3e} ± {:.2e}", e.mean, e.stderr),
        ));
    }
    let results = json!({ "model": m.name(), "fisher": r, "score_mean": score });
    Ok(Report::new(config, results, checks))
}

fn run_structure_check(config: &ExperimentConfig) -> Outcome {
    let name = config.structure.as_deref().expect("validated");
    let (kind, params) = structure_kind(name).expect("validated");
    let s = make_structure(kind, params)?;
    let count = config.n_samples.expect("validated");
    let seed = config.seed.expect("validated");
    let pairs = standard_pairs(&s);
    let probes = probe_points(&s);
    let mut worst = 0.0f64;
    for (f, g) in &pairs {
        for x in &probes {
            worst = worst
                .max(generator_identity_residual(&s, f, x)?)
                .max(generator_identity_residual(&s, g, x)?);
        }
    }
    let mut checks = vec![Check::new(
        "structures.generator_identity_residual",
        worst <= 1e-10,
        format!("max |Γ[f] − A[f²] + 2fA[f]| = {worst:.3e}"),
    )];
    let mut symmetry = Vec::new();
    let mut links = Vec::new();
    for (i, (f, g)) in pairs.iter().enumerate() {
        let c = check_symmetry(&s, f, g, count, mc::derive_seed(seed, 2 * i as u64))?;
        checks.push(Check::new(
            "structures.check_symmetry",
            c.passed(),
            format!(
                "pair {i}: E[fAg] = {:.5}, E[gAf] = {:.5} (±{:.1e})",
                c.lhs.mean, c.rhs.mean, c.diff_stderr
            ),
        ));
        symmetry.push(c);
        let l =
            check_form_generator_link(&s, f, g, count, mc::derive_seed(seed, 2 * i as u64 + 1))?;
        checks.push(Check::new(
            "structures.check_form_generator_link",
            l.passed(),
            format!(
                "pair {i}: ½E[Γ] = {:.5}, ⟨−Af, g⟩ = {:.5} (±{:.1e})",
                l.half_energy.mean, l.generator_pairing.mean, l.diff_stderr
            ),
        ));
        links.push(l);
    }
    let diffusion = if kind == StructureKind::OrnsteinUhlenbeck {
        let d = diffusion_consistency(
            &s,
            &TestFunction::monomial(2),
            &[0.0],
            0.01,
            None,
            count,
            mc::derive_seed(seed, 99),
        )?;
        checks.push(Check::new(
            "structures.diffusion_consistency",
            d.passed(),
            format!(
                "rate {:.4} ± {:.4} vs A[x²](0) = {} (budget {})",
                d.empirical_rate.mean, d.empirical_rate.stderr, d.predicted, d.bias_budget
            ),
        ));
        json!(d)
    } else {
        serde_json::Value::Null
    };
    let results = json!({
        "structure": kind.name(),
        "generator_identity_max_residual": worst,
        "symmetry": symmetry,
        "form_link": links,
        "diffusion": diffusion,
    });
    Ok(Report::new(config, results, checks))
}
