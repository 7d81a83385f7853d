use errlab_core::approximation::{make_scheme, SchemeKind, SchemeParams};
use errlab_core::error_algebra::propagate;
use errlab_core::fisher::{
    identify_structure, Bernoulli, BernoulliOdds, Exponential, FisherMethod, InvertibleMap,
    Reparametrized,
};
use errlab_core::mc::Estimate;
use std::sync::Arc;

#[test]
fn identified_field_is_stable_under_odds_map() {
    let odds = InvertibleMap::odds();
    let ps: Vec<Vec<f64>> = (1..=9).map(|i| vec![i as f64 / 10.0]).collect();
    let thetas: Vec<Vec<f64>> = ps.iter().map(|p| vec![p[0] / (1.0 - p[0])]).collect();
    for method in [FisherMethod::Analytic, FisherMethod::Quadrature] {
        let field = identify_structure(&Bernoulli, &ps, method, 0, 0).unwrap();
        let direct = identify_structure(&BernoulliOdds, &thetas, method, 0, 0).unwrap();
        for (node, there) in field.nodes.iter().zip(&direct.nodes) {
            let x = field.to_erroneous_value(node.x[0], 0.0).unwrap();
            let pushed = propagate(&odds.forward, &x).unwrap();
            let expected = there.gamma.as_ref().unwrap()[(0, 0)];
            let got = pushed.covariance()[(0, 0)];
            assert!(
                (got - expected).abs() <= 1e-9 * expected,
                "{method:?} p={}: {got} vs {expected}",
                node.x[0]
            );
            assert!((pushed.value()[0] - there.x[0]).abs() < 1e-12);
        }
    }
}

#[test]
fn reparametrized_exponential_matches_scale_change() {
    // λ ↦ 1/λ is the mean; Γ[I] for the mean of an exponential sample is μ²
    let mean = InvertibleMap::new(
        errlab_core::SmoothMap::scalar(|l| 1.0 / l, |l| -1.0 / (l * l), |l| 2.0 / l.powi(3)),
        errlab_core::SmoothMap::scalar(|m| 1.0 / m, |m| -1.0 / (m * m), |m| 2.0 / m.powi(3)),
    )
    .unwrap();
    let model = Reparametrized {
        base: Arc::new(Exponential),
        map: mean,
    };
    let grid: Vec<Vec<f64>> = [0.5, 1.0, 3.0].iter().map(|m| vec![*m]).collect();
    let f = identify_structure(&model, &grid, FisherMethod::Quadrature, 0, 0).unwrap();
    for node in &f.nodes {
        let mu = node.x[0];
        assert!((node.gamma.as_ref().unwrap()[(0, 0)] - mu * mu).abs() <= 1e-7 * mu * mu);
    }
}

#[test]
fn wiener_perturbation_recovers_first_chaos_gamma() {
    let s = make_scheme(
        SchemeKind::WienerPerturbation,
        SchemeParams::WienerPerturbation { t: 1.0 },
    )
    .unwrap();
    let n = 1000;
    let pairs = s.sample_pairs(&[n], 200_000, 41).unwrap();
    let scaled: Vec<f64> = pairs
        .samples
        .iter()
        .map(|p| n as f64 * (p.yn[0].sin() - p.y.sin()).powi(2))
        .collect();
    let e = Estimate::from_samples(&scaled);
    // E[cos²(B₁)] = (1 + e⁻²)/2, plus an O(1/n) remainder
    let limit = 0.5 * (1.0 + (-2.0f64).exp());
    assert!(e.within(limit, 3.5, 2.0 / n as f64), "{e:?} vs {limit}");
}
