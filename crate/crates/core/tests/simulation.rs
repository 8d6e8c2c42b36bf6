use gmfpca::domain::{logistic, Family};
use gmfpca::simulation::{basis_matrices, level1_basis, level2_basis, observed_mean, simulate, BasisCase, SimulationConfig};
use ndarray::Array2;

/// Expected positive rate of the binary design: pointwise
/// `E logistic(b0 + N(0, v(s)))` by trapezoid quadrature over the normal
/// density, averaged over the grid.
fn expected_positive_rate(b0: f64, k: usize) -> f64 {
    let n = 4001;
    let (lo, hi) = (-9.0, 9.0);
    let dz = (hi - lo) / (n - 1) as f64;
    let mut total = 0.0;
    for kk in 0..=k {
        let s = kk as f64 / k as f64;
        let v: f64 = (0..4)
            .map(|l| 0.5f64.powi(l as i32) * (level1_basis(l, s).powi(2) + level2_basis(BasisCase::Case1, l, s).powi(2)))
            .sum();
        let mut e = 0.0;
        for i in 0..n {
            let z = lo + dz * i as f64;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let dens = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            e += w * dens * logistic(b0 + v.sqrt() * z) * dz;
        }
        total += e;
    }
    total / (k + 1) as f64
}

fn trapezoid_gram(f: &Array2<f64>, h: f64) -> Array2<f64> {
    let n = f.nrows();
    Array2::from_shape_fn((f.ncols(), f.ncols()), |(a, b)| {
        (0..n).map(|k| {
            let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            w * f[[k, a]] * f[[k, b]]
        }).sum::<f64>() * h
    })
}

#[test]
fn bases_are_orthonormal_under_quadrature() {
    let k = 1000;
    let s: Vec<f64> = (0..=k).map(|i| i as f64 / k as f64).collect();
    for case in [BasisCase::Case1, BasisCase::Case2] {
        let (phi, psi) = basis_matrices::<f64>(case, &s);
        for f in [&phi, &psi] {
            let g = trapezoid_gram(f, 1.0 / k as f64);
            for ((i, j), &v) in g.indexed_iter() {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((v - target).abs() < 1e-3, "{case:?} Gram[{i},{j}] = {v}");
            }
        }
    }
    // Case 2 levels are not mutually orthogonal
    let (phi, psi) = basis_matrices::<f64>(BasisCase::Case2, &s);
    let cross = phi.t().dot(&psi) / k as f64;
    assert!(cross.iter().any(|v| v.abs() > 0.1));
}

#[test]
fn binary_positive_rate_follows_the_intercept() {
    for (b0, lit) in [(0.0, 0.5), (-1.5, 0.3), (-2.5, 0.17), (-3.5, 0.09)] {
        let expected = expected_positive_rate(b0, 100);
        assert!((expected - lit).abs() < 0.02, "quadrature {expected} vs {lit}");
        let cfg = SimulationConfig { subjects: 300, visits: 4, b0, seed: 11, ..Default::default() };
        let (data, _) = simulate::<f64>(&cfg).unwrap();
        let rate = observed_mean(&data);
        // 1200 curves; subject-level correlation inflates the binomial error
        assert!((rate - expected).abs() < 0.03, "b0 {b0}: rate {rate} vs {expected}");
    }
}

#[test]
fn scores_have_the_eigenvalue_law() {
    let cfg = SimulationConfig { subjects: 3000, visits: 2, points: 20, seed: 3, ..Default::default() };
    let (_, truth) = simulate::<f64>(&cfg).unwrap();
    let var = |a: &Array2<f64>, c: usize| a.column(c).iter().map(|v| v * v).sum::<f64>() / a.nrows() as f64;
    for l in 0..4 {
        let lambda = 0.5f64.powi(l as i32);
        // relative SE of a variance estimate is sqrt(2/n)
        let se1 = lambda * (2.0 / 3000.0f64).sqrt();
        let se2 = lambda * (2.0 / 6000.0f64).sqrt();
        assert!((var(&truth.xi, l) - lambda).abs() < 4.0 * se1);
        assert!((var(&truth.zeta, l) - lambda).abs() < 4.0 * se2);
    }
}

#[test]
fn truth_reconstructs_the_linear_predictor() {
    let cfg = SimulationConfig { family: Family::Poisson, basis: BasisCase::Case2, subjects: 30, visits: 3, b0: -0.5, seed: 8, ..Default::default() };
    let (data, truth) = simulate::<f64>(&cfg).unwrap();
    assert_eq!(data.values().dim(), (90, 101));
    assert!(truth.mean.iter().all(|&m| m == -0.5));
    for (c, curve) in data.curves().iter().enumerate() {
        for k in 0..101 {
            let a: f64 = (0..4).map(|l| truth.xi[[curve.subject, l]] * truth.phi[[k, l]]).sum();
            let b: f64 = (0..4).map(|m| truth.zeta[[c, m]] * truth.psi[[k, m]]).sum();
            assert!((truth.eta[[c, k]] - (truth.mean[k] + a + b)).abs() < 1e-12);
        }
    }
    let values = data.values();
    assert!(values.iter().all(|&y| y >= 0.0 && y.fract() == 0.0));
    // counts track exp(eta) in aggregate
    let counts: f64 = values.iter().sum();
    let rate: f64 = truth.eta.iter().map(|e| e.exp()).sum();
    assert!((counts / rate - 1.0).abs() < 0.03, "{counts} vs {rate}");
}

#[test]
fn identifiers_and_reproducibility() {
    let cfg = SimulationConfig { subjects: 4, visits: 3, points: 24, seed: 42, ..Default::default() };
    let (a, ta) = simulate::<f64>(&cfg).unwrap();
    let (b, tb) = simulate::<f64>(&cfg).unwrap();
    assert_eq!(a.values(), b.values());
    assert_eq!(ta.eta, tb.eta);
    let ids: Vec<&str> = a.subjects().iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["1", "2", "3", "4"]);
    let visits: Vec<&str> = a.curves().iter().take(3).map(|c| c.visit_id.as_str()).collect();
    assert_eq!(visits, ["1", "2", "3"]);
    let other = SimulationConfig { seed: 43, ..cfg.clone() };
    assert_ne!(simulate::<f64>(&other).unwrap().0.values(), a.values());
    let single = simulate::<f32>(&cfg).unwrap().1;
    assert!((single.xi[[0, 0]] as f64 - ta.xi[[0, 0]]).abs() < 1e-5);
}
