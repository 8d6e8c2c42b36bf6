//! Dense reference solutions shared by the integration tests.
#![allow(dead_code)]

use gmfpca::domain::MultilevelFunctionalDataset;
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct ConjugateScores {
    pub level1_mean: Array2<f64>,
    pub level1_sd: Array2<f64>,
    pub level2_mean: Array2<f64>,
    pub level2_sd: Array2<f64>,
}

/// Largest scaled gap `|est - mean| / sd` over all entries.
pub fn max_scaled_gap(est: &Array2<f64>, mean: &Array2<f64>, sd: &Array2<f64>) -> f64 {
    est.iter().zip(mean).zip(sd).map(|((e, m), s)| (e - m).abs() / s).fold(0.0, f64::max)
}

/// Dense Henderson mixed-model equations and the exact gaussian marginal
/// log-likelihood, solved with nalgebra.
pub struct DenseLmm {
    pub beta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub loglik: f64,
}

pub fn dense_lmm(records: &[(usize, usize, usize, f64)], visit_effects: bool, s2a: f64, s2b: f64, s2e: f64) -> DenseLmm {
    let n = records.len();
    let mut subjects: Vec<usize> = Vec::new();
    let mut curves: Vec<usize> = Vec::new();
    let mut levels: Vec<usize> = Vec::new();
    for &(s, c, l, _) in records {
        if !subjects.contains(&s) {
            subjects.push(s);
        }
        if !curves.contains(&c) {
            curves.push(c);
        }
        if !levels.contains(&l) {
            levels.push(l);
        }
    }
    levels.sort();
    let p = if visit_effects { levels.len() } else { 1 };
    let q = subjects.len() + curves.len();
    let mut x = DMatrix::<f64>::zeros(n, p);
    let mut z = DMatrix::<f64>::zeros(n, q);
    let mut y = DVector::<f64>::zeros(n);
    for (r, &(s, c, l, v)) in records.iter().enumerate() {
        x[(r, 0)] = 1.0;
        if visit_effects {
            let li = levels.iter().position(|&x| x == l).unwrap();
            if li > 0 {
                x[(r, li)] = 1.0;
            }
        }
        z[(r, subjects.iter().position(|&x| x == s).unwrap())] = 1.0;
        z[(r, subjects.len() + curves.iter().position(|&x| x == c).unwrap())] = 1.0;
        y[r] = v;
    }
    let mut dinv = DMatrix::<f64>::zeros(q, q);
    for i in 0..q {
        dinv[(i, i)] = if i < subjects.len() { 1.0 / s2a } else { 1.0 / s2b };
    }
    // mixed-model equations
    let xtx = x.transpose() * &x / s2e;
    let xtz = x.transpose() * &z / s2e;
    let ztz = z.transpose() * &z / s2e + &dinv;
    let mut c = DMatrix::<f64>::zeros(p + q, p + q);
    c.view_mut((0, 0), (p, p)).copy_from(&xtx);
    c.view_mut((0, p), (p, q)).copy_from(&xtz);
    c.view_mut((p, 0), (q, p)).copy_from(&xtz.transpose());
    c.view_mut((p, p), (q, q)).copy_from(&ztz);
    let mut rhs = DVector::<f64>::zeros(p + q);
    rhs.rows_mut(0, p).copy_from(&(x.transpose() * &y / s2e));
    rhs.rows_mut(p, q).copy_from(&(z.transpose() * &y / s2e));
    let sol = c.lu().solve(&rhs).unwrap();

    // marginal likelihood with V = s2e I + Z D Z'
    let mut d = DMatrix::<f64>::zeros(q, q);
    for i in 0..q {
        d[(i, i)] = 1.0 / dinv[(i, i)];
    }
    let v = DMatrix::<f64>::identity(n, n) * s2e + &z * d * z.transpose();
    let chol = v.clone().cholesky().unwrap();
    let vinv_x = chol.solve(&x);
    let beta = (x.transpose() * &vinv_x).lu().solve(&(vinv_x.transpose() * &y)).unwrap();
    let r = &y - &x * &beta;
    let quad = (r.transpose() * chol.solve(&r))[(0, 0)];
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let loglik = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);

    DenseLmm {
        beta: sol.rows(0, p).iter().copied().collect(),
        a: sol.rows(p, subjects.len()).iter().copied().collect(),
        b: sol.rows(p + subjects.len(), curves.len()).iter().copied().collect(),
        loglik,
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn gaussian_records(seed: u64, subjects: usize, visits: usize, points: usize) -> Vec<(usize, usize, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nrm = Normal::new(0.0, 1.0).unwrap();
    let mut recs = Vec::new();
    for s in 0..subjects {
        let a = 0.9 * nrm.sample(&mut rng);
        for j in 0..visits {
            let b = 0.6 * nrm.sample(&mut rng);
            for _ in 0..points {
                recs.push((s, s * visits + j, j, 0.5 + 0.3 * j as f64 + a + b + 0.4 * nrm.sample(&mut rng)));
            }
        }
    }
    recs
}

/// Dense conjugate posterior of every subject's `(xi_i, zeta_i1, ..)`
/// block of the gaussian score model given the variances, laid out like
/// the sampler's summaries.
pub fn conjugate_scores(
    data: &MultilevelFunctionalDataset<f64>,
    phi: &Array2<f64>,
    psi: &Array2<f64>,
    mean: &[f64],
    variances: (&[f64], &[f64], f64),
) -> ConjugateScores {
    let (s2a, s2b, s2e) = variances;
    let (l, m) = (s2a.len(), s2b.len());
    let values = data.values();
    let mut xm = Array2::zeros((data.n_subjects(), l));
    let mut xs = Array2::zeros((data.n_subjects(), l));
    let mut zm = Array2::zeros((data.n_curves(), m));
    let mut zs = Array2::zeros((data.n_curves(), m));
    for (s, subject) in data.subjects().iter().enumerate() {
        let q = l + m * subject.curves.len();
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for (local, &c) in subject.curves.iter().enumerate() {
            for kk in 0..mean.len() {
                let y = values[[c, kk]];
                if y.is_nan() {
                    continue;
                }
                let mut x = vec![0.0; q];
                for a in 0..l {
                    x[a] = phi[[kk, a]];
                }
                for b in 0..m {
                    x[l + local * m + b] = psi[[kk, b]];
                }
                rows.push((x, y - mean[kk]));
            }
        }
        let xmat = DMatrix::from_fn(rows.len(), q, |r, c| rows[r].0[c]);
        let y = DVector::from_fn(rows.len(), |r, _| rows[r].1);
        let mut prec = xmat.transpose() * &xmat / s2e;
        for a in 0..q {
            prec[(a, a)] += 1.0 / if a < l { s2a[a] } else { s2b[(a - l) % m] };
        }
        let cov = prec.try_inverse().unwrap();
        let mean = &cov * (xmat.transpose() * y / s2e);
        for a in 0..l {
            xm[[s, a]] = mean[a];
            xs[[s, a]] = cov[(a, a)].sqrt();
        }
        for (local, &c) in subject.curves.iter().enumerate() {
            for b in 0..m {
                let at = l + local * m + b;
                zm[[c, b]] = mean[at];
                zs[[c, b]] = cov[(at, at)].sqrt();
            }
        }
    }
    ConjugateScores { level1_mean: xm, level1_sd: xs, level2_mean: zm, level2_sd: zs }
}
