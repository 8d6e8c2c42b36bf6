//! Multilevel decomposition of the latent predictors.
//!
//! Covariances are separated by the method of moments: the subject-level
//! surface is the average of within-subject cross-visit products, the
//! subject-visit surface is what remains of the total. Each surface is
//! smoothed, projected onto the PSD cone and eigendecomposed; eigenfunctions
//! are scaled to unit norm under the Riemann inner product
//! `<f, g> = sum_k f(s_k) g(s_k) ds`.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::domain::SamplingGrid;
use crate::error::{Error, Result};
use crate::linalg::{max_asymmetry, symmetric_eigen};
use crate::local_glmm::LatentPredictorMatrix;
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct CovarianceEstimates<T> {
    pub k_a: Array2<T>,
    pub k_b: Array2<T>,
    pub k_total: Array2<T>,
    /// Pointwise mean `mu_0(s_k)`.
    pub mean: Vec<T>,
    /// Visit shifts `mu_j(s_k)`, `levels x K` (zero unless visits are
    /// treated as non-exchangeable).
    pub visit_means: Array2<T>,
    /// Number of ordered within-subject visit pairs behind `k_a`.
    pub n_pairs: usize,
}

/// Method-of-moments covariance separation.
///
/// With `visit_means` the curves are centred by their own visit level's
/// pointwise mean, otherwise by the overall pointwise mean.
pub fn estimate_covariances<T: Real>(eta: &LatentPredictorMatrix<T>, visit_means: bool) -> Result<CovarianceEstimates<T>> {
    let n = eta.n_curves();
    let k = eta.grid_len();
    if n == 0 {
        return Err(Error::Level2Inestimable);
    }
    let n_subjects = eta.curve_subject.iter().copied().max().map_or(0, |m| m + 1);
    let mut curves_of: Vec<Vec<usize>> = vec![Vec::new(); n_subjects];
    for (c, &s) in eta.curve_subject.iter().enumerate() {
        curves_of[s].push(c);
    }
    let n_pairs: usize = curves_of.iter().map(|c| c.len() * c.len().saturating_sub(1)).sum();
    if n_pairs == 0 {
        return Err(Error::Level2Inestimable);
    }

    let mean: Array1<T> = eta.eta.mean_axis(Axis(0)).expect("non-empty");
    let n_levels = eta.curve_level.iter().copied().max().map_or(1, |m| m + 1);
    let mut level_means = Array2::<T>::zeros((n_levels, k));
    if visit_means {
        let mut counts = vec![0usize; n_levels];
        for (c, &l) in eta.curve_level.iter().enumerate() {
            counts[l] += 1;
            let row = eta.eta.row(c);
            let mut dst = level_means.row_mut(l);
            dst += &row;
        }
        for (l, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                let inv = T::one() / T::from_count(cnt);
                level_means.row_mut(l).mapv_inplace(|v| v * inv);
                let mut row = level_means.row_mut(l);
                row -= &mean;
            }
        }
    }

    let mut centered = eta.eta.clone();
    for (c, mut row) in centered.outer_iter_mut().enumerate() {
        row -= &mean;
        if visit_means {
            row -= &level_means.row(eta.curve_level[c]);
        }
    }

    let gram = centered.t().dot(&centered);
    let mut sums = Array2::<T>::zeros((n_subjects, k));
    for (s, cs) in curves_of.iter().enumerate() {
        for &c in cs {
            let mut dst = sums.row_mut(s);
            dst += &centered.row(c);
        }
    }
    let cross = sums.t().dot(&sums) - &gram;

    let k_total = symmetrize(&(gram / T::from_count(n)));
    let k_a = symmetrize(&(cross / T::from_count(n_pairs)));
    let k_b = &k_total - &k_a;
    Ok(CovarianceEstimates { k_a, k_b, k_total, mean: mean.to_vec(), visit_means: level_means, n_pairs })
}

fn symmetrize<T: Real>(a: &Array2<T>) -> Array2<T> {
    let half = T::lit(0.5);
    let mut out = a.clone();
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (a[[i, j]] + a[[j, i]]) * half;
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    out
}

/// Bivariate local-linear smoother with an Epanechnikov product kernel of
/// half-support `bandwidth` grid steps. With `exclude_diagonal` the `s = t`
/// entries are left out of every fit and predicted from their neighbours.
/// Cyclic grids wrap distances. `bandwidth == 0` returns the input.
pub fn smooth_surface<T: Real>(c: &Array2<T>, bandwidth: f64, exclude_diagonal: bool, cyclic: bool) -> Array2<T> {
    let n = c.nrows();
    if bandwidth <= 0.0 {
        return c.clone();
    }
    let reach = (bandwidth.ceil() as usize).saturating_sub(if bandwidth.fract() == 0.0 { 1 } else { 0 });
    let kernel: Vec<T> = (0..=reach)
        .map(|d| {
            let u = d as f64 / bandwidth;
            T::lit((1.0 - u * u).max(0.0))
        })
        .collect();
    let offsets = |center: usize| -> Vec<(usize, T, T)> {
        // (index, signed distance, kernel weight)
        let mut out = Vec::with_capacity(2 * reach + 1);
        for o in -(reach as isize)..=(reach as isize) {
            let idx = center as isize + o;
            let idx = if cyclic {
                idx.rem_euclid(n as isize) as usize
            } else if idx < 0 || idx >= n as isize {
                continue;
            } else {
                idx as usize
            };
            let w = kernel[o.unsigned_abs()];
            if w > T::zero() {
                out.push((idx, T::lit(o as f64), w));
            }
        }
        out
    };
    let neighbourhoods: Vec<Vec<(usize, T, T)>> = (0..n).map(offsets).collect();

    let mut out = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let (mut s00, mut s10, mut s01, mut s20, mut s11, mut s02) =
                (T::zero(), T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
            let (mut t0, mut t1, mut t2) = (T::zero(), T::zero(), T::zero());
            for &(u, du, wu) in &neighbourhoods[i] {
                for &(v, dv, wv) in &neighbourhoods[j] {
                    if exclude_diagonal && u == v {
                        continue;
                    }
                    let w = wu * wv;
                    let y = c[[u, v]];
                    s00 += w;
                    s10 += w * du;
                    s01 += w * dv;
                    s20 += w * du * du;
                    s11 += w * du * dv;
                    s02 += w * dv * dv;
                    t0 += w * y;
                    t1 += w * du * y;
                    t2 += w * dv * y;
                }
            }
            let value = local_linear_intercept([s00, s10, s01, s20, s11, s02], [t0, t1, t2]).unwrap_or_else(|| {
                if s00 > T::zero() {
                    t0 / s00
                } else {
                    c[[i, j]]
                }
            });
            out[[i, j]] = value;
            out[[j, i]] = value;
        }
    }
    out
}

fn local_linear_intercept<T: Real>(s: [T; 6], t: [T; 3]) -> Option<T> {
    let [s00, s10, s01, s20, s11, s02] = s;
    let m = [[s00, s10, s01], [s10, s20, s11], [s01, s11, s02]];
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let scale = s00 * s20 * s02;
    if !(det.abs() > T::lit(1e-10) * scale.abs()) || !det.is_finite() {
        return None;
    }
    // Cramer's rule for the intercept
    let num = t[0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (t[1] * m[2][2] - m[1][2] * t[2])
        + m[0][2] * (t[1] * m[2][1] - m[1][1] * t[2]);
    Some(num / det)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfpcaOptions {
    /// Smoother half-support in grid steps; `None` picks the bin half-width
    /// when run from the pipeline (or no smoothing otherwise).
    pub bandwidth: Option<f64>,
    pub pve_threshold: f64,
    pub max_components: usize,
    /// Fixed `(L, M)`; overrides the PVE rule.
    pub n_components: Option<(usize, usize)>,
    /// Leave the diagonal of the subject-visit surface out of its smooth.
    pub exclude_level2_diagonal: bool,
    /// Centre by visit-specific means.
    pub visit_means: bool,
}

impl Default for MfpcaOptions {
    fn default() -> Self {
        Self {
            bandwidth: None,
            pve_threshold: 0.95,
            max_components: 10,
            n_components: None,
            exclude_level2_diagonal: true,
            visit_means: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelDecomposition<T> {
    /// `K x L`, unit Riemann norm, largest-magnitude entry positive.
    pub eigenfunctions: Array2<T>,
    pub eigenvalues: Vec<T>,
    /// Full spectrum after PSD projection (function scale), non-increasing.
    pub spectrum: Vec<T>,
    /// Share of this level's variance per retained component.
    pub pve: Vec<T>,
    pub cumulative_pve: Vec<T>,
    pub sssod: Vec<T>,
}

impl<T: Real> LevelDecomposition<T> {
    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn total_variance(&self) -> T {
        self.spectrum.iter().copied().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfpcaDecomposition<T> {
    pub spacing: T,
    pub mean: Vec<T>,
    pub visit_means: Array2<T>,
    pub level1: LevelDecomposition<T>,
    pub level2: LevelDecomposition<T>,
}

impl<T: Real> MfpcaDecomposition<T> {
    /// Fraction of the total (both levels) variance at level 1.
    pub fn level1_share(&self) -> T {
        let a = self.level1.total_variance();
        let b = self.level2.total_variance();
        if a + b > T::zero() {
            a / (a + b)
        } else {
            T::zero()
        }
    }

    /// Proportion of total variance for each component of the full
    /// spectrum at `(level 1, level 2)`; all entries sum to one.
    pub fn total_proportions(&self) -> (Vec<T>, Vec<T>) {
        let total = self.level1.total_variance() + self.level2.total_variance();
        let f = |v: &[T]| v.iter().map(|&x| if total > T::zero() { x / total } else { T::zero() }).collect();
        (f(&self.level1.spectrum), f(&self.level2.spectrum))
    }

    pub fn grid_len(&self) -> usize {
        self.mean.len()
    }

    /// Offset `mu_0(s_k) + mu_j(s_k)` for visit `level`.
    pub fn offset(&self, level: usize, k: usize) -> T {
        let shift = if level < self.visit_means.nrows() { self.visit_means[[level, k]] } else { T::zero() };
        self.mean[k] + shift
    }
}

/// Sum of squared second-order differences, `K^2 sum (f_{k+2} - 2 f_{k+1} + f_k)^2`.
pub fn sssod<T: Real>(f: &[T]) -> Result<T> {
    let n = f.len();
    if n < 3 {
        return Err(Error::GridTooSmall(n));
    }
    let two = T::lit(2.0);
    let s: T = f.windows(3).map(|w| {
        let d = w[2] - two * w[1] + w[0];
        d * d
    }).sum();
    let k = T::from_count(n);
    Ok(k * k * s)
}

/// Applies the sign convention in place: largest-magnitude entry positive
/// (first such entry on ties).
pub fn orient<T: Real>(v: &mut [T]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < T::zero()) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

struct LevelRule {
    pve_threshold: f64,
    max_components: usize,
    fixed: Option<usize>,
}

fn decompose_level<T: Real>(cov: &Array2<T>, spacing: T, rule: &LevelRule) -> Result<LevelDecomposition<T>> {
    let eig = symmetric_eigen(cov)?;
    let n = cov.nrows();
    let spectrum: Vec<T> = eig.values.iter().map(|&v| v.max(T::zero()) * spacing).collect();
    let total: T = spectrum.iter().copied().sum();
    let positive = spectrum.iter().filter(|&&v| v > T::zero()).count();
    let mut count = match rule.fixed {
        Some(m) => m,
        None => {
            let mut acc = T::zero();
            let threshold = T::lit(rule.pve_threshold) - T::lit(1e-12);
            let mut m = positive;
            for (i, &v) in spectrum.iter().enumerate() {
                acc += v;
                if total > T::zero() && acc / total >= threshold {
                    m = i + 1;
                    break;
                }
            }
            m.min(rule.max_components)
        }
    };
    count = count.min(positive).min(n).max(usize::from(positive > 0));

    let scale = T::one() / spacing.sqrt();
    let mut functions = Array2::<T>::zeros((n, count));
    let mut values = Vec::with_capacity(count);
    let mut pve = Vec::with_capacity(count);
    let mut cumulative = Vec::with_capacity(count);
    let mut roughness = Vec::with_capacity(count);
    let mut acc = T::zero();
    for c in 0..count {
        let mut v: Vec<T> = eig.vectors.column(c).iter().map(|&x| x * scale).collect();
        orient(&mut v);
        roughness.push(sssod(&v)?);
        for (r, x) in v.into_iter().enumerate() {
            functions[[r, c]] = x;
        }
        values.push(spectrum[c]);
        let share = if total > T::zero() { spectrum[c] / total } else { T::zero() };
        acc += share;
        pve.push(share);
        cumulative.push(acc);
    }
    Ok(LevelDecomposition { eigenfunctions: functions, eigenvalues: values, spectrum, pve, cumulative_pve: cumulative, sssod: roughness })
}

fn check_covariance<T: Real>(name: &str, c: &Array2<T>, k: usize) -> Result<()> {
    if c.nrows() != k || c.ncols() != k {
        return Err(Error::InvalidCovariance(format!("{name} is {}x{}, expected {k}x{k}", c.nrows(), c.ncols())));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidCovariance(format!("{name} has non-finite entries")));
    }
    let scale = c.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    if max_asymmetry(c) > T::lit(1e-9) * (T::one() + scale) {
        return Err(Error::InvalidCovariance(format!("{name} is not symmetric")));
    }
    Ok(())
}

/// Smooths both surfaces, projects them to the PSD cone and extracts the
/// leading eigenfunctions of each level.
pub fn smooth_and_eigendecompose<T: Real>(
    k_a: &Array2<T>,
    k_b: &Array2<T>,
    grid: &SamplingGrid<T>,
    options: &MfpcaOptions,
) -> Result<(LevelDecomposition<T>, LevelDecomposition<T>)> {
    let k = grid.len();
    check_covariance("level-1 covariance", k_a, k)?;
    check_covariance("level-2 covariance", k_b, k)?;
    let bw = options.bandwidth.unwrap_or(0.0);
    let cyclic = grid.is_cyclic();
    let sa = smooth_surface(k_a, bw, false, cyclic);
    let sb = smooth_surface(k_b, bw, options.exclude_level2_diagonal, cyclic);
    let spacing = grid.spacing();
    let (fixed_a, fixed_b) = match options.n_components {
        Some((l, m)) => (Some(l), Some(m)),
        None => (None, None),
    };
    let rule = |fixed| LevelRule { pve_threshold: options.pve_threshold, max_components: options.max_components, fixed };
    let level1 = decompose_level(&sa, spacing, &rule(fixed_a))?;
    let level2 = decompose_level(&sb, spacing, &rule(fixed_b))?;
    Ok((level1, level2))
}

/// Full step: covariance separation followed by smoothing and
/// eigendecomposition.
pub fn decompose<T: Real>(
    eta: &LatentPredictorMatrix<T>,
    grid: &SamplingGrid<T>,
    options: &MfpcaOptions,
) -> Result<MfpcaDecomposition<T>> {
    if eta.grid_len() != grid.len() {
        return Err(Error::GridMismatch(format!("latent predictors have {} points, grid {}", eta.grid_len(), grid.len())));
    }
    let cov = estimate_covariances(eta, options.visit_means)?;
    let (level1, level2) = smooth_and_eigendecompose(&cov.k_a, &cov.k_b, grid, options)?;
    Ok(MfpcaDecomposition { spacing: grid.spacing(), mean: cov.mean, visit_means: cov.visit_means, level1, level2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_glmm::LatentPredictorMatrix;
    use ndarray::array;

    fn latent(eta: Array2<f64>, subjects: Vec<usize>) -> LatentPredictorMatrix<f64> {
        let n = eta.nrows();
        LatentPredictorMatrix::from_eta(eta, subjects, vec![0; n], Vec::new())
    }

    #[test]
    fn constant_predictors_give_zero_covariances() {
        let eta = Array2::from_elem((6, 4), 0.7);
        let cov = estimate_covariances(&latent(eta, vec![0, 0, 1, 1, 2, 2]), false).unwrap();
        assert!(cov.k_a.iter().all(|&v| v.abs() < 1e-15));
        assert!(cov.k_b.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn hand_computed_two_by_two() {
        // I = 2, J = 2, K = 2
        // rows: (1,1) (1,2) (2,1) (2,2)
        let eta = array![[1.0, 2.0], [3.0, 0.0], [-1.0, 1.0], [1.0, 5.0]];
        let cov = estimate_covariances(&latent(eta, vec![0, 0, 1, 1]), false).unwrap();
        // mean = (1, 2); centred rows: (0,0) (2,-2) (-2,-1) (0,3)
        // K_total = ((0,0;0,0) + (4,-4;-4,4) + (4,2;2,1) + (0,0;0,9)) / 4
        let kt = array![[2.0, -0.5], [-0.5, 3.5]];
        // cross pairs: subject 1: e11 e12' + e12 e11' = 0; subject 2: (-2,-1)(0,3)' + sym
        //   = [[0,-6],[0,-3]] + [[0,0],[-6,-3]] = [[0,-6],[-6,-6]]; 4 ordered pairs
        let ka = array![[0.0, -1.5], [-1.5, -1.5]];
        for (x, y) in cov.k_total.iter().zip(kt.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
        for (x, y) in cov.k_a.iter().zip(ka.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
        for ((a, b), t) in cov.k_a.iter().zip(cov.k_b.iter()).zip(cov.k_total.iter()) {
            assert!((a + b - t).abs() < 1e-14);
        }
        assert_eq!(cov.n_pairs, 4);
    }

    #[test]
    fn single_visit_subjects_cannot_separate_levels() {
        let eta = Array2::from_elem((3, 4), 1.0);
        assert!(matches!(estimate_covariances(&latent(eta, vec![0, 1, 2]), false), Err(Error::Level2Inestimable)));
    }

    #[test]
    fn sssod_closed_forms() {
        let linear: Vec<f64> = (0..50).map(|k| 3.0 - 0.2 * k as f64).collect();
        assert!(sssod(&linear).unwrap().abs() < 1e-20);
        let k = 100usize;
        let quad: Vec<f64> = (1..=k).map(|i| (i as f64 / k as f64).powi(2)).collect();
        let want = 4.0 * (k as f64 - 2.0) / (k as f64).powi(2);
        assert!((sssod(&quad).unwrap() - want).abs() < 1e-12);
        assert!(matches!(sssod(&[1.0, 2.0]), Err(Error::GridTooSmall(2))));
    }

    #[test]
    fn non_symmetric_input_rejected() {
        let grid = SamplingGrid::uniform(3, 0.0, 0.5, false).unwrap();
        let good = Array2::<f64>::eye(3);
        let mut bad = Array2::<f64>::eye(3);
        bad[[0, 2]] = 0.3;
        let r = smooth_and_eigendecompose(&bad, &good, &grid, &MfpcaOptions::default());
        assert!(matches!(r, Err(Error::InvalidCovariance(_))));
    }

    #[test]
    fn smoother_keeps_planes_and_imputes_diagonal() {
        let n = 15;
        let plane = Array2::from_shape_fn((n, n), |(i, j)| 0.2 + 0.1 * i as f64 + 0.1 * j as f64);
        let s = smooth_surface(&plane, 3.0, true, false);
        for (x, y) in s.iter().zip(plane.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
        // a nugget on the diagonal is removed
        let mut spiked = plane.clone();
        for i in 0..n {
            spiked[[i, i]] += 5.0;
        }
        let s = smooth_surface(&spiked, 3.0, true, false);
        assert!((s[[7, 7]] - plane[[7, 7]]).abs() < 1e-10);
    }

    #[test]
    fn orientation_is_deterministic() {
        let mut v = vec![0.1, -0.9, 0.3];
        orient(&mut v);
        assert_eq!(v, vec![-0.1, 0.9, -0.3]);
    }
}
