//! Synthetic multilevel generalized functional data and error metrics.
//!
//! Latent curves follow
//! `eta_ijk = b0 + sum_l xi_il phi_l(s_k) + sum_m zeta_ijm psi_m(s_k)` on
//! `s_k = k / K, k = 0..K`, with `xi_il ~ N(0, 0.5^(l-1))` and
//! `zeta_ijm ~ N(0, 0.5^(m-1))`.

use std::f64::consts::{PI, SQRT_2};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::domain::{Family, MultilevelFunctionalDataset, SamplingGrid};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisCase {
    /// Sines and cosines at both levels, mutually orthogonal.
    #[default]
    Case1,
    /// Level 2 replaced by shifted Legendre polynomials.
    Case2,
}

impl BasisCase {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "case1" => Some(BasisCase::Case1),
            "2" | "case2" => Some(BasisCase::Case2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BasisCase::Case1 => "case1",
            BasisCase::Case2 => "case2",
        }
    }
}

/// Level-1 function `l` (0-based) at `s`.
pub fn level1_basis(l: usize, s: f64) -> f64 {
    match l {
        0 => SQRT_2 * (2.0 * PI * s).sin(),
        1 => SQRT_2 * (2.0 * PI * s).cos(),
        2 => SQRT_2 * (4.0 * PI * s).sin(),
        3 => SQRT_2 * (4.0 * PI * s).cos(),
        _ => panic!("level-1 basis has four functions"),
    }
}

/// Level-2 function `m` (0-based) at `s`.
pub fn level2_basis(case: BasisCase, m: usize, s: f64) -> f64 {
    match (case, m) {
        (BasisCase::Case1, 0) => SQRT_2 * (6.0 * PI * s).sin(),
        (BasisCase::Case1, 1) => SQRT_2 * (6.0 * PI * s).cos(),
        (BasisCase::Case1, 2) => SQRT_2 * (8.0 * PI * s).sin(),
        (BasisCase::Case1, 3) => SQRT_2 * (8.0 * PI * s).cos(),
        (BasisCase::Case2, 0) => 1.0,
        (BasisCase::Case2, 1) => 3f64.sqrt() * (2.0 * s - 1.0),
        (BasisCase::Case2, 2) => 5f64.sqrt() * (6.0 * s * s - 6.0 * s + 1.0),
        (BasisCase::Case2, 3) => 7f64.sqrt() * (20.0 * s.powi(3) - 30.0 * s * s + 12.0 * s - 1.0),
        _ => panic!("level-2 basis has four functions"),
    }
}

/// `points x 4` matrices of both bases at the given points.
pub fn basis_matrices<T: Real>(case: BasisCase, points: &[T]) -> (Array2<T>, Array2<T>) {
    let n = points.len();
    let phi = Array2::from_shape_fn((n, 4), |(k, l)| T::lit(level1_basis(l, points[k].as_f64())));
    let psi = Array2::from_shape_fn((n, 4), |(k, m)| T::lit(level2_basis(case, m, points[k].as_f64())));
    (phi, psi)
}

/// `0.5^(l-1)` for `l = 1..=n`.
pub fn eigenvalue_law(n: usize) -> Vec<f64> {
    (0..n).map(|l| 0.5f64.powi(l as i32)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub family: Family,
    pub basis: BasisCase,
    pub subjects: usize,
    pub visits: usize,
    /// `K`; the grid has `K + 1` points.
    pub points: usize,
    pub b0: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { family: Family::Binary, basis: BasisCase::Case1, subjects: 50, visits: 5, points: 100, b0: 0.0, seed: 1 }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points < 20 {
            return Err(Error::InvalidConfig(format!("K = {} is below 20", self.points)));
        }
        if self.subjects < 2 || self.visits < 2 {
            return Err(Error::InvalidConfig("at least 2 subjects and 2 visits are required".into()));
        }
        if self.family == Family::Gaussian {
            return Err(Error::InvalidConfig("simulation supports binary and poisson families".into()));
        }
        if !self.b0.is_finite() {
            return Err(Error::InvalidConfig("b0 must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimulationTruth<T> {
    /// `(K + 1) x 4`.
    pub phi: Array2<T>,
    pub psi: Array2<T>,
    pub level1_eigenvalues: Vec<f64>,
    pub level2_eigenvalues: Vec<f64>,
    /// `I x 4`.
    pub xi: Array2<T>,
    /// `(I J) x 4`, curve order matches the dataset.
    pub zeta: Array2<T>,
    pub mean: Vec<T>,
    /// `(I J) x (K + 1)`.
    pub eta: Array2<T>,
}

/// Draws one dataset. All randomness comes from a single stream seeded by
/// `config.seed`, consumed subject by subject.
pub fn simulate<T: Real>(config: &SimulationConfig) -> Result<(MultilevelFunctionalDataset<T>, SimulationTruth<T>)> {
    config.validate()?;
    let grid = SamplingGrid::<T>::unit_interval(config.points)?;
    let k = grid.len();
    let (phi, psi) = basis_matrices(config.basis, grid.points());
    let lam1 = eigenvalue_law(4);
    let lam2 = eigenvalue_law(4);
    let (n_s, n_v) = (config.subjects, config.visits);
    let n_c = n_s * n_v;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut xi = Array2::<T>::zeros((n_s, 4));
    let mut zeta = Array2::<T>::zeros((n_c, 4));
    let mut eta = Array2::<T>::zeros((n_c, k));
    let mut values = Array2::<T>::zeros((n_c, k));
    let b0 = T::lit(config.b0);
    for s in 0..n_s {
        for l in 0..4 {
            xi[[s, l]] = T::lit(std.sample(&mut rng) * lam1[l].sqrt());
        }
        for j in 0..n_v {
            let c = s * n_v + j;
            for m in 0..4 {
                zeta[[c, m]] = T::lit(std.sample(&mut rng) * lam2[m].sqrt());
            }
            for kk in 0..k {
                let mut e = b0;
                for l in 0..4 {
                    e += xi[[s, l]] * phi[[kk, l]];
                }
                for m in 0..4 {
                    e += zeta[[c, m]] * psi[[kk, m]];
                }
                eta[[c, kk]] = e;
                let mu = config.family.mean(e.as_f64());
                values[[c, kk]] = match config.family {
                    Family::Binary => {
                        T::from_count(usize::from(Bernoulli::new(mu.clamp(0.0, 1.0)).expect("probability").sample(&mut rng)))
                    }
                    Family::Poisson => {
                        if mu > 0.0 {
                            T::lit(Poisson::new(mu).map_err(|e| Error::InvalidConfig(e.to_string()))?.sample(&mut rng))
                        } else {
                            T::zero()
                        }
                    }
                    Family::Gaussian => unreachable!("rejected by validate"),
                };
            }
        }
    }
    let subject_ids = (1..=n_s).map(|s| s.to_string()).collect();
    let curve_subjects = (0..n_c).map(|c| c / n_v).collect();
    let curve_visits = (0..n_c).map(|c| (c % n_v + 1).to_string()).collect();
    let data = MultilevelFunctionalDataset::from_dense(grid, config.family, subject_ids, curve_subjects, curve_visits, values)?;
    let truth = SimulationTruth {
        phi,
        psi,
        level1_eigenvalues: lam1,
        level2_eigenvalues: lam2,
        xi,
        zeta,
        mean: vec![b0; k],
        eta,
    };
    Ok((data, truth))
}

/// Sign-aligned integrated squared error `min_± sum_k (f_k ∓ g_k)^2 ds`.
pub fn ise<T: Real>(estimate: &[T], truth: &[T], spacing: T) -> Result<T> {
    if estimate.len() != truth.len() {
        return Err(Error::GridMismatch(format!("{} vs {} points", estimate.len(), truth.len())));
    }
    let (mut plus, mut minus) = (T::zero(), T::zero());
    for (&a, &b) in estimate.iter().zip(truth) {
        plus += (a - b) * (a - b);
        minus += (a + b) * (a + b);
    }
    Ok(plus.min(minus) * spacing)
}

/// Mean squared difference over all cells.
pub fn mse_linear_predictor<T: Real>(eta_hat: &Array2<T>, eta_true: &Array2<T>) -> Result<T> {
    if eta_hat.dim() != eta_true.dim() {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", eta_hat.dim(), eta_true.dim())));
    }
    if eta_hat.is_empty() {
        return Err(Error::GridMismatch("no cells".into()));
    }
    let ss: T = eta_hat.iter().zip(eta_true.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(ss / T::from_count(eta_hat.len()))
}

/// Fraction of ones (binary) or mean count of the observed cells.
pub fn observed_mean<T: Real>(data: &MultilevelFunctionalDataset<T>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for &v in data.values().iter() {
        if !v.is_nan() {
            s += v.as_f64();
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}
