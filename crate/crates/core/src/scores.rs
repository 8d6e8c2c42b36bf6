//! Bayesian estimation of subject and subject-visit scores given fixed
//! eigenfunctions.
//!
//! The global model is
//! `g(E Z_ijk) = mu_0(s_k) + mu_j(s_k) + sum_l xi_il phi_l(s_k) + sum_m zeta_ijm psi_m(s_k)`
//! with `xi_il ~ N(0, sigma_l^2)` and `zeta_ijm ~ N(0, sigma_m^2)`. Scores are
//! sampled by Metropolis-within-Gibbs: one adaptive random-walk block per
//! subject and per subject-visit, with Gibbs (or independence Metropolis)
//! steps for the variances. For gaussian data each subject's scores are
//! drawn jointly from their exact conditional and posterior means are
//! Rao-Blackwellised.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{softplus, Family, MultilevelFunctionalDataset};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve_in_place, cholesky_upper_solve_in_place};
use crate::mfpca::MfpcaDecomposition;
use crate::scalar::Real;

const TARGET_ACCEPTANCE: f64 = 0.3;
const RHAT_LIMIT: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariancePrior {
    InverseGamma { shape: f64, scale: f64 },
    /// Half-Cauchy on the standard deviation.
    HalfCauchy { scale: f64 },
    /// Uniform on the standard deviation.
    Uniform { upper: f64 },
    /// Variances held at the given values (one per component).
    Fixed { values: Vec<f64> },
}

impl Default for VariancePrior {
    fn default() -> Self {
        VariancePrior::InverseGamma { shape: 1.0, scale: 1.0 }
    }
}

impl VariancePrior {
    fn validate(&self, what: &str, n_components: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScoreModel(format!("{what} prior: {msg}")));
        match self {
            VariancePrior::InverseGamma { shape, scale } if !(*shape > 0.0 && *scale > 0.0) => {
                bad("inverse-gamma shape and scale must be positive".into())
            }
            VariancePrior::HalfCauchy { scale } if !(*scale > 0.0) => bad("half-Cauchy scale must be positive".into()),
            VariancePrior::Uniform { upper } if !(*upper > 0.0) => bad("uniform upper bound must be positive".into()),
            VariancePrior::Fixed { values } if values.len() != n_components => {
                bad(format!("{} fixed values for {n_components} components", values.len()))
            }
            VariancePrior::Fixed { values } if values.iter().any(|v| !(*v > 0.0)) => {
                bad("fixed variances must be positive".into())
            }
            _ => Ok(()),
        }
    }

    fn is_fixed(&self) -> bool {
        matches!(self, VariancePrior::Fixed { .. })
    }

    /// One update of a variance with `n` zero-mean normal terms whose
    /// squares sum to `ss`.
    fn update<R: Rng>(&self, component: usize, n: usize, ss: f64, current: f64, rng: &mut R) -> f64 {
        let ss = ss.max(1e-300);
        match self {
            VariancePrior::Fixed { values } => values[component],
            VariancePrior::InverseGamma { shape, scale } => inverse_gamma(shape + 0.5 * n as f64, scale + 0.5 * ss, rng),
            VariancePrior::HalfCauchy { scale } => {
                if n < 2 {
                    return current;
                }
                let proposal = inverse_gamma(0.5 * n as f64 - 0.5, 0.5 * ss, rng);
                let s2 = scale * scale;
                let log_ratio = (1.0 + current / s2).ln() - (1.0 + proposal / s2).ln();
                if rng.random::<f64>().ln() < log_ratio {
                    proposal
                } else {
                    current
                }
            }
            VariancePrior::Uniform { upper } => {
                if n < 2 {
                    return current;
                }
                let proposal = inverse_gamma(0.5 * n as f64 - 0.5, 0.5 * ss, rng);
                if proposal.sqrt() < *upper {
                    proposal
                } else {
                    current
                }
            }
        }
    }
}

fn inverse_gamma<R: Rng>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
    (scale / g).clamp(1e-12, 1e12)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub level1: VariancePrior,
    pub level2: VariancePrior,
    /// Residual variance (gaussian family only).
    pub residual: VariancePrior,
    /// Random-walk increment variance of a refitted mean.
    pub smoothing: VariancePrior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            level1: VariancePrior::default(),
            level2: VariancePrior::default(),
            residual: VariancePrior::default(),
            smoothing: VariancePrior::default(),
        }
    }
}

impl PriorSpec {
    /// The same prior on both score levels.
    pub fn scores(prior: VariancePrior) -> Self {
        Self { level1: prior.clone(), level2: prior, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedEffects {
    /// Plug in the mean estimated before this step.
    #[default]
    OffsetFromStep3,
    /// Re-estimate `mu_0(s_k)` under a first-order random-walk prior.
    RefitPointwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcOptions {
    pub warmup: usize,
    pub iters: usize,
    pub chains: usize,
    pub seed: u64,
}

impl Default for McmcOptions {
    fn default() -> Self {
        Self { warmup: 1000, iters: 1000, chains: 2, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreModelSpec<T> {
    /// `K x L` level-1 eigenfunctions.
    pub phi: Array2<T>,
    /// `K x M` level-2 eigenfunctions.
    pub psi: Array2<T>,
    pub family: Family,
    pub priors: PriorSpec,
    pub fixed_effects: FixedEffects,
    /// `mu_0(s_k)`.
    pub mean: Vec<T>,
    /// `levels x K` visit shifts; may have zero rows.
    pub visit_means: Array2<T>,
    /// 0-based grid indices used for sampling.
    pub downsample: Option<Vec<usize>>,
    /// Subject groups fitted independently.
    pub partition: Option<Vec<Vec<usize>>>,
    /// Starting variances `(level 1, level 2)`.
    pub initial_variances: Option<(Vec<T>, Vec<T>)>,
    /// Riemann weight used to check orthonormality.
    pub spacing: T,
}

impl<T: Real> ScoreModelSpec<T> {
    /// Model built from a decomposition: its eigenfunctions, means and
    /// eigenvalues as starting variances.
    pub fn from_decomposition(decomposition: &MfpcaDecomposition<T>, family: Family) -> Self {
        Self {
            phi: decomposition.level1.eigenfunctions.clone(),
            psi: decomposition.level2.eigenfunctions.clone(),
            family,
            priors: PriorSpec::default(),
            fixed_effects: FixedEffects::default(),
            mean: decomposition.mean.clone(),
            visit_means: decomposition.visit_means.clone(),
            downsample: None,
            partition: None,
            initial_variances: Some((decomposition.level1.eigenvalues.clone(), decomposition.level2.eigenvalues.clone())),
            spacing: decomposition.spacing,
        }
    }

    pub fn n_level1(&self) -> usize {
        self.phi.ncols()
    }

    pub fn n_level2(&self) -> usize {
        self.psi.ncols()
    }

    fn validate(&self, data: &MultilevelFunctionalDataset<T>) -> Result<()> {
        let k = data.grid().len();
        let invalid = |m: String| Err(Error::InvalidScoreModel(m));
        if self.family != data.family() {
            return invalid(format!("model family {} but data family {}", self.family.name(), data.family().name()));
        }
        if self.phi.nrows() != k || self.psi.nrows() != k || self.mean.len() != k {
            return Err(Error::GridMismatch(format!(
                "eigenfunctions have {}/{} points and mean {}, grid {k}",
                self.phi.nrows(),
                self.psi.nrows(),
                self.mean.len()
            )));
        }
        if self.visit_means.nrows() > 0 && self.visit_means.ncols() != k {
            return Err(Error::GridMismatch("visit means do not match the grid".into()));
        }
        if self.n_level1() == 0 || self.n_level2() == 0 {
            return invalid("at least one eigenfunction per level is required".into());
        }
        for (name, f) in [("level-1", &self.phi), ("level-2", &self.psi)] {
            let gram = f.t().dot(f) * self.spacing;
            for ((i, j), &g) in gram.indexed_iter() {
                let target = if i == j { T::one() } else { T::zero() };
                if (g - target).abs() > T::lit(1e-4) {
                    return invalid(format!("{name} eigenfunctions are not orthonormal (Gram[{i},{j}] = {g})"));
                }
            }
        }
        if let Some(idx) = &self.downsample {
            let need = self.n_level1().max(self.n_level2());
            if idx.len() < need {
                return Err(Error::InvalidDownsample(format!("{} points for {need} components", idx.len())));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) || idx.last().is_some_and(|&last| last >= k) {
                return Err(Error::InvalidDownsample("indices must be strictly increasing grid indices".into()));
            }
        }
        if let Some(groups) = &self.partition {
            let mut seen = vec![false; data.n_subjects()];
            for g in groups {
                for &s in g {
                    if s >= seen.len() || std::mem::replace(&mut seen[s], true) {
                        return invalid(format!("partition assigns subject {s} twice or out of range"));
                    }
                }
            }
            if seen.iter().any(|s| !s) {
                return invalid("partition does not cover every subject".into());
            }
        }
        if let Some((a, b)) = &self.initial_variances {
            if a.len() < self.n_level1() || b.len() < self.n_level2() {
                return invalid("initial variances shorter than the component counts".into());
            }
        }
        self.priors.level1.validate("level-1", self.n_level1())?;
        self.priors.level2.validate("level-2", self.n_level2())?;
        self.priors.residual.validate("residual", 1)?;
        self.priors.smoothing.validate("smoothing", 1)?;
        Ok(())
    }
}

/// Per-group posterior summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSummary {
    pub subjects: Vec<usize>,
    pub level1_variances: Vec<f64>,
    pub level2_variances: Vec<f64>,
    pub residual_variance: Option<f64>,
    /// Split-chain R-hat for level-1 then level-2 variances (then residual).
    pub rhat: Vec<f64>,
    pub acceptance_level1: f64,
    pub acceptance_level2: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScoreDiagnostics {
    pub max_rhat: f64,
    /// Set when any variance R-hat exceeds 1.1.
    pub non_convergence: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ScorePosterior<T> {
    /// `I x L`.
    pub level1_mean: Array2<T>,
    pub level1_sd: Array2<T>,
    /// `curves x M`.
    pub level2_mean: Array2<T>,
    pub level2_sd: Array2<T>,
    /// Pooled over groups, weighted by group size.
    pub level1_variances: Vec<T>,
    pub level2_variances: Vec<T>,
    pub residual_variance: Option<T>,
    pub groups: Vec<GroupSummary>,
    /// Posterior-mean `mu_0` used in `eta`.
    pub mean: Vec<T>,
    /// `curves x K` reconstruction at posterior means.
    pub eta: Array2<T>,
    /// `I x M` sample SD over visits of the posterior-mean level-2 scores
    /// (`NaN` for single-visit subjects).
    pub l2e_sd: Array2<T>,
    /// Variance draws per group and chain, `iters x (L + M)`.
    pub variance_draws: Vec<Vec<Array2<f64>>>,
    pub diagnostics: ScoreDiagnostics,
}

/// Seeded near-equal split of `n_subjects` into `ceil(n / group_size)`
/// groups; each group lists its subjects in increasing order.
pub fn partition_subjects(n_subjects: usize, group_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if group_size < 2 {
        return Err(Error::InvalidConfig(format!("group size {group_size} is below 2")));
    }
    if n_subjects == 0 {
        return Ok(Vec::new());
    }
    let n_groups = n_subjects.div_ceil(group_size);
    let mut order: Vec<usize> = (0..n_subjects).collect();
    if n_groups > 1 {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    let base = n_subjects / n_groups;
    let extra = n_subjects % n_groups;
    let mut groups = Vec::with_capacity(n_groups);
    let mut at = 0;
    for g in 0..n_groups {
        let len = base + usize::from(g < extra);
        let mut group = order[at..at + len].to_vec();
        group.sort_unstable();
        groups.push(group);
        at += len;
    }
    Ok(groups)
}

/// Equally spaced subset of `target` indices out of `0..n`.
///
/// When the span divides evenly both endpoints are kept; otherwise, if `n`
/// is a multiple of `target`, every `n / target`-th point ending at the last
/// one; otherwise rounded equally spaced positions including both endpoints.
pub fn downsample_grid(n: usize, target: usize) -> Result<Vec<usize>> {
    if target < 2 {
        return Err(Error::InvalidDownsample(format!("target {target} is below 2")));
    }
    if target > n {
        return Err(Error::InvalidDownsample(format!("target {target} exceeds {n} points")));
    }
    if (n - 1) % (target - 1) == 0 {
        let stride = (n - 1) / (target - 1);
        return Ok((0..target).map(|i| i * stride).collect());
    }
    if n % target == 0 {
        let stride = n / target;
        return Ok((1..=target).map(|i| i * stride - 1).collect());
    }
    let span = (n - 1) as f64 / (target - 1) as f64;
    Ok((0..target).map(|i| (i as f64 * span).round() as usize).collect())
}

/// Split-chain potential scale reduction of one scalar quantity.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let mut halves: Vec<&[f64]> = Vec::new();
    for c in chains {
        let h = c.len() / 2;
        if h >= 2 {
            halves.push(&c[..h]);
            halves.push(&c[c.len() - h..]);
        }
    }
    if halves.len() < 2 {
        return f64::NAN;
    }
    let n = halves.iter().map(|h| h.len()).min().unwrap_or(0) as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / h.len() as f64).collect();
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let m = halves.len() as f64;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (h.len() as f64 - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

struct GroupData<T> {
    subjects: Vec<usize>,
    subject_curves: Vec<Vec<usize>>,
    curves: Vec<usize>,
    curve_subject: Vec<usize>,
    start: Vec<usize>,
    /// Position in the selected grid, per cell.
    pos: Vec<usize>,
    y: Vec<T>,
    offset: Vec<T>,
    /// Cells at each selected grid position.
    cells_at: Vec<Vec<usize>>,
}

struct Model<'a, T> {
    family: Family,
    l: usize,
    m: usize,
    /// Row-major `P x L` and `P x M` basis values at the selected points.
    phi: Vec<T>,
    psi: Vec<T>,
    n_points: usize,
    priors: &'a PriorSpec,
    refit: bool,
    mean: Vec<T>,
    initial: Option<(Vec<T>, Vec<T>)>,
}

fn build_group<T: Real>(
    data: &MultilevelFunctionalDataset<T>,
    spec: &ScoreModelSpec<T>,
    points: &[usize],
    subjects: &[usize],
) -> GroupData<T> {
    let values = data.values();
    let refit = spec.fixed_effects == FixedEffects::RefitPointwise;
    let mut g = GroupData {
        subjects: subjects.to_vec(),
        subject_curves: Vec::with_capacity(subjects.len()),
        curves: Vec::new(),
        curve_subject: Vec::new(),
        start: vec![0],
        pos: Vec::new(),
        y: Vec::new(),
        offset: Vec::new(),
        cells_at: if refit { vec![Vec::new(); points.len()] } else { Vec::new() },
    };
    for (ls, &s) in subjects.iter().enumerate() {
        let mut local = Vec::new();
        for &c in &data.subjects()[s].curves {
            let level = data.curves()[c].visit_level;
            local.push(g.curves.len());
            g.curves.push(c);
            g.curve_subject.push(ls);
            for (p, &k) in points.iter().enumerate() {
                let y = values[[c, k]];
                if y.is_nan() {
                    continue;
                }
                let shift = if level < spec.visit_means.nrows() { spec.visit_means[[level, k]] } else { T::zero() };
                let offset = if refit { shift } else { spec.mean[k] + shift };
                if refit {
                    g.cells_at[p].push(g.y.len());
                }
                g.pos.push(p);
                g.y.push(y);
                g.offset.push(offset);
            }
            g.start.push(g.y.len());
        }
        g.subject_curves.push(local);
    }
    g
}

/// `x^T H x` style accumulation helpers on row-major square buffers.
fn add_outer<T: Real>(h: &mut [T], x: &[T], w: T) {
    let d = x.len();
    for i in 0..d {
        let wi = w * x[i];
        for j in 0..=i {
            h[i * d + j] += wi * x[j];
        }
    }
}

fn mirror_lower<T: Real>(h: &mut [T], d: usize) {
    for i in 0..d {
        for j in 0..i {
            h[j * d + i] = h[i * d + j];
        }
    }
}

fn std_normal<T: Real, R: Rng>(rng: &mut R) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::lit(z)
}

#[inline]
fn cell_loglik<T: Real>(family: Family, y: T, eta: T) -> T {
    match family {
        Family::Binary => y * eta - softplus(eta),
        Family::Poisson => y * eta - eta.exp(),
        Family::Gaussian => {
            let r = y - eta;
            -T::lit(0.5) * r * r
        }
    }
}

struct ChainOutput<T> {
    xi_sum: Vec<T>,
    xi_sq: Vec<T>,
    xi_rb: Vec<T>,
    zeta_sum: Vec<T>,
    zeta_sq: Vec<T>,
    zeta_rb: Vec<T>,
    mu_sum: Vec<T>,
    residual_sum: f64,
    /// iters x (L + M [+ residual] [+ smoothing])
    draws: Array2<f64>,
    acc_xi: f64,
    acc_zeta: f64,
    rao_blackwell: bool,
}

struct ChainState<T> {
    xi: Vec<T>,
    zeta: Vec<T>,
    s2a: Vec<f64>,
    s2b: Vec<f64>,
    s2e: f64,
    mu: Vec<T>,
    tau2: f64,
}

fn initial_state<T: Real, R: Rng>(g: &GroupData<T>, model: &Model<T>, rng: &mut R) -> ChainState<T> {
    let (l, m) = (model.l, model.m);
    let jitter = |v: f64, rng: &mut R| {
        let z: f64 = rng.sample(StandardNormal);
        (v.max(1e-3) * (0.2 * z).exp()).min(1e3)
    };
    let pick = |prior: &VariancePrior, init: Option<&Vec<T>>, i: usize, rng: &mut R| match prior {
        VariancePrior::Fixed { values } => values[i],
        _ => jitter(init.map_or(1.0, |v| v[i].as_f64()), rng),
    };
    let s2a = (0..l).map(|i| pick(&model.priors.level1, model.initial.as_ref().map(|x| &x.0), i, rng)).collect();
    let s2b = (0..m).map(|i| pick(&model.priors.level2, model.initial.as_ref().map(|x| &x.1), i, rng)).collect();
    let s2e = match &model.priors.residual {
        VariancePrior::Fixed { values } => values[0],
        _ => {
            let n = g.y.len().max(1) as f64;
            let mut ss = 0.0;
            for c in 0..g.curves.len() {
                for cell in g.start[c]..g.start[c + 1] {
                    let base = if model.refit { model.mean[g.pos[cell]] } else { T::zero() };
                    ss += (g.y[cell] - g.offset[cell] - base).as_f64().powi(2);
                }
            }
            jitter((0.5 * ss / n).max(1e-6), rng)
        }
    };
    let tau2 = match &model.priors.smoothing {
        VariancePrior::Fixed { values } => values[0],
        _ => 0.01,
    };
    ChainState {
        xi: vec![T::zero(); g.subjects.len() * l],
        zeta: vec![T::zero(); g.curves.len() * m],
        s2a,
        s2b,
        s2e,
        mu: model.mean.clone(),
        tau2,
    }
}

fn cell_eta<T: Real>(g: &GroupData<T>, model: &Model<T>, st: &ChainState<T>, c: usize, cell: usize) -> T {
    let (l, m) = (model.l, model.m);
    let p = g.pos[cell];
    let s = g.curve_subject[c];
    let mut eta = g.offset[cell];
    if model.refit {
        eta += st.mu[p];
    }
    for i in 0..l {
        eta += st.xi[s * l + i] * model.phi[p * l + i];
    }
    for i in 0..m {
        eta += st.zeta[c * m + i] * model.psi[p * m + i];
    }
    eta
}

fn variance_updates<T: Real, R: Rng>(g: &GroupData<T>, model: &Model<T>, st: &mut ChainState<T>, rng: &mut R) {
    let (l, m) = (model.l, model.m);
    let n_s = g.subjects.len();
    let n_c = g.curves.len();
    for i in 0..l {
        let ss: f64 = (0..n_s).map(|s| st.xi[s * l + i].as_f64().powi(2)).sum();
        st.s2a[i] = model.priors.level1.update(i, n_s, ss, st.s2a[i], rng);
    }
    for i in 0..m {
        let ss: f64 = (0..n_c).map(|c| st.zeta[c * m + i].as_f64().powi(2)).sum();
        st.s2b[i] = model.priors.level2.update(i, n_c, ss, st.s2b[i], rng);
    }
    if model.refit && model.n_points > 1 {
        let ss: f64 = st.mu.windows(2).map(|w| (w[1] - w[0]).as_f64().powi(2)).sum();
        st.tau2 = model.priors.smoothing.update(0, model.n_points - 1, ss, st.tau2, rng);
    }
}

/// Joint translation `mu += c * basis_i`, `scores_i -= c` for every component.
/// The linear predictor is unchanged, so `c` has a Gaussian full conditional.
fn translation_moves<T: Real, R: Rng>(model: &Model<T>, st: &mut ChainState<T>, rng: &mut R) {
    let p = model.n_points;
    if p < 2 {
        return;
    }
    for first in [true, false] {
        let (width, basis) = if first { (model.l, &model.phi) } else { (model.m, &model.psi) };
        if width == 0 {
            continue;
        }
        for i in 0..width {
            let var = if first { st.s2a[i] } else { st.s2b[i] };
            let scores = if first { &mut st.xi } else { &mut st.zeta };
            let count = scores.len() / width;
            if count == 0 || var <= 0.0 {
                continue;
            }
            let sum: f64 = (0..count).map(|s| scores[s * width + i].as_f64()).sum();
            let (mut dd, mut dm) = (0.0, 0.0);
            for k in 1..p {
                let d_phi = (basis[k * width + i] - basis[(k - 1) * width + i]).as_f64();
                dd += d_phi * d_phi;
                dm += d_phi * (st.mu[k] - st.mu[k - 1]).as_f64();
            }
            let prec = count as f64 / var + dd / st.tau2;
            let centre = (sum / var - dm / st.tau2) / prec;
            let z: f64 = rng.sample(StandardNormal);
            let c = T::lit(centre + z / prec.sqrt());
            for s in 0..count {
                scores[s * width + i] -= c;
            }
            for k in 0..p {
                st.mu[k] += c * basis[k * width + i];
            }
        }
    }
}

/// Random-walk prior contribution of `mu[p]` taking value `v`.
fn rw_log_prior<T: Real>(mu: &[T], p: usize, v: T, tau2: f64) -> f64 {
    let mut s = 0.0;
    if p > 0 {
        s += (v - mu[p - 1]).as_f64().powi(2);
    }
    if p + 1 < mu.len() {
        s += (mu[p + 1] - v).as_f64().powi(2);
    }
    -0.5 * s / tau2
}

fn run_chain<T: Real>(g: &GroupData<T>, model: &Model<T>, mcmc: &McmcOptions, seed: (u64, u64)) -> ChainOutput<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
    rng.set_stream(seed.1);
    let mut st = initial_state(g, model, &mut rng);
    match model.family {
        Family::Gaussian => run_gaussian(g, model, mcmc, &mut st, &mut rng),
        _ => run_glmm(g, model, mcmc, &mut st, &mut rng),
    }
}

fn n_extra(model: &Model<impl Real>) -> usize {
    usize::from(model.family == Family::Gaussian) + usize::from(model.refit)
}

fn record_variances<T: Real>(draws: &mut Array2<f64>, t: usize, model: &Model<T>, st: &ChainState<T>) {
    let (l, m) = (model.l, model.m);
    for i in 0..l {
        draws[[t, i]] = st.s2a[i];
    }
    for i in 0..m {
        draws[[t, l + i]] = st.s2b[i];
    }
    let mut col = l + m;
    if model.family == Family::Gaussian {
        draws[[t, col]] = st.s2e;
        col += 1;
    }
    if model.refit {
        draws[[t, col]] = st.tau2;
    }
}

fn empty_output<T: Real>(g: &GroupData<T>, model: &Model<T>, iters: usize, rao_blackwell: bool) -> ChainOutput<T> {
    let nx = g.subjects.len() * model.l;
    let nz = g.curves.len() * model.m;
    ChainOutput {
        xi_sum: vec![T::zero(); nx],
        xi_sq: vec![T::zero(); nx],
        xi_rb: vec![T::zero(); nx],
        zeta_sum: vec![T::zero(); nz],
        zeta_sq: vec![T::zero(); nz],
        zeta_rb: vec![T::zero(); nz],
        mu_sum: vec![T::zero(); model.n_points],
        residual_sum: 0.0,
        draws: Array2::zeros((iters, model.l + model.m + n_extra(model))),
        acc_xi: 0.0,
        acc_zeta: 0.0,
        rao_blackwell,
    }
}

fn accumulate<T: Real>(out: &mut ChainOutput<T>, st: &ChainState<T>) {
    for (i, &x) in st.xi.iter().enumerate() {
        out.xi_sum[i] += x;
        out.xi_sq[i] += x * x;
    }
    for (i, &z) in st.zeta.iter().enumerate() {
        out.zeta_sum[i] += z;
        out.zeta_sq[i] += z * z;
    }
    for (i, &v) in st.mu.iter().enumerate() {
        out.mu_sum[i] += v;
    }
    out.residual_sum += st.s2e;
}

/// Adaptive block random-walk Metropolis for binary and poisson data.
fn run_glmm<T: Real>(
    g: &GroupData<T>,
    model: &Model<T>,
    mcmc: &McmcOptions,
    st: &mut ChainState<T>,
    rng: &mut ChaCha8Rng,
) -> ChainOutput<T> {
    let (l, m) = (model.l, model.m);
    let family = model.family;
    let n_s = g.subjects.len();
    let n_c = g.curves.len();
    let n_cells = g.y.len();

    let mut eta: Vec<T> = vec![T::zero(); n_cells];
    let mut ll: Vec<T> = vec![T::zero(); n_cells];
    for c in 0..n_c {
        for cell in g.start[c]..g.start[c + 1] {
            eta[cell] = cell_eta(g, model, st, c, cell);
            ll[cell] = cell_loglik(family, g.y[cell], eta[cell]);
        }
    }

    // proposal factors: lower Cholesky of the conditional precision
    let mut chol_xi = vec![T::zero(); n_s * l * l];
    let mut chol_zeta = vec![T::zero(); n_c * m * m];
    let mut log_scale_xi = vec![(2.38 / (l as f64).sqrt()).ln(); n_s];
    let mut log_scale_zeta = vec![(2.38 / (m as f64).sqrt()).ln(); n_c];
    let mut log_scale_mu = vec![(0.5f64).ln(); model.n_points];

    let refresh = |eta: &[T], st: &ChainState<T>, chol_xi: &mut [T], chol_zeta: &mut [T]| {
        let weight = |cell: usize| family.score_and_weight(g.y[cell], eta[cell]).1;
        for s in 0..n_s {
            let h = &mut chol_xi[s * l * l..(s + 1) * l * l];
            h.iter_mut().for_each(|v| *v = T::zero());
            for &c in &g.subject_curves[s] {
                for cell in g.start[c]..g.start[c + 1] {
                    let p = g.pos[cell];
                    add_outer(h, &model.phi[p * l..(p + 1) * l], weight(cell));
                }
            }
            for i in 0..l {
                h[i * l + i] += T::lit(1.0 / st.s2a[i]);
            }
            mirror_lower(h, l);
            if cholesky_in_place(h, l).is_none() {
                h.iter_mut().for_each(|v| *v = T::zero());
                for i in 0..l {
                    h[i * l + i] = T::lit(1.0 / st.s2a[i]).sqrt();
                }
            }
        }
        for c in 0..n_c {
            let h = &mut chol_zeta[c * m * m..(c + 1) * m * m];
            h.iter_mut().for_each(|v| *v = T::zero());
            for cell in g.start[c]..g.start[c + 1] {
                let p = g.pos[cell];
                add_outer(h, &model.psi[p * m..(p + 1) * m], weight(cell));
            }
            for i in 0..m {
                h[i * m + i] += T::lit(1.0 / st.s2b[i]);
            }
            mirror_lower(h, m);
            if cholesky_in_place(h, m).is_none() {
                h.iter_mut().for_each(|v| *v = T::zero());
                for i in 0..m {
                    h[i * m + i] = T::lit(1.0 / st.s2b[i]).sqrt();
                }
            }
        }
    };
    refresh(&eta, st, &mut chol_xi, &mut chol_zeta);
    let mut next_refresh = 25usize;

    let mut out = empty_output(g, model, mcmc.iters, false);
    let mut scratch_eta: Vec<T> = Vec::new();
    let mut scratch_ll: Vec<T> = Vec::new();
    let mut step = vec![T::zero(); l.max(m)];
    let total = mcmc.warmup + mcmc.iters;

    for t in 0..total {
        let warm = t < mcmc.warmup;
        let gamma = ((t + 1) as f64).powf(-0.6);
        let mut acc_x = 0usize;
        let mut acc_z = 0usize;

        for s in 0..n_s {
            for v in step.iter_mut().take(l) {
                *v = std_normal(rng);
            }
            cholesky_upper_solve_in_place(&chol_xi[s * l * l..(s + 1) * l * l], l, &mut step[..l]);
            let scale = T::lit(log_scale_xi[s].exp());
            let mut diff = 0.0;
            for i in 0..l {
                step[i] *= scale;
                let old = st.xi[s * l + i];
                let new = old + step[i];
                diff -= 0.5 * ((new * new - old * old).as_f64()) / st.s2a[i];
            }
            scratch_eta.clear();
            scratch_ll.clear();
            for &c in &g.subject_curves[s] {
                for cell in g.start[c]..g.start[c + 1] {
                    let p = g.pos[cell];
                    let mut e = eta[cell];
                    for i in 0..l {
                        e += step[i] * model.phi[p * l + i];
                    }
                    let lv = cell_loglik(family, g.y[cell], e);
                    diff += (lv - ll[cell]).as_f64();
                    scratch_eta.push(e);
                    scratch_ll.push(lv);
                }
            }
            let accept = diff.is_finite() && (diff >= 0.0 || rng.random::<f64>().ln() < diff);
            if accept {
                acc_x += 1;
                for i in 0..l {
                    st.xi[s * l + i] += step[i];
                }
                let mut at = 0;
                for &c in &g.subject_curves[s] {
                    for cell in g.start[c]..g.start[c + 1] {
                        eta[cell] = scratch_eta[at];
                        ll[cell] = scratch_ll[at];
                        at += 1;
                    }
                }
            }
            if warm {
                log_scale_xi[s] += gamma * (f64::from(u8::from(accept)) - TARGET_ACCEPTANCE);
            }
        }

        for c in 0..n_c {
            for v in step.iter_mut().take(m) {
                *v = std_normal(rng);
            }
            cholesky_upper_solve_in_place(&chol_zeta[c * m * m..(c + 1) * m * m], m, &mut step[..m]);
            let scale = T::lit(log_scale_zeta[c].exp());
            let mut diff = 0.0;
            for i in 0..m {
                step[i] *= scale;
                let old = st.zeta[c * m + i];
                let new = old + step[i];
                diff -= 0.5 * ((new * new - old * old).as_f64()) / st.s2b[i];
            }
            scratch_eta.clear();
            scratch_ll.clear();
            for cell in g.start[c]..g.start[c + 1] {
                let p = g.pos[cell];
                let mut e = eta[cell];
                for i in 0..m {
                    e += step[i] * model.psi[p * m + i];
                }
                let lv = cell_loglik(family, g.y[cell], e);
                diff += (lv - ll[cell]).as_f64();
                scratch_eta.push(e);
                scratch_ll.push(lv);
            }
            let accept = diff.is_finite() && (diff >= 0.0 || rng.random::<f64>().ln() < diff);
            if accept {
                acc_z += 1;
                for i in 0..m {
                    st.zeta[c * m + i] += step[i];
                }
                let base = g.start[c];
                for (at, cell) in (base..g.start[c + 1]).enumerate() {
                    eta[cell] = scratch_eta[at];
                    ll[cell] = scratch_ll[at];
                }
            }
            if warm {
                log_scale_zeta[c] += gamma * (f64::from(u8::from(accept)) - TARGET_ACCEPTANCE);
            }
        }

        if model.refit {
            for p in 0..model.n_points {
                let cells = &g.cells_at[p];
                if cells.is_empty() {
                    continue;
                }
                let info: f64 = cells.iter().map(|&cell| family.score_and_weight(g.y[cell], eta[cell]).1.as_f64()).sum();
                let sd = 1.0 / (info + 1.0 / st.tau2).sqrt();
                let z: f64 = rng.sample(StandardNormal);
                let delta = T::lit(z * sd * log_scale_mu[p].exp());
                let old = st.mu[p];
                let mut diff = rw_log_prior(&st.mu, p, old + delta, st.tau2) - rw_log_prior(&st.mu, p, old, st.tau2);
                for &cell in cells {
                    diff += (cell_loglik(family, g.y[cell], eta[cell] + delta) - ll[cell]).as_f64();
                }
                let accept = diff.is_finite() && (diff >= 0.0 || rng.random::<f64>().ln() < diff);
                if accept {
                    st.mu[p] = old + delta;
                    for &cell in cells {
                        eta[cell] += delta;
                        ll[cell] = cell_loglik(family, g.y[cell], eta[cell]);
                    }
                }
                if warm {
                    log_scale_mu[p] += gamma * (f64::from(u8::from(accept)) - 0.44);
                }
            }
        }

        if model.refit {
            translation_moves(model, st, rng);
        }
        variance_updates(g, model, st, rng);

        if warm && t + 1 == next_refresh && t + 1 < mcmc.warmup {
            refresh(&eta, st, &mut chol_xi, &mut chol_zeta);
            next_refresh *= 2;
        }
        if !warm {
            let r = t - mcmc.warmup;
            accumulate(&mut out, st);
            record_variances(&mut out.draws, r, model, st);
            out.acc_xi += acc_x as f64 / n_s.max(1) as f64;
            out.acc_zeta += acc_z as f64 / n_c.max(1) as f64;
        }
    }
    if mcmc.iters > 0 {
        out.acc_xi /= mcmc.iters as f64;
        out.acc_zeta /= mcmc.iters as f64;
    }
    out
}

/// Exact per-subject conjugate Gibbs for gaussian data.
fn run_gaussian<T: Real>(
    g: &GroupData<T>,
    model: &Model<T>,
    mcmc: &McmcOptions,
    st: &mut ChainState<T>,
    rng: &mut ChaCha8Rng,
) -> ChainOutput<T> {
    let (l, m) = (model.l, model.m);
    let n_s = g.subjects.len();
    let n_cells = g.y.len();

    // data cross-products; per subject A = sum phi phi', per curve B = sum phi psi', C = sum psi psi'
    let mut a_blocks = vec![T::zero(); n_s * l * l];
    let mut b_blocks = vec![T::zero(); g.curves.len() * l * m];
    let mut c_blocks = vec![T::zero(); g.curves.len() * m * m];
    for s in 0..n_s {
        for &c in &g.subject_curves[s] {
            for cell in g.start[c]..g.start[c + 1] {
                let p = g.pos[cell];
                let f = &model.phi[p * l..(p + 1) * l];
                let h = &model.psi[p * m..(p + 1) * m];
                for i in 0..l {
                    for j in 0..l {
                        a_blocks[s * l * l + i * l + j] += f[i] * f[j];
                    }
                    for j in 0..m {
                        b_blocks[c * l * m + i * m + j] += f[i] * h[j];
                    }
                }
                for i in 0..m {
                    for j in 0..m {
                        c_blocks[c * m * m + i * m + j] += h[i] * h[j];
                    }
                }
            }
        }
    }

    let mut out = empty_output(g, model, mcmc.iters, true);
    let total = mcmc.warmup + mcmc.iters;
    let mut q: Vec<T> = Vec::new();
    let mut rhs: Vec<T> = Vec::new();
    let mut draw: Vec<T> = Vec::new();
    let mut cond_xi = vec![T::zero(); n_s * l];
    let mut cond_zeta = vec![T::zero(); g.curves.len() * m];

    for t in 0..total {
        let inv_e = T::lit(1.0 / st.s2e);
        for s in 0..n_s {
            let curves = &g.subject_curves[s];
            let d = l + curves.len() * m;
            q.clear();
            q.resize(d * d, T::zero());
            rhs.clear();
            rhs.resize(d, T::zero());
            for i in 0..l {
                for j in 0..l {
                    q[i * d + j] = a_blocks[s * l * l + i * l + j] * inv_e;
                }
                q[i * d + i] += T::lit(1.0 / st.s2a[i]);
            }
            for (local, &c) in curves.iter().enumerate() {
                let o = l + local * m;
                for i in 0..l {
                    for j in 0..m {
                        let v = b_blocks[c * l * m + i * m + j] * inv_e;
                        q[i * d + o + j] = v;
                        q[(o + j) * d + i] = v;
                    }
                }
                for i in 0..m {
                    for j in 0..m {
                        q[(o + i) * d + o + j] = c_blocks[c * m * m + i * m + j] * inv_e;
                    }
                    q[(o + i) * d + o + i] += T::lit(1.0 / st.s2b[i]);
                }
                for cell in g.start[c]..g.start[c + 1] {
                    let p = g.pos[cell];
                    let mut r = g.y[cell] - g.offset[cell];
                    if model.refit {
                        r -= st.mu[p];
                    }
                    let r = r * inv_e;
                    for i in 0..l {
                        rhs[i] += model.phi[p * l + i] * r;
                    }
                    for i in 0..m {
                        rhs[o + i] += model.psi[p * m + i] * r;
                    }
                }
            }
            if cholesky_in_place(&mut q, d).is_none() {
                continue;
            }
            cholesky_solve_in_place(&q, d, &mut rhs);
            draw.clear();
            draw.extend((0..d).map(|_| std_normal::<T, _>(rng)));
            cholesky_upper_solve_in_place(&q, d, &mut draw);
            for i in 0..l {
                cond_xi[s * l + i] = rhs[i];
                st.xi[s * l + i] = rhs[i] + draw[i];
            }
            for (local, &c) in curves.iter().enumerate() {
                let o = l + local * m;
                for i in 0..m {
                    cond_zeta[c * m + i] = rhs[o + i];
                    st.zeta[c * m + i] = rhs[o + i] + draw[o + i];
                }
            }
        }

        if model.refit {
            for p in 0..model.n_points {
                let cells = &g.cells_at[p];
                let mut prec = cells.len() as f64 / st.s2e;
                let mut num = 0.0;
                for &cell in cells {
                    let c = g.start.partition_point(|&b| b <= cell) - 1;
                    let others = cell_eta(g, model, st, c, cell) - st.mu[p];
                    num += (g.y[cell] - others).as_f64() / st.s2e;
                }
                if p > 0 {
                    prec += 1.0 / st.tau2;
                    num += st.mu[p - 1].as_f64() / st.tau2;
                }
                if p + 1 < model.n_points {
                    prec += 1.0 / st.tau2;
                    num += st.mu[p + 1].as_f64() / st.tau2;
                }
                if prec > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    st.mu[p] = T::lit(num / prec + z / prec.sqrt());
                }
            }
        }

        if model.refit {
            translation_moves(model, st, rng);
        }
        variance_updates(g, model, st, rng);
        let mut rss = 0.0;
        for c in 0..g.curves.len() {
            for cell in g.start[c]..g.start[c + 1] {
                rss += (g.y[cell] - cell_eta(g, model, st, c, cell)).as_f64().powi(2);
            }
        }
        st.s2e = model.priors.residual.update(0, n_cells, rss, st.s2e, rng);

        if t >= mcmc.warmup {
            let r = t - mcmc.warmup;
            accumulate(&mut out, st);
            for (acc, &v) in out.xi_rb.iter_mut().zip(&cond_xi) {
                *acc += v;
            }
            for (acc, &v) in out.zeta_rb.iter_mut().zip(&cond_zeta) {
                *acc += v;
            }
            record_variances(&mut out.draws, r, model, st);
        }
    }
    out.acc_xi = 1.0;
    out.acc_zeta = 1.0;
    out
}

/// Samples the posterior of the global model and summarises it.
pub fn fit_scores<T: Real>(
    data: &MultilevelFunctionalDataset<T>,
    spec: &ScoreModelSpec<T>,
    mcmc: &McmcOptions,
) -> Result<ScorePosterior<T>> {
    spec.validate(data)?;
    if mcmc.chains == 0 || mcmc.iters < 4 {
        return Err(Error::InvalidConfig("at least one chain and four post-warmup draws are required".into()));
    }
    let k = data.grid().len();
    let points: Vec<usize> = spec.downsample.clone().unwrap_or_else(|| (0..k).collect());
    let (l, m) = (spec.n_level1(), spec.n_level2());
    let refit = spec.fixed_effects == FixedEffects::RefitPointwise;
    let gather = |f: &Array2<T>, d: usize| -> Vec<T> {
        let mut v = Vec::with_capacity(points.len() * d);
        for &kk in &points {
            v.extend(f.row(kk).iter().copied());
        }
        v
    };
    let model = Model {
        family: spec.family,
        l,
        m,
        phi: gather(&spec.phi, l),
        psi: gather(&spec.psi, m),
        n_points: points.len(),
        priors: &spec.priors,
        refit,
        mean: points.iter().map(|&kk| spec.mean[kk]).collect(),
        initial: spec.initial_variances.clone(),
    };
    let groups: Vec<Vec<usize>> = spec.partition.clone().unwrap_or_else(|| vec![(0..data.n_subjects()).collect()]);
    let group_data: Vec<GroupData<T>> = groups.iter().map(|g| build_group(data, spec, &points, g)).collect();

    let tasks: Vec<(usize, usize)> =
        (0..group_data.len()).flat_map(|gi| (0..mcmc.chains).map(move |ch| (gi, ch))).collect();
    let outputs: Vec<ChainOutput<T>> = tasks
        .par_iter()
        .map(|&(gi, ch)| run_chain(&group_data[gi], &model, mcmc, (mcmc.seed, ((gi as u64) << 32) | ch as u64)))
        .collect();

    let n_s = data.n_subjects();
    let n_c = data.n_curves();
    let mut post = ScorePosterior {
        level1_mean: Array2::zeros((n_s, l)),
        level1_sd: Array2::zeros((n_s, l)),
        level2_mean: Array2::zeros((n_c, m)),
        level2_sd: Array2::zeros((n_c, m)),
        level1_variances: vec![T::zero(); l],
        level2_variances: vec![T::zero(); m],
        residual_variance: None,
        groups: Vec::with_capacity(groups.len()),
        mean: spec.mean.clone(),
        eta: Array2::zeros((n_c, k)),
        l2e_sd: Array2::from_elem((n_s, m), T::nan()),
        variance_draws: Vec::with_capacity(groups.len()),
        diagnostics: ScoreDiagnostics::default(),
    };

    let total_draws = T::from_count(mcmc.chains * mcmc.iters);
    let mut mu_total = vec![T::zero(); points.len()];
    let mut residual_pool = 0.0;
    let mut max_rhat: f64 = 1.0;
    for (gi, g) in group_data.iter().enumerate() {
        let outs = &outputs[gi * mcmc.chains..(gi + 1) * mcmc.chains];
        let summarise = |sum: fn(&ChainOutput<T>) -> &Vec<T>, sq: fn(&ChainOutput<T>) -> &Vec<T>, i: usize| {
            let s: T = outs.iter().map(|o| sum(o)[i]).sum();
            let q: T = outs.iter().map(|o| sq(o)[i]).sum();
            let mean = s / total_draws;
            let var = (q / total_draws - mean * mean).max(T::zero());
            (mean, var.sqrt())
        };
        let rb = outs[0].rao_blackwell;
        for (ls, &s) in g.subjects.iter().enumerate() {
            for i in 0..l {
                let (mean, sd) = summarise(|o| &o.xi_sum, |o| &o.xi_sq, ls * l + i);
                let mean = if rb { summarise(|o| &o.xi_rb, |o| &o.xi_sq, ls * l + i).0 } else { mean };
                post.level1_mean[[s, i]] = mean;
                post.level1_sd[[s, i]] = sd;
            }
        }
        for (lc, &c) in g.curves.iter().enumerate() {
            for i in 0..m {
                let (mean, sd) = summarise(|o| &o.zeta_sum, |o| &o.zeta_sq, lc * m + i);
                let mean = if rb { summarise(|o| &o.zeta_rb, |o| &o.zeta_sq, lc * m + i).0 } else { mean };
                post.level2_mean[[c, i]] = mean;
                post.level2_sd[[c, i]] = sd;
            }
        }
        for (p, acc) in mu_total.iter_mut().enumerate() {
            let s: T = outs.iter().map(|o| o.mu_sum[p]).sum();
            *acc += s / total_draws * T::from_count(g.subjects.len());
        }

        let n_cols = outs[0].draws.ncols();
        let col_mean = |j: usize| outs.iter().map(|o| o.draws.column(j).sum()).sum::<f64>() / (mcmc.chains * mcmc.iters) as f64;
        let mut rhat = Vec::with_capacity(n_cols);
        let n_rhat = l + m + usize::from(spec.family == Family::Gaussian);
        for j in 0..n_rhat {
            let fixed = if j < l {
                spec.priors.level1.is_fixed()
            } else if j < l + m {
                spec.priors.level2.is_fixed()
            } else {
                spec.priors.residual.is_fixed()
            };
            let r = if fixed {
                1.0
            } else {
                let chains: Vec<Vec<f64>> = outs.iter().map(|o| o.draws.column(j).to_vec()).collect();
                split_rhat(&chains)
            };
            if r > RHAT_LIMIT || r.is_nan() {
                let name = if j < l {
                    format!("level-1 variance {}", j + 1)
                } else if j < l + m {
                    format!("level-2 variance {}", j - l + 1)
                } else {
                    "residual variance".to_string()
                };
                post.diagnostics.warnings.push(format!("NonConvergenceWarning: group {} {name} has R-hat {r:.3}", gi + 1));
                post.diagnostics.non_convergence = true;
            }
            if r.is_finite() {
                max_rhat = max_rhat.max(r);
            }
            rhat.push(r);
        }
        let level1_variances: Vec<f64> = (0..l).map(col_mean).collect();
        let level2_variances: Vec<f64> = (l..l + m).map(col_mean).collect();
        let residual = (spec.family == Family::Gaussian).then(|| col_mean(l + m));
        let weight = g.subjects.len() as f64 / n_s as f64;
        for (acc, &v) in post.level1_variances.iter_mut().zip(&level1_variances) {
            *acc += T::lit(v * weight);
        }
        for (acc, &v) in post.level2_variances.iter_mut().zip(&level2_variances) {
            *acc += T::lit(v * weight);
        }
        if let Some(r) = residual {
            residual_pool += r * weight;
        }
        let acc_mean = |f: fn(&ChainOutput<T>) -> f64| outs.iter().map(f).sum::<f64>() / outs.len() as f64;
        post.groups.push(GroupSummary {
            subjects: g.subjects.clone(),
            level1_variances,
            level2_variances,
            residual_variance: residual,
            rhat,
            acceptance_level1: acc_mean(|o| o.acc_xi),
            acceptance_level2: acc_mean(|o| o.acc_zeta),
        });
        post.variance_draws.push(outs.iter().map(|o| o.draws.slice(ndarray::s![.., ..l + m]).to_owned()).collect());
    }
    if spec.family == Family::Gaussian {
        post.residual_variance = Some(T::lit(residual_pool));
    }
    post.diagnostics.max_rhat = max_rhat;

    if refit {
        let inv = T::one() / T::from_count(n_s);
        let fitted: Vec<T> = mu_total.iter().map(|&v| v * inv).collect();
        post.mean = interpolate(&points, &fitted, k);
    }

    for (c, curve) in data.curves().iter().enumerate() {
        let s = curve.subject;
        for kk in 0..k {
            let shift = if curve.visit_level < spec.visit_means.nrows() {
                spec.visit_means[[curve.visit_level, kk]]
            } else {
                T::zero()
            };
            let mut e = post.mean[kk] + shift;
            for i in 0..l {
                e += post.level1_mean[[s, i]] * spec.phi[[kk, i]];
            }
            for i in 0..m {
                e += post.level2_mean[[c, i]] * spec.psi[[kk, i]];
            }
            post.eta[[c, kk]] = e;
        }
    }
    post.l2e_sd = l2e_sd(&post.level2_mean, data);
    Ok(post)
}

/// Linear interpolation of values at increasing `points` onto `0..k`,
/// held constant beyond the ends.
fn interpolate<T: Real>(points: &[usize], values: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k];
    let mut seg = 0;
    for (x, o) in out.iter_mut().enumerate() {
        if x <= points[0] {
            *o = values[0];
            continue;
        }
        if x >= points[points.len() - 1] {
            *o = values[values.len() - 1];
            continue;
        }
        while points[seg + 1] < x {
            seg += 1;
        }
        let (x0, x1) = (points[seg] as f64, points[seg + 1] as f64);
        let w = T::lit((x as f64 - x0) / (x1 - x0));
        *o = values[seg] + w * (values[seg + 1] - values[seg]);
    }
    out
}

/// Per-subject sample SD over visits of the level-2 scores.
pub fn l2e_sd<T: Real>(level2: &Array2<T>, data: &MultilevelFunctionalDataset<T>) -> Array2<T> {
    let m = level2.ncols();
    let mut out = Array2::from_elem((data.n_subjects(), m), T::nan());
    for (s, subject) in data.subjects().iter().enumerate() {
        let n = subject.curves.len();
        if n < 2 {
            continue;
        }
        for i in 0..m {
            let mean = subject.curves.iter().map(|&c| level2[[c, i]]).sum::<T>() / T::from_count(n);
            let ss: T = subject.curves.iter().map(|&c| (level2[[c, i]] - mean).powi(2)).sum();
            out[[s, i]] = (ss / T::from_count(n - 1)).sqrt();
        }
    }
    out
}
