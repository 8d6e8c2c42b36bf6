//! Per-bin generalized linear mixed models with nested random intercepts
//!
//! ```text
//! g(E[Z | bin k]) = mu0 + mu_j + a_i + b_ij,   a_i ~ N(0, s2_a),  b_ij ~ N(0, s2_b)
//! ```
//!
//! fitted by the Laplace approximation. For fixed variance components the
//! conditional modes of `(fixed effects, a, b)` are found by penalised
//! Newton iterations; the Hessian is an arrow matrix per subject (one `a_i`
//! coupled to its own `b_ij`s), so each Newton step eliminates the `b`s, then
//! the `a`s, and solves a `p x p` system for the fixed effects. The variance
//! components are optimised on the log scale with a bounded Nelder–Mead.
//!
//! Within a curve every observation shares the same design row, so all
//! Newton quantities reduce to per-curve sums of scores and weights.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{logit, validate_dataset, BinPlan, Family, MultilevelFunctionalDataset};
use crate::error::{Error as CrateError, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve_in_place};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalGlmmOptions {
    /// Outer (variance component) iterations.
    pub max_iter: usize,
    /// Relative change of the outer objective at convergence.
    pub tol: f64,
    /// Estimate visit-level fixed shifts `mu_jk` (non-exchangeable visits).
    pub visit_fixed_effects: bool,
    pub variance_floor: f64,
    pub max_inner_iter: usize,
}

impl Default for LocalGlmmOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-6, visit_fixed_effects: false, variance_floor: 1e-10, max_inner_iter: 50 }
    }
}

/// Estimates flagged within this factor of the variance floor are treated as
/// boundary (singular) fits and snapped to the floor.
const SINGULAR_FACTOR: f64 = 100.0;
const VARIANCE_CEILING: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinStatus {
    Converged,
    SingularA,
    SingularB,
    SingularBoth,
    /// Constant response; fixed intercept clamped, random effects zero.
    Degenerate,
    /// Too few subjects or no replication; pooled intercept only.
    Insufficient,
    /// Outer optimiser hit its iteration cap; last iterate used.
    Failed,
}

impl BinStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            BinStatus::Converged => "converged",
            BinStatus::SingularA => "singular_a",
            BinStatus::SingularB => "singular_b",
            BinStatus::SingularBoth => "singular_both",
            BinStatus::Degenerate => "degenerate",
            BinStatus::Insufficient => "insufficient",
            BinStatus::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "converged" => BinStatus::Converged,
            "singular_a" => BinStatus::SingularA,
            "singular_b" => BinStatus::SingularB,
            "singular_both" => BinStatus::SingularBoth,
            "degenerate" => BinStatus::Degenerate,
            "insufficient" => BinStatus::Insufficient,
            "failed" => BinStatus::Failed,
            _ => return None,
        })
    }

    pub fn is_singular(self) -> bool {
        matches!(self, BinStatus::SingularA | BinStatus::SingularB | BinStatus::SingularBoth)
    }

    pub fn is_failure(self) -> bool {
        matches!(self, BinStatus::Failed | BinStatus::Insufficient)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegenerateReason {
    AllZero,
    AllOne,
    Constant,
}

#[derive(Debug, Clone, Error)]
pub enum LocalFitError<T> {
    #[error("degenerate bin: {0:?}")]
    DegenerateBin(DegenerateReason),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("variance components did not converge")]
    ConvergenceFailure(Box<LocalFit<T>>),
}

/// Observations of one bin grouped by subject, then by subject-visit curve.
#[derive(Debug, Clone, Default)]
pub struct BinData<T> {
    y: Vec<T>,
    curve_start: Vec<usize>,
    curve_index: Vec<usize>,
    curve_level: Vec<usize>,
    subject_start: Vec<usize>,
    subject_index: Vec<usize>,
}

impl<T: Real> BinData<T> {
    /// Groups `(subject, curve, visit_level, y)` records. Subjects and curves
    /// keep their order of first appearance; curve ids must be unique
    /// across subjects.
    pub fn from_records(records: &[(usize, usize, usize, T)]) -> Self {
        let mut subjects: Vec<usize> = Vec::new();
        let mut per_subject: Vec<Vec<usize>> = Vec::new();
        let mut curve_pos: std::collections::HashMap<usize, (usize, usize)> = Default::default();
        let mut curve_obs: Vec<Vec<T>> = Vec::new();
        let mut curve_meta: Vec<(usize, usize)> = Vec::new();
        let mut subject_pos: std::collections::HashMap<usize, usize> = Default::default();
        for &(s, c, level, y) in records {
            let sp = *subject_pos.entry(s).or_insert_with(|| {
                subjects.push(s);
                per_subject.push(Vec::new());
                subjects.len() - 1
            });
            let (_, cp) = *curve_pos.entry(c).or_insert_with(|| {
                curve_obs.push(Vec::new());
                curve_meta.push((c, level));
                per_subject[sp].push(curve_obs.len() - 1);
                (sp, curve_obs.len() - 1)
            });
            curve_obs[cp].push(y);
        }
        let mut out = BinData::default();
        out.subject_start.push(0);
        out.curve_start.push(0);
        for (sp, curves) in per_subject.iter().enumerate() {
            out.subject_index.push(subjects[sp]);
            for &cp in curves {
                out.y.extend_from_slice(&curve_obs[cp]);
                out.curve_start.push(out.y.len());
                out.curve_index.push(curve_meta[cp].0);
                out.curve_level.push(curve_meta[cp].1);
            }
            out.subject_start.push(out.curve_index.len());
        }
        out
    }

    /// Non-missing observations of `data` at the grid indices of `bin`.
    pub fn from_dataset(data: &MultilevelFunctionalDataset<T>, bin: &[usize]) -> Self {
        let values = data.values();
        let mut out = BinData::default();
        out.subject_start.push(0);
        out.curve_start.push(0);
        for (s, subject) in data.subjects().iter().enumerate() {
            let before = out.curve_index.len();
            for &c in &subject.curves {
                let start = out.y.len();
                for &k in bin {
                    let v = values[[c, k]];
                    if !v.is_nan() {
                        out.y.push(v);
                    }
                }
                if out.y.len() > start {
                    out.curve_start.push(out.y.len());
                    out.curve_index.push(c);
                    out.curve_level.push(data.curves()[c].visit_level);
                }
            }
            if out.curve_index.len() > before {
                out.subject_index.push(s);
                out.subject_start.push(out.curve_index.len());
            }
        }
        out
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_index.len()
    }

    pub fn n_curves(&self) -> usize {
        self.curve_index.len()
    }

    pub fn responses(&self) -> &[T] {
        &self.y
    }

    /// `(subject id, curve id, visit level, y)` per observation, in storage order.
    pub fn records(&self) -> Vec<(usize, usize, usize, T)> {
        let mut out = Vec::with_capacity(self.y.len());
        for sp in 0..self.n_subjects() {
            for cp in self.subject_start[sp]..self.subject_start[sp + 1] {
                for r in self.curve_start[cp]..self.curve_start[cp + 1] {
                    out.push((self.subject_index[sp], self.curve_index[cp], self.curve_level[cp], self.y[r]));
                }
            }
        }
        out
    }
}

/// Result of one local fit. Random-effect vectors are aligned with
/// `subjects` / `curves`, which hold dataset indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit<T> {
    pub center: usize,
    /// `mu*_0k`.
    pub intercept: T,
    /// `(visit level, mu*_jk)` for non-reference levels present in the bin.
    pub visit_effects: Vec<(usize, T)>,
    pub subjects: Vec<usize>,
    pub subject_effects: Vec<T>,
    pub curves: Vec<usize>,
    pub curve_effects: Vec<T>,
    pub sigma2_a: T,
    pub sigma2_b: T,
    /// Residual variance, gaussian family only.
    pub sigma2_e: Option<T>,
    pub status: BinStatus,
    /// Laplace-approximated marginal log-likelihood (exact for gaussian;
    /// excludes `-log y!` terms for poisson).
    pub log_likelihood: T,
    pub outer_iterations: usize,
    /// Best objective after each outer iteration (non-decreasing).
    pub objective_trace: Vec<T>,
}

impl<T: Real> LocalFit<T> {
    pub fn visit_effect(&self, level: usize) -> T {
        self.visit_effects.iter().find(|(l, _)| *l == level).map(|&(_, v)| v).unwrap_or(T::zero())
    }
}

struct Design {
    /// Fixed-effect column for each curve (`None` = reference level).
    curve_col: Vec<Option<usize>>,
    /// `(visit level, column)` for each non-reference column.
    columns: Vec<(usize, usize)>,
    p: usize,
}

impl Design {
    fn new<T>(bin: &BinData<T>, visit_effects: bool) -> Self {
        if !visit_effects {
            return Design { curve_col: vec![None; bin.curve_level.len()], columns: Vec::new(), p: 1 };
        }
        let mut levels: Vec<usize> = bin.curve_level.clone();
        levels.sort_unstable();
        levels.dedup();
        let columns: Vec<(usize, usize)> = levels.iter().skip(1).enumerate().map(|(i, &l)| (l, i + 1)).collect();
        let curve_col = bin
            .curve_level
            .iter()
            .map(|l| columns.iter().find(|(lv, _)| lv == l).map(|&(_, c)| c))
            .collect();
        Design { curve_col, columns, p: 1 + levels.len().saturating_sub(1) }
    }
}

#[derive(Clone)]
struct Mode<T> {
    beta: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
}

struct Variances<T> {
    a: T,
    b: T,
    /// Inverse residual variance, 1 for non-gaussian families.
    e_inv: T,
}

struct CurveStats<T> {
    loglik: T,
    score: Vec<T>,
    weight: Vec<T>,
}

fn curve_offset<T: Real>(design: &Design, mode: &Mode<T>, s: usize, c: usize) -> T {
    let mut eta = mode.beta[0] + mode.a[s] + mode.b[c];
    if let Some(col) = design.curve_col[c] {
        eta += mode.beta[col];
    }
    eta
}

fn evaluate<T: Real>(
    bin: &BinData<T>,
    family: Family,
    design: &Design,
    var: &Variances<T>,
    mode: &Mode<T>,
    stats: &mut CurveStats<T>,
) {
    let mut loglik = T::zero();
    for s in 0..bin.n_subjects() {
        for c in bin.subject_start[s]..bin.subject_start[s + 1] {
            let eta = curve_offset(design, mode, s, c);
            let mut g = T::zero();
            let mut w = T::zero();
            let mut l = T::zero();
            for &y in &bin.y[bin.curve_start[c]..bin.curve_start[c + 1]] {
                l += family.log_likelihood(y, eta);
                let (gi, wi) = family.score_and_weight(y, eta);
                g += gi;
                w += wi;
            }
            stats.score[c] = g * var.e_inv;
            stats.weight[c] = w * var.e_inv;
            loglik += l * var.e_inv;
        }
    }
    if family == Family::Gaussian {
        let n = T::from_count(bin.n_obs());
        loglik -= T::lit(0.5) * n * (T::lit(2.0 * std::f64::consts::PI) / var.e_inv).ln();
    }
    stats.loglik = loglik;
}

fn penalty<T: Real>(mode: &Mode<T>, var: &Variances<T>) -> T {
    let sa: T = mode.a.iter().map(|&x| x * x).sum();
    let sb: T = mode.b.iter().map(|&x| x * x).sum();
    T::lit(0.5) * (sa / var.a + sb / var.b)
}

struct Step<T> {
    beta: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    /// `log det` of the random-effect block of the negative Hessian.
    logdet_re: T,
}

/// One Newton step for the penalised log-likelihood at `mode`, by block
/// elimination of the curve and subject intercepts. Returns `None` when the
/// reduced fixed-effect system is not positive definite.
fn newton_step<T: Real>(
    bin: &BinData<T>,
    design: &Design,
    var: &Variances<T>,
    mode: &Mode<T>,
    stats: &CurveStats<T>,
) -> Option<Step<T>> {
    let p = design.p;
    let inv_a = T::one() / var.a;
    let inv_b = T::one() / var.b;
    let n_c = bin.n_curves();
    let n_s = bin.n_subjects();
    let mut hbb = vec![T::zero(); p * p];
    let mut gb = vec![T::zero(); p];
    // per-subject Schur quantities
    let mut e_s = vec![T::zero(); n_s];
    let mut ga_s = vec![T::zero(); n_s];
    let mut hba_s = vec![T::zero(); n_s * p];
    let mut d_c = vec![T::zero(); n_c];
    let mut gbc = vec![T::zero(); n_c];
    let mut logdet = T::zero();

    for s in 0..n_s {
        let mut haa = inv_a;
        let mut ga = -mode.a[s] * inv_a;
        let hba = &mut hba_s[s * p..(s + 1) * p];
        for c in bin.subject_start[s]..bin.subject_start[s + 1] {
            let w = stats.weight[c];
            let g = stats.score[c];
            let d = w + inv_b;
            let g_b = g - mode.b[c] * inv_b;
            d_c[c] = d;
            gbc[c] = g_b;
            logdet += d.ln();
            haa += w - w * w / d;
            ga += g - w * g_b / d;
            // x_c = e_0 + e_col
            let wr = w * inv_b / d;
            let col = design.curve_col[c];
            hba[0] += wr;
            if let Some(j) = col {
                hba[j] += wr;
            }
            let gx = g - w * g_b / d;
            gb[0] += gx;
            if let Some(j) = col {
                gb[j] += gx;
            }
            hbb[0] += wr;
            if let Some(j) = col {
                hbb[j] += wr;
                hbb[j * p] += wr;
                hbb[j * p + j] += wr;
            }
        }
        e_s[s] = haa;
        ga_s[s] = ga;
        logdet += haa.ln();
        for i in 0..p {
            gb[i] -= hba[i] * ga / haa;
            for j in 0..p {
                hbb[i * p + j] -= hba[i] * hba[j] / haa;
            }
        }
    }
    if !logdet.is_finite() {
        return None;
    }
    cholesky_in_place(&mut hbb, p)?;
    let mut dbeta = gb;
    cholesky_solve_in_place(&hbb, p, &mut dbeta);

    let mut da = vec![T::zero(); n_s];
    let mut db = vec![T::zero(); n_c];
    for s in 0..n_s {
        let hba = &hba_s[s * p..(s + 1) * p];
        let proj: T = (0..p).map(|i| hba[i] * dbeta[i]).sum();
        let das = (ga_s[s] - proj) / e_s[s];
        da[s] = das;
        for c in bin.subject_start[s]..bin.subject_start[s + 1] {
            let w = stats.weight[c];
            let mut xb = dbeta[0];
            if let Some(j) = design.curve_col[c] {
                xb += dbeta[j];
            }
            db[c] = (gbc[c] - w * das - w * xb) / d_c[c];
        }
    }
    Some(Step { beta: dbeta, a: da, b: db, logdet_re: logdet })
}

struct ModeFit<T> {
    penalized: T,
    logdet_re: T,
}

/// Penalised Newton iterations from `mode` (updated in place).
fn find_mode<T: Real>(
    bin: &BinData<T>,
    family: Family,
    design: &Design,
    var: &Variances<T>,
    mode: &mut Mode<T>,
    max_iter: usize,
) -> Option<ModeFit<T>> {
    let n_c = bin.n_curves();
    let mut stats = CurveStats { loglik: T::zero(), score: vec![T::zero(); n_c], weight: vec![T::zero(); n_c] };
    let mut cand_stats = CurveStats { loglik: T::zero(), score: vec![T::zero(); n_c], weight: vec![T::zero(); n_c] };
    evaluate(bin, family, design, var, mode, &mut stats);
    let mut f = stats.loglik - penalty(mode, var);
    let ftol = T::lit(1e-11);
    let xtol = T::lit(1e-9);
    let mut logdet = T::nan();
    for _ in 0..max_iter {
        let step = newton_step(bin, design, var, mode, &stats)?;
        logdet = step.logdet_re;
        let mut t = T::one();
        let mut cand = mode.clone();
        let mut cf;
        loop {
            for ((x, m), d) in cand.beta.iter_mut().zip(&mode.beta).zip(&step.beta) {
                *x = *m + t * *d;
            }
            for ((x, m), d) in cand.a.iter_mut().zip(&mode.a).zip(&step.a) {
                *x = *m + t * *d;
            }
            for ((x, m), d) in cand.b.iter_mut().zip(&mode.b).zip(&step.b) {
                *x = *m + t * *d;
            }
            evaluate(bin, family, design, var, &cand, &mut cand_stats);
            cf = cand_stats.loglik - penalty(&cand, var);
            if (cf.is_finite() && cf >= f - ftol * (T::one() + f.abs())) || t < T::lit(1e-10) {
                break;
            }
            t *= T::lit(0.5);
        }
        let max_step = step
            .beta
            .iter()
            .chain(&step.a)
            .chain(&step.b)
            .fold(T::zero(), |m, &d| m.max((t * d).abs()));
        let improved = cf >= f;
        if improved {
            std::mem::swap(mode, &mut cand);
            std::mem::swap(&mut stats, &mut cand_stats);
        }
        let df = (cf - f).abs();
        if improved {
            f = cf;
        }
        if (df <= ftol * (T::one() + f.abs()) && max_step <= T::lit(1e-6)) || max_step <= xtol || !improved {
            break;
        }
    }
    // log det at the accepted mode
    let final_step = newton_step(bin, design, var, mode, &stats)?;
    if final_step.logdet_re.is_finite() {
        logdet = final_step.logdet_re;
    }
    Some(ModeFit { penalized: f, logdet_re: logdet })
}

fn laplace_objective<T: Real>(bin: &BinData<T>, var: &Variances<T>, fit: &ModeFit<T>) -> T {
    let half = T::lit(0.5);
    let n_a = T::from_count(bin.n_subjects());
    let n_b = T::from_count(bin.n_curves());
    fit.penalized - half * (n_a * var.a.ln() + n_b * var.b.ln()) - half * fit.logdet_re
}

fn degenerate_reason<T: Real>(family: Family, y: &[T]) -> Option<DegenerateReason> {
    let first = *y.first()?;
    let constant = y.iter().all(|&v| v == first);
    match family {
        Family::Binary if constant && first == T::zero() => Some(DegenerateReason::AllZero),
        Family::Binary if constant => Some(DegenerateReason::AllOne),
        Family::Poisson if constant && first == T::zero() => Some(DegenerateReason::AllZero),
        Family::Gaussian if constant => Some(DegenerateReason::Constant),
        _ => None,
    }
}

fn pooled_intercept<T: Real>(family: Family, y: &[T]) -> T {
    let n = T::from_count(y.len().max(1));
    let total: T = y.iter().copied().sum();
    match family {
        Family::Binary => {
            let half = T::lit(0.5);
            let p = ((total + half) / (n + T::one())).max(half / n).min(T::one() - half / n);
            logit(p)
        }
        Family::Poisson => ((T::lit(0.5) + total) / n).ln(),
        Family::Gaussian => total / n,
    }
}

/// Intercept used when a bin is degenerate: `logit(0.5 / n)` for an
/// all-zero binary bin (mirrored for all ones), `log((0.5 + total) / n)`
/// for poisson, the constant itself for gaussian.
pub fn fallback_intercept<T: Real>(family: Family, y: &[T]) -> T {
    let n = T::from_count(y.len().max(1));
    let half = T::lit(0.5);
    match (family, degenerate_reason(family, y)) {
        (Family::Binary, Some(DegenerateReason::AllOne)) => logit(T::one() - half / n),
        (Family::Binary, _) => logit(half / n),
        (Family::Poisson, _) => {
            let total: T = y.iter().copied().sum();
            ((half + total) / n).ln()
        }
        (Family::Gaussian, _) => y.first().copied().unwrap_or(T::zero()),
    }
}

fn variance_of<T: Real>(y: &[T]) -> T {
    let n = T::from_count(y.len());
    let mean = y.iter().copied().sum::<T>() / n;
    y.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n
}

/// Fits the local model of one bin centred at grid index `center`.
pub fn fit_local_glmm<T: Real>(
    bin: &BinData<T>,
    family: Family,
    center: usize,
    options: &LocalGlmmOptions,
) -> std::result::Result<LocalFit<T>, LocalFitError<T>> {
    if bin.n_subjects() < 2 {
        return Err(LocalFitError::InsufficientData(format!("{} subject(s) in bin", bin.n_subjects())));
    }
    let replicated_curve = (0..bin.n_curves()).any(|c| bin.curve_start[c + 1] - bin.curve_start[c] >= 2);
    let replicated_subject = (0..bin.n_subjects()).any(|s| bin.subject_start[s + 1] - bin.subject_start[s] >= 2);
    if !replicated_curve && !replicated_subject {
        return Err(LocalFitError::InsufficientData(
            "no replication for the subject-visit intercept".into(),
        ));
    }
    if let Some(reason) = degenerate_reason(family, &bin.y) {
        return Err(LocalFitError::DegenerateBin(reason));
    }

    let design = Design::new(bin, options.visit_fixed_effects);
    let floor = T::lit(options.variance_floor);
    let log_floor = floor.ln();
    let log_ceiling = T::lit(VARIANCE_CEILING).ln();
    let gaussian = family == Family::Gaussian;
    let n_par = if gaussian { 3 } else { 2 };

    let mut beta0 = vec![T::zero(); design.p];
    beta0[0] = pooled_intercept(family, &bin.y);
    let mut mode = Mode { beta: beta0, a: vec![T::zero(); bin.n_subjects()], b: vec![T::zero(); bin.n_curves()] };

    let start = if gaussian {
        let v = (variance_of(&bin.y) / T::lit(3.0)).max(floor * T::lit(1e3));
        vec![v.ln(); 3]
    } else {
        vec![T::zero(); 2]
    };
    let to_var = |theta: &[T]| Variances {
        a: theta[0].exp(),
        b: theta[1].exp(),
        e_inv: if gaussian { (-theta[2]).exp() } else { T::one() },
    };

    let max_inner = options.max_inner_iter;
    let mut warm = mode.clone();
    let objective = |theta: &[T]| -> T {
        let var = to_var(theta);
        match find_mode(bin, family, &design, &var, &mut warm, max_inner) {
            Some(fit) => -laplace_objective(bin, &var, &fit),
            None => T::infinity(),
        }
    };
    let nm_opts = NelderMeadOptions {
        max_iter: options.max_iter,
        ftol: T::lit(options.tol),
        xtol: T::lit(1e-3),
        initial_step: T::one(),
        lower: vec![log_floor; n_par],
        upper: vec![log_ceiling; n_par],
    };
    let result = nelder_mead(objective, &start, &nm_opts);

    let mut theta = result.x.clone();
    let singular_cut = (floor * T::lit(SINGULAR_FACTOR)).ln();
    let singular_a = theta[0] <= singular_cut;
    let singular_b = theta[1] <= singular_cut;
    if singular_a {
        theta[0] = log_floor;
    }
    if singular_b {
        theta[1] = log_floor;
    }
    let var = to_var(&theta);
    let mode_fit = find_mode(bin, family, &design, &var, &mut mode, max_inner.max(100));
    let log_likelihood = mode_fit.as_ref().map(|f| laplace_objective(bin, &var, f)).unwrap_or(T::nan());

    let status = match (result.converged, singular_a, singular_b) {
        (false, _, _) => BinStatus::Failed,
        (true, true, true) => BinStatus::SingularBoth,
        (true, true, false) => BinStatus::SingularA,
        (true, false, true) => BinStatus::SingularB,
        (true, false, false) => BinStatus::Converged,
    };
    let fit = LocalFit {
        center,
        intercept: mode.beta[0],
        visit_effects: design.columns.iter().map(|&(level, col)| (level, mode.beta[col])).collect(),
        subjects: bin.subject_index.clone(),
        subject_effects: mode.a,
        curves: bin.curve_index.clone(),
        curve_effects: mode.b,
        sigma2_a: var.a,
        sigma2_b: var.b,
        sigma2_e: if gaussian { Some(T::one() / var.e_inv) } else { None },
        status,
        log_likelihood,
        outer_iterations: result.iterations,
        objective_trace: result.trace.iter().map(|&v| -v).collect(),
    };
    if status == BinStatus::Failed || mode_fit.is_none() {
        let mut fit = fit;
        fit.status = BinStatus::Failed;
        return Err(LocalFitError::ConvergenceFailure(Box::new(fit)));
    }
    Ok(fit)
}

/// Evaluates the Laplace log-likelihood and conditional modes at fixed
/// variance components (`sigma2_e` only for gaussian). Exposed for checking
/// the fitter against closed-form solutions.
pub fn conditional_fit<T: Real>(
    bin: &BinData<T>,
    family: Family,
    visit_fixed_effects: bool,
    sigma2_a: T,
    sigma2_b: T,
    sigma2_e: Option<T>,
) -> Option<(T, Vec<T>, Vec<T>, Vec<T>)> {
    let design = Design::new(bin, visit_fixed_effects);
    let var = Variances { a: sigma2_a, b: sigma2_b, e_inv: sigma2_e.map(|v| T::one() / v).unwrap_or(T::one()) };
    let mut beta = vec![T::zero(); design.p];
    beta[0] = pooled_intercept(family, &bin.y);
    let mut mode = Mode { beta, a: vec![T::zero(); bin.n_subjects()], b: vec![T::zero(); bin.n_curves()] };
    let fit = find_mode(bin, family, &design, &var, &mut mode, 200)?;
    Some((laplace_objective(bin, &var, &fit), mode.beta, mode.a, mode.b))
}

/// Compact per-bin record kept with the latent predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub center: usize,
    pub status: BinStatus,
    pub intercept: f64,
    pub sigma2_a: f64,
    pub sigma2_b: f64,
    pub log_likelihood: f64,
    pub outer_iterations: usize,
    pub n_obs: usize,
}

/// `eta*_ijk = mu*_0k + mu*_jk + a*_ik + b*_ijk` for every curve and grid
/// point, with its components.
#[derive(Debug, Clone)]
pub struct LatentPredictorMatrix<T> {
    pub intercept: Vec<T>,
    /// `levels x K`.
    pub visit_effects: Array2<T>,
    /// `subjects x K`.
    pub subject_effects: Array2<T>,
    /// `curves x K`.
    pub curve_effects: Array2<T>,
    /// `curves x K`.
    pub eta: Array2<T>,
    pub curve_subject: Vec<usize>,
    pub curve_level: Vec<usize>,
    pub bins: Vec<BinSummary>,
}

impl<T: Real> LatentPredictorMatrix<T> {
    pub fn n_curves(&self) -> usize {
        self.eta.nrows()
    }

    pub fn grid_len(&self) -> usize {
        self.eta.ncols()
    }

    pub fn status_counts(&self) -> std::collections::BTreeMap<&'static str, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for b in &self.bins {
            *counts.entry(b.status.as_str()).or_insert(0) += 1;
        }
        counts
    }

    /// Assembles `eta` from its components in a fixed summation order.
    pub fn reconstruct(&self, c: usize, k: usize) -> T {
        let level = self.curve_level[c];
        let subject = self.curve_subject[c];
        ((self.intercept[k] + self.visit_effects[[level, k]]) + self.subject_effects[[subject, k]])
            + self.curve_effects[[c, k]]
    }

    /// Builds a matrix directly from linear-predictor values (e.g. read
    /// back from disk); components other than `eta` are left at zero.
    pub fn from_eta(eta: Array2<T>, curve_subject: Vec<usize>, curve_level: Vec<usize>, bins: Vec<BinSummary>) -> Self {
        let k = eta.ncols();
        let n_s = curve_subject.iter().copied().max().map_or(0, |m| m + 1);
        let n_l = curve_level.iter().copied().max().map_or(0, |m| m + 1);
        Self {
            intercept: vec![T::zero(); k],
            visit_effects: Array2::zeros((n_l, k)),
            subject_effects: Array2::zeros((n_s, k)),
            curve_effects: eta.clone(),
            eta,
            curve_subject,
            curve_level,
            bins,
        }
    }
}

struct BinOutcome<T> {
    fit: LocalFit<T>,
    n_obs: usize,
}

fn fit_bin<T: Real>(
    data: &MultilevelFunctionalDataset<T>,
    bin_indices: &[usize],
    center: usize,
    options: &LocalGlmmOptions,
) -> BinOutcome<T> {
    let bin = BinData::from_dataset(data, bin_indices);
    let family = data.family();
    let empty = |status: BinStatus, intercept: T| LocalFit {
        center,
        intercept,
        visit_effects: Vec::new(),
        subjects: Vec::new(),
        subject_effects: Vec::new(),
        curves: Vec::new(),
        curve_effects: Vec::new(),
        sigma2_a: T::zero(),
        sigma2_b: T::zero(),
        sigma2_e: None,
        status,
        log_likelihood: T::nan(),
        outer_iterations: 0,
        objective_trace: Vec::new(),
    };
    let fit = match fit_local_glmm(&bin, family, center, options) {
        Ok(fit) => fit,
        Err(LocalFitError::ConvergenceFailure(last)) => *last,
        Err(LocalFitError::DegenerateBin(_)) => empty(BinStatus::Degenerate, fallback_intercept(family, &bin.y)),
        Err(LocalFitError::InsufficientData(_)) => {
            let intercept = if bin.y.is_empty() { T::zero() } else { pooled_intercept(family, &bin.y) };
            empty(BinStatus::Insufficient, intercept)
        }
    };
    BinOutcome { fit, n_obs: bin.n_obs() }
}

/// Fits every bin of `plan` and assembles the latent predictor matrix.
///
/// Bins are processed on the current rayon pool; each fit depends only on
/// its own data, so the result does not depend on the number of workers.
pub fn fit_all_bins<T: Real>(
    data: &MultilevelFunctionalDataset<T>,
    plan: &BinPlan,
    options: &LocalGlmmOptions,
) -> Result<LatentPredictorMatrix<T>> {
    let k_len = data.grid().len();
    if plan.len() != k_len {
        return Err(CrateError::GridMismatch(format!("{} bins for a grid of {} points", plan.len(), k_len)));
    }
    let report = validate_dataset(data, plan.half_width);
    if !report.is_ok() {
        return Err(CrateError::InvalidDataset(report.error_count()));
    }

    let outcomes: Vec<BinOutcome<T>> = plan
        .bins
        .par_iter()
        .enumerate()
        .map(|(k, bin)| fit_bin(data, bin, k, options))
        .collect();

    let failed = outcomes.iter().filter(|o| o.fit.status.is_failure()).count();
    if 2 * failed > k_len {
        return Err(CrateError::PipelineFailure { failed, total: k_len });
    }

    let n_c = data.n_curves();
    let n_s = data.n_subjects();
    let n_l = data.visit_levels().len().max(1);
    let mut out = LatentPredictorMatrix {
        intercept: vec![T::zero(); k_len],
        visit_effects: Array2::zeros((n_l, k_len)),
        subject_effects: Array2::zeros((n_s, k_len)),
        curve_effects: Array2::zeros((n_c, k_len)),
        eta: Array2::zeros((n_c, k_len)),
        curve_subject: data.curves().iter().map(|c| c.subject).collect(),
        curve_level: data.curves().iter().map(|c| c.visit_level).collect(),
        bins: Vec::with_capacity(k_len),
    };
    for (k, o) in outcomes.iter().enumerate() {
        let f = &o.fit;
        out.intercept[k] = f.intercept;
        for &(level, v) in &f.visit_effects {
            out.visit_effects[[level, k]] = v;
        }
        for (&s, &a) in f.subjects.iter().zip(&f.subject_effects) {
            out.subject_effects[[s, k]] = a;
        }
        for (&c, &b) in f.curves.iter().zip(&f.curve_effects) {
            out.curve_effects[[c, k]] = b;
        }
        out.bins.push(BinSummary {
            center: k,
            status: f.status,
            intercept: f.intercept.as_f64(),
            sigma2_a: f.sigma2_a.as_f64(),
            sigma2_b: f.sigma2_b.as_f64(),
            log_likelihood: f.log_likelihood.as_f64(),
            outer_iterations: f.outer_iterations,
            n_obs: o.n_obs,
        });
    }
    for c in 0..n_c {
        for k in 0..k_len {
            out.eta[[c, k]] = out.reconstruct(c, k);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_gaussian() -> BinData<f64> {
        // I = 3 subjects, J = 2 visits, 3 points per curve
        let ys = [
            [1.2, 0.8, 1.5],
            [2.0, 1.7, 2.2],
            [-0.3, 0.1, -0.6],
            [0.4, 0.0, 0.2],
            [0.9, 1.4, 1.1],
            [1.8, 1.6, 2.5],
        ];
        let mut recs = Vec::new();
        for (c, row) in ys.iter().enumerate() {
            for &y in row {
                recs.push((c / 2, c, c % 2, y));
            }
        }
        BinData::from_records(&recs)
    }

    #[test]
    fn bin_data_grouping() {
        let bin = toy_gaussian();
        assert_eq!(bin.n_subjects(), 3);
        assert_eq!(bin.n_curves(), 6);
        assert_eq!(bin.n_obs(), 18);
        assert_eq!(bin.records().len(), 18);
    }

    #[test]
    fn all_zero_binary_bin_is_degenerate() {
        let recs: Vec<_> = (0..12).map(|r| (r / 4, r / 2, 0, 0.0f64)).collect();
        let bin = BinData::from_records(&recs);
        match fit_local_glmm(&bin, Family::Binary, 0, &LocalGlmmOptions::default()) {
            Err(LocalFitError::DegenerateBin(DegenerateReason::AllZero)) => {}
            other => panic!("expected DegenerateBin, got {other:?}"),
        }
        let y = bin.responses();
        let expected = (0.5f64 / 12.0 / (1.0 - 0.5 / 12.0)).ln();
        assert!((fallback_intercept(Family::Binary, y) - expected).abs() < 1e-14);
        assert!((fallback_intercept(Family::Poisson, y) - (0.5f64 / 12.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn single_subject_is_insufficient() {
        let recs: Vec<_> = (0..6).map(|r| (0usize, r / 3, 0usize, (r % 2) as f64)).collect();
        let bin = BinData::from_records(&recs);
        assert!(matches!(
            fit_local_glmm(&bin, Family::Binary, 0, &LocalGlmmOptions::default()),
            Err(LocalFitError::InsufficientData(_))
        ));
    }

    #[test]
    fn gaussian_fit_converges_and_trace_is_monotone() {
        let bin = toy_gaussian();
        let fit = fit_local_glmm(&bin, Family::Gaussian, 0, &LocalGlmmOptions::default()).unwrap();
        assert!(fit.sigma2_a >= 0.0 && fit.sigma2_b >= 0.0);
        assert!(fit.objective_trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(fit.sigma2_e.unwrap() > 0.0);
    }

    #[test]
    fn visit_effects_are_estimated_when_enabled() {
        let bin = toy_gaussian();
        let opts = LocalGlmmOptions { visit_fixed_effects: true, ..Default::default() };
        let fit = fit_local_glmm(&bin, Family::Gaussian, 0, &opts).unwrap();
        assert_eq!(fit.visit_effects.len(), 1);
        assert_eq!(fit.visit_effects[0].0, 1);
        // visit 2 is higher on average in every subject
        assert!(fit.visit_effect(1) > 0.2);
        assert_eq!(fit.visit_effect(0), 0.0);
    }
}
