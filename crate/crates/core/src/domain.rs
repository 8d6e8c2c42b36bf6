//! Data model: the sampling grid, the multilevel functional dataset, and the
//! sliding-window bins the local fits run on.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Ordered domain points `s_1 < ... < s_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid<T> {
    points: Vec<T>,
    cyclic: bool,
}

impl<T: Real> SamplingGrid<T> {
    pub fn new(points: Vec<T>, cyclic: bool) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::GridTooSmall(points.len()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidGrid("grid points must be finite".into()));
        }
        if let Some(k) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "grid points must be strictly increasing (violated at index {})",
                k + 1
            )));
        }
        Ok(Self { points, cyclic })
    }

    /// `n` equally spaced points `start, start + step, ...`.
    pub fn uniform(n: usize, start: T, step: T, cyclic: bool) -> Result<Self> {
        let points = (0..n).map(|k| start + step * T::from_count(k)).collect();
        Self::new(points, cyclic)
    }

    /// The simulation grid `s_k = k / K`, `k = 0..=K` (K + 1 points).
    pub fn unit_interval(intervals: usize) -> Result<Self> {
        let denom = T::from_count(intervals);
        Self::new((0..=intervals).map(|k| T::from_count(k) / denom).collect(), false)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn is_cyclic(&self) -> bool {
        self.cyclic
    }

    /// Riemann weight used for inner products on the grid: mean spacing.
    pub fn spacing(&self) -> T {
        let n = self.points.len();
        (self.points[n - 1] - self.points[0]) / T::from_count(n - 1)
    }

    /// Restrict the grid to a strictly increasing subset of indices. The
    /// result is never cyclic.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.iter().any(|&k| k >= self.len()) {
            return Err(Error::InvalidGrid("subset index out of range".into()));
        }
        Self::new(indices.iter().map(|&k| self.points[k]).collect(), false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Binary,
    Poisson,
    Gaussian,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Binary => "binary",
            Family::Poisson => "poisson",
            Family::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binary" | "bernoulli" | "binomial" => Some(Family::Binary),
            "poisson" | "count" => Some(Family::Poisson),
            "gaussian" | "normal" => Some(Family::Gaussian),
            _ => None,
        }
    }

    /// Whether `y` is an admissible response value for the family.
    pub fn accepts<T: Real>(self, y: T) -> bool {
        match self {
            Family::Binary => y == T::zero() || y == T::one(),
            Family::Poisson => y >= T::zero() && y.fract() == T::zero() && y.is_finite(),
            Family::Gaussian => y.is_finite(),
        }
    }

    /// Inverse of the canonical link.
    #[inline]
    pub fn mean<T: Real>(self, eta: T) -> T {
        match self {
            Family::Binary => logistic(eta),
            Family::Poisson => eta.exp(),
            Family::Gaussian => eta,
        }
    }

    /// Log-likelihood of one observation on the linear-predictor scale,
    /// dropping terms that do not depend on `eta`. Gaussian uses unit
    /// residual variance; callers scale it.
    #[inline]
    pub fn log_likelihood<T: Real>(self, y: T, eta: T) -> T {
        match self {
            Family::Binary => y * eta - softplus(eta),
            Family::Poisson => y * eta - eta.exp(),
            Family::Gaussian => {
                let r = y - eta;
                -T::lit(0.5) * r * r
            }
        }
    }

    /// Derivative of the log-likelihood in `eta` and the canonical-link
    /// information `var(mu)`; for canonical links observed and expected
    /// information coincide.
    #[inline]
    pub fn score_and_weight<T: Real>(self, y: T, eta: T) -> (T, T) {
        match self {
            Family::Binary => {
                let mu = logistic(eta);
                (y - mu, mu * (T::one() - mu))
            }
            Family::Poisson => {
                let mu = eta.exp();
                (y - mu, mu)
            }
            Family::Gaussian => (y - eta, T::one()),
        }
    }
}

#[inline]
pub fn logistic<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// One subject-visit curve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Curve {
    pub subject: usize,
    pub visit_id: String,
    /// Index into [`MultilevelFunctionalDataset::visit_levels`].
    pub visit_level: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subject {
    pub id: String,
    /// Indices into [`MultilevelFunctionalDataset::curves`].
    pub curves: Vec<usize>,
}

/// A record that could not be placed in the dense layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRecord {
    pub subject_id: String,
    pub visit_id: String,
    pub time_index: usize,
    pub value: f64,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    Duplicate,
    OutOfRange,
}

/// Long-format observations `Z_ijk` on a shared grid.
///
/// Values are held densely as one row per subject-visit curve with `NaN` for
/// missing cells. Subjects and curves keep their order of first appearance.
#[derive(Debug, Clone)]
pub struct MultilevelFunctionalDataset<T> {
    grid: SamplingGrid<T>,
    family: Family,
    subjects: Vec<Subject>,
    curves: Vec<Curve>,
    visit_levels: Vec<String>,
    values: Array2<T>,
    rejected: Vec<RejectedRecord>,
}

impl<T: Real> MultilevelFunctionalDataset<T> {
    /// Builds a dataset from `(subject_id, visit_id, k, value)` records with
    /// `k` a 0-based grid index. Duplicate triples keep the first value and
    /// are reported by [`validate_dataset`], as are out-of-range indices.
    pub fn from_records<I, S1, S2>(grid: SamplingGrid<T>, family: Family, records: I) -> Self
    where
        I: IntoIterator<Item = (S1, S2, usize, T)>,
        S1: AsRef<str>,
        S2: AsRef<str>,
    {
        let k_len = grid.len();
        let mut subject_index: HashMap<String, usize> = HashMap::new();
        let mut curve_index: HashMap<(usize, String), usize> = HashMap::new();
        let mut level_index: HashMap<String, usize> = HashMap::new();
        let mut subjects: Vec<Subject> = Vec::new();
        let mut curves: Vec<Curve> = Vec::new();
        let mut visit_levels: Vec<String> = Vec::new();
        let mut cells: Vec<(usize, usize, T)> = Vec::new();
        let mut rejected = Vec::new();
        let mut seen: std::collections::HashSet<(usize, usize)> = std::collections::HashSet::new();

        for (sid, vid, k, value) in records {
            let sid = sid.as_ref();
            let vid = vid.as_ref();
            if k >= k_len {
                rejected.push(RejectedRecord {
                    subject_id: sid.to_string(),
                    visit_id: vid.to_string(),
                    time_index: k,
                    value: value.as_f64(),
                    reason: RejectReason::OutOfRange,
                });
                continue;
            }
            let s = *subject_index.entry(sid.to_string()).or_insert_with(|| {
                subjects.push(Subject { id: sid.to_string(), curves: Vec::new() });
                subjects.len() - 1
            });
            let level = *level_index.entry(vid.to_string()).or_insert_with(|| {
                visit_levels.push(vid.to_string());
                visit_levels.len() - 1
            });
            let c = *curve_index.entry((s, vid.to_string())).or_insert_with(|| {
                curves.push(Curve { subject: s, visit_id: vid.to_string(), visit_level: level });
                subjects[s].curves.push(curves.len() - 1);
                curves.len() - 1
            });
            if !seen.insert((c, k)) {
                rejected.push(RejectedRecord {
                    subject_id: sid.to_string(),
                    visit_id: vid.to_string(),
                    time_index: k,
                    value: value.as_f64(),
                    reason: RejectReason::Duplicate,
                });
                continue;
            }
            cells.push((c, k, value));
        }

        let mut values = Array2::from_elem((curves.len(), k_len), T::nan());
        for (c, k, v) in cells {
            values[[c, k]] = v;
        }
        Self { grid, family, subjects, curves, visit_levels, values, rejected }
    }

    /// Builds a dataset from dense curves. `curve_subjects[c]` and
    /// `curve_visits[c]` label row `c` of `values` (`NaN` = missing).
    pub fn from_dense(
        grid: SamplingGrid<T>,
        family: Family,
        subject_ids: Vec<String>,
        curve_subjects: Vec<usize>,
        curve_visits: Vec<String>,
        values: Array2<T>,
    ) -> Result<Self> {
        if values.nrows() != curve_subjects.len() || curve_visits.len() != curve_subjects.len() {
            return Err(Error::InvalidConfig("curve labels do not match value rows".into()));
        }
        if values.ncols() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} columns for a grid of {} points",
                values.ncols(),
                grid.len()
            )));
        }
        let mut subjects: Vec<Subject> =
            subject_ids.into_iter().map(|id| Subject { id, curves: Vec::new() }).collect();
        let mut level_index: HashMap<String, usize> = HashMap::new();
        let mut visit_levels = Vec::new();
        let mut curves = Vec::with_capacity(curve_subjects.len());
        for (c, (s, vid)) in curve_subjects.into_iter().zip(curve_visits).enumerate() {
            if s >= subjects.len() {
                return Err(Error::InvalidConfig(format!("curve {c} references unknown subject {s}")));
            }
            let level = *level_index.entry(vid.clone()).or_insert_with(|| {
                visit_levels.push(vid.clone());
                visit_levels.len() - 1
            });
            subjects[s].curves.push(c);
            curves.push(Curve { subject: s, visit_id: vid, visit_level: level });
        }
        if let Some(s) = subjects.iter().find(|s| s.curves.is_empty()) {
            return Err(Error::InvalidConfig(format!("subject {} has no visits", s.id)));
        }
        Ok(Self { grid, family, subjects, curves, visit_levels, values, rejected: Vec::new() })
    }

    pub fn grid(&self) -> &SamplingGrid<T> {
        &self.grid
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn curves(&self) -> &[Curve] {
        &self.curves
    }

    pub fn visit_levels(&self) -> &[String] {
        &self.visit_levels
    }

    /// Dense `curves x K` values, `NaN` where missing.
    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn rejected(&self) -> &[RejectedRecord] {
        &self.rejected
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_curves(&self) -> usize {
        self.curves.len()
    }

    pub fn n_observed(&self) -> usize {
        self.values.iter().filter(|v| !v.is_nan()).count()
    }

    /// Keep only the given subjects (by index), preserving their order.
    pub fn select_subjects(&self, subjects: &[usize]) -> Self {
        let mut new_subjects = Vec::with_capacity(subjects.len());
        let mut curve_rows = Vec::new();
        let mut new_curves = Vec::new();
        for (new_s, &s) in subjects.iter().enumerate() {
            let src = &self.subjects[s];
            let mut ids = Vec::with_capacity(src.curves.len());
            for &c in &src.curves {
                ids.push(new_curves.len());
                let mut curve = self.curves[c].clone();
                curve.subject = new_s;
                new_curves.push(curve);
                curve_rows.push(c);
            }
            new_subjects.push(Subject { id: src.id.clone(), curves: ids });
        }
        let values = self.values.select(ndarray::Axis(0), &curve_rows);
        Self {
            grid: self.grid.clone(),
            family: self.family,
            subjects: new_subjects,
            curves: new_curves,
            visit_levels: self.visit_levels.clone(),
            values,
            rejected: Vec::new(),
        }
    }

    /// Derive binary indicators `1{value >= threshold}` from a continuous
    /// measurement, e.g. active minutes from MIMS.
    pub fn thresholded(&self, threshold: T) -> Self {
        let values = self.values.mapv(|v| {
            if v.is_nan() {
                v
            } else if v >= threshold {
                T::one()
            } else {
                T::zero()
            }
        });
        Self { values, family: Family::Binary, ..self.clone() }
    }
}

/// Sliding-window bins, one per grid point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinPlan {
    pub bins: Vec<Vec<usize>>,
    pub half_width: usize,
    pub cyclic: bool,
}

impl BinPlan {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

/// How a user-facing window width `w` maps to the bin half-width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthRule {
    /// Bins `k - ceil(w/2) ..= k + ceil(w/2)`, i.e. `2 ceil(w/2) + 1` points.
    #[default]
    IndexFormula,
    /// `w` is the total number of points in a bin (rounded up to odd).
    TotalPoints,
}

impl WidthRule {
    pub fn half_width(self, w: usize) -> usize {
        match self {
            WidthRule::IndexFormula => w.div_ceil(2),
            WidthRule::TotalPoints => w.saturating_sub(1).div_ceil(2),
        }
    }
}

/// Window width in grid points for a percentage of the grid.
pub fn width_from_percent(grid_size: usize, percent: f64) -> usize {
    ((percent / 100.0) * grid_size as f64).round().max(1.0) as usize
}

/// Bins for a grid of `grid_size` points and window width `w` (index
/// formula, half-width `ceil(w/2)`). `k` is 0-based.
pub fn make_bins(grid_size: usize, w: usize, cyclic: bool) -> Result<BinPlan> {
    if grid_size < 3 {
        return Err(Error::GridTooSmall(grid_size));
    }
    if w < 1 || w >= grid_size {
        return Err(Error::InvalidBinWidth { width: w, grid_size });
    }
    make_bins_with_half_width(grid_size, WidthRule::IndexFormula.half_width(w), cyclic)
        .map_err(|_| Error::InvalidBinWidth { width: w, grid_size })
}

/// Bins with an explicit half-width `h` (bin cardinality `2h + 1` away from
/// non-cyclic boundaries).
pub fn make_bins_with_half_width(grid_size: usize, h: usize, cyclic: bool) -> Result<BinPlan> {
    if grid_size < 3 {
        return Err(Error::GridTooSmall(grid_size));
    }
    if cyclic && 2 * h + 1 > grid_size {
        return Err(Error::InvalidBinWidth { width: 2 * h, grid_size });
    }
    if !cyclic && h >= grid_size {
        return Err(Error::InvalidBinWidth { width: 2 * h, grid_size });
    }
    let bins = (0..grid_size)
        .map(|k| {
            if cyclic {
                (0..=2 * h).map(|o| (k + grid_size + o - h) % grid_size).collect()
            } else {
                (k.saturating_sub(h)..=(k + h).min(grid_size - 1)).collect()
            }
        })
        .collect();
    Ok(BinPlan { bins, half_width: h, cyclic })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub severity: Severity,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub entries: Vec<ValidationEntry>,
    /// Observed (non-missing) cells at each grid point.
    pub counts_per_point: Vec<usize>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &ValidationEntry> {
        self.entries.iter().filter(|e| e.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &ValidationEntry> {
        self.entries.iter().filter(|e| e.severity == Severity::Warning)
    }

    pub fn error_count(&self) -> usize {
        self.errors().count()
    }

    pub fn warning_count(&self) -> usize {
        self.warnings().count()
    }

    pub fn is_ok(&self) -> bool {
        self.error_count() == 0
    }

    fn push(&mut self, severity: Severity, code: &str, message: String) {
        self.entries.push(ValidationEntry { severity, code: code.to_string(), message });
    }
}

/// Checks a dataset before fitting. Never fails; problems are reported as
/// entries with a severity. `half_width` is the bin half-width the data will
/// be fitted with and drives the level-2 identifiability warnings.
pub fn validate_dataset<T: Real>(data: &MultilevelFunctionalDataset<T>, half_width: usize) -> ValidationReport {
    let k_len = data.grid().len();
    let mut report = ValidationReport { entries: Vec::new(), counts_per_point: vec![0; k_len] };

    for r in data.rejected() {
        match r.reason {
            RejectReason::Duplicate => report.push(
                Severity::Error,
                "duplicate_record",
                format!(
                    "duplicate record for subject {} visit {} time_index {}",
                    r.subject_id,
                    r.visit_id,
                    r.time_index + 1
                ),
            ),
            RejectReason::OutOfRange => report.push(
                Severity::Error,
                "time_index_out_of_range",
                format!(
                    "record for subject {} visit {} has time_index {} outside 1..={}",
                    r.subject_id,
                    r.visit_id,
                    r.time_index + 1,
                    k_len
                ),
            ),
        }
    }

    let family = data.family();
    for (c, row) in data.values().outer_iter().enumerate() {
        let curve = &data.curves()[c];
        for (k, &v) in row.iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            report.counts_per_point[k] += 1;
            if !family.accepts(v) {
                report.push(
                    Severity::Error,
                    "family_violation",
                    format!(
                        "subject {} visit {} time_index {}: value {} is not valid for family {}",
                        data.subjects()[curve.subject].id,
                        curve.visit_id,
                        k + 1,
                        v,
                        family.name()
                    ),
                );
            }
        }
    }

    if data.n_curves() == 0 {
        report.push(Severity::Error, "empty_dataset", "dataset contains no observations".into());
        return report;
    }
    if data.n_subjects() < 2 {
        report.push(Severity::Error, "too_few_subjects", "at least two subjects are required".into());
    }

    let multi_visit = data.subjects().iter().filter(|s| s.curves.len() >= 2).count();
    if multi_visit == 0 {
        report.push(
            Severity::Warning,
            "no_repeated_visits",
            "every subject has a single visit: subject and subject-visit effects are confounded and the \
             level-2 covariance cannot be separated"
                .into(),
        );
    }
    if half_width == 0 {
        report.push(
            Severity::Warning,
            "single_point_bins",
            "bins hold one point, so each subject-visit contributes at most one observation per bin and \
             the subject-visit random intercept is not identifiable"
                .into(),
        );
    }
    let single = data.subjects().iter().filter(|s| s.curves.len() == 1).count();
    if single > 0 && multi_visit > 0 {
        report.push(
            Severity::Info,
            "single_visit_subjects",
            format!("{single} subject(s) contribute a single visit"),
        );
    }
    for (k, &n) in report.counts_per_point.clone().iter().enumerate() {
        if n == 0 {
            report.push(Severity::Warning, "empty_grid_point", format!("no observations at time_index {}", k + 1));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_based(bin: &[usize]) -> Vec<usize> {
        bin.iter().map(|k| k + 1).collect()
    }

    #[test]
    fn interior_bin_has_2h_plus_1_points() {
        let plan = make_bins(100, 4, false).unwrap();
        assert_eq!(plan.half_width, 2);
        assert_eq!(one_based(&plan.bins[49]), vec![48, 49, 50, 51, 52]);
    }

    #[test]
    fn cyclic_bins_wrap_around() {
        let plan = make_bins(100, 4, true).unwrap();
        assert_eq!(one_based(&plan.bins[0]), vec![99, 100, 1, 2, 3]);
        assert_eq!(one_based(&plan.bins[99]), vec![98, 99, 100, 1, 2]);
    }

    #[test]
    fn boundary_bins_are_truncated() {
        let plan = make_bins(100, 4, false).unwrap();
        assert_eq!(one_based(&plan.bins[0]), vec![1, 2, 3]);
        assert_eq!(one_based(&plan.bins[99]), vec![98, 99, 100]);
    }

    #[test]
    fn odd_width_rounds_half_width_up() {
        // 5% of 100 points: h = ceil(2.5) = 3, seven-point bins
        let plan = make_bins(100, 5, false).unwrap();
        assert_eq!(plan.half_width, 3);
        assert_eq!(plan.bins[50].len(), 7);
        // 30-minute bins on a day of minutes
        let plan = make_bins(1440, 30, true).unwrap();
        assert_eq!(plan.len(), 1440);
        assert!(plan.bins.iter().all(|b| b.len() == 31));
    }

    #[test]
    fn bin_errors() {
        assert!(matches!(make_bins(100, 100, false), Err(Error::InvalidBinWidth { .. })));
        assert!(matches!(make_bins(100, 0, false), Err(Error::InvalidBinWidth { .. })));
        assert!(matches!(make_bins(2, 1, false), Err(Error::GridTooSmall(2))));
    }

    #[test]
    fn width_rules() {
        assert_eq!(WidthRule::IndexFormula.half_width(5), 3);
        assert_eq!(WidthRule::TotalPoints.half_width(5), 2);
        assert_eq!(WidthRule::TotalPoints.half_width(6), 3);
        assert_eq!(width_from_percent(101, 5.0), 5);
        assert_eq!(width_from_percent(501, 2.0), 10);
    }

    proptest! {
        #[test]
        fn bin_cardinality_and_cover(k_len in 3usize..200, w_frac in 0.0f64..1.0, cyclic: bool) {
            let w = 1 + ((k_len - 2) as f64 * w_frac) as usize;
            let h = w.div_ceil(2);
            prop_assume!(!cyclic || 2 * h < k_len);
            let plan = make_bins(k_len, w, cyclic).unwrap();
            let mut hits = vec![0usize; k_len];
            for (k, bin) in plan.bins.iter().enumerate() {
                prop_assert!(bin.contains(&k));
                if cyclic {
                    prop_assert_eq!(bin.len(), 2 * h + 1);
                } else {
                    let lo = k.saturating_sub(h);
                    let hi = (k + h).min(k_len - 1);
                    prop_assert_eq!(bin.len(), hi - lo + 1);
                    prop_assert!(bin.len() <= 2 * h + 1);
                }
                for &i in bin {
                    hits[i] += 1;
                }
            }
            prop_assert!(hits.iter().all(|&n| n >= 1 && n <= 2 * h + 1));
            prop_assert_eq!(plan, make_bins(k_len, w, cyclic).unwrap());
        }
    }

    fn toy_binary(values: &[(&str, &str, usize, f64)]) -> MultilevelFunctionalDataset<f64> {
        let grid = SamplingGrid::uniform(5, 0.0, 0.25, false).unwrap();
        MultilevelFunctionalDataset::from_records(grid, Family::Binary, values.iter().copied())
    }

    #[test]
    fn well_formed_dataset_validates_cleanly() {
        let mut recs = Vec::new();
        for s in ["a", "b"] {
            for v in ["1", "2"] {
                for k in 0..5 {
                    recs.push((s, v, k, ((k % 2) as f64)));
                }
            }
        }
        let data = toy_binary(&recs);
        let report = validate_dataset(&data, 1);
        assert_eq!(report.error_count(), 0, "{:?}", report.entries);
        assert_eq!(report.counts_per_point, vec![4; 5]);
    }

    #[test]
    fn family_violation_names_the_record() {
        let mut recs = vec![("a", "1", 0, 0.0), ("a", "2", 1, 1.0), ("b", "1", 2, 0.0), ("b", "2", 3, 2.0)];
        recs.push(("b", "2", 4, 1.0));
        let data = toy_binary(&recs);
        let report = validate_dataset(&data, 1);
        assert_eq!(report.error_count(), 1);
        let e = report.errors().next().unwrap();
        assert_eq!(e.code, "family_violation");
        assert!(e.message.contains("subject b visit 2 time_index 4"), "{}", e.message);
    }

    #[test]
    fn duplicates_and_out_of_range_are_errors() {
        let recs = vec![("a", "1", 0, 0.0), ("a", "1", 0, 1.0), ("b", "1", 9, 0.0)];
        let data = toy_binary(&recs);
        let report = validate_dataset(&data, 1);
        let codes: Vec<_> = report.errors().map(|e| e.code.as_str()).collect();
        assert!(codes.contains(&"duplicate_record"));
        assert!(codes.contains(&"time_index_out_of_range"));
        // first value wins in the dense layout
        assert_eq!(data.values()[[0, 0]], 0.0);
    }

    #[test]
    fn single_visit_single_point_bins_warn() {
        let recs: Vec<_> = ["a", "b", "c"]
            .iter()
            .flat_map(|s| (0..5).map(move |k| (*s, "1", k, 0.0)))
            .collect();
        let data = toy_binary(&recs);
        let report = validate_dataset(&data, 0);
        let codes: Vec<_> = report.warnings().map(|e| e.code.as_str()).collect();
        assert!(codes.contains(&"no_repeated_visits"));
        assert!(codes.contains(&"single_point_bins"));
        assert_eq!(report.error_count(), 0);
    }

    #[test]
    fn grid_invariants() {
        assert!(matches!(SamplingGrid::new(vec![0.0, 1.0], false), Err(Error::GridTooSmall(2))));
        assert!(SamplingGrid::new(vec![0.0, 1.0, 1.0], false).is_err());
        let g = SamplingGrid::<f64>::unit_interval(100).unwrap();
        assert_eq!(g.len(), 101);
        assert!((g.spacing() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0f64) >= 0.0);
        assert!((logistic(logit(0.3f64)) - 0.3).abs() < 1e-15);
    }
}
