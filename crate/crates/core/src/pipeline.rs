//! Staged runner: bins, local fits, decomposition, scores; plus the
//! replicate harness over simulated scenarios.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{make_bins_with_half_width, width_from_percent, BinPlan, MultilevelFunctionalDataset, WidthRule};
use crate::error::{Error, Result};
use crate::local_glmm::{fit_all_bins, LatentPredictorMatrix, LocalGlmmOptions};
use crate::mfpca::{decompose, MfpcaDecomposition, MfpcaOptions};
use crate::scalar::Real;
use crate::scores::{
    downsample_grid, fit_scores, partition_subjects, FixedEffects, McmcOptions, PriorSpec, ScoreModelSpec, ScorePosterior,
};
use crate::simulation::{ise, mse_linear_predictor, observed_mean, simulate, SimulationConfig};

/// Window width in grid points or as a percentage of the grid size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinWidth {
    Points(usize),
    Percent(f64),
}

impl Default for BinWidth {
    fn default() -> Self {
        BinWidth::Percent(5.0)
    }
}

impl BinWidth {
    pub fn points(self, grid_size: usize) -> usize {
        match self {
            BinWidth::Points(w) => w,
            BinWidth::Percent(p) => width_from_percent(grid_size, p),
        }
    }
}

/// Bins for a grid under a width and its interpretation.
pub fn bin_plan(grid_size: usize, cyclic: bool, width: BinWidth, rule: WidthRule) -> Result<BinPlan> {
    let w = width.points(grid_size);
    if grid_size < 3 {
        return Err(Error::GridTooSmall(grid_size));
    }
    if w < 1 || w >= grid_size {
        return Err(Error::InvalidBinWidth { width: w, grid_size });
    }
    make_bins_with_half_width(grid_size, rule.half_width(w), cyclic)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub bin_width: BinWidth,
    pub width_rule: WidthRule,
    pub glmm: LocalGlmmOptions,
    pub mfpca: MfpcaOptions,
    pub priors: PriorSpec,
    pub fixed_effects: FixedEffects,
    pub mcmc: McmcOptions,
    /// Number of grid points kept for score sampling.
    pub downsample: Option<usize>,
    /// Target subjects per independently sampled group.
    pub group_size: Option<usize>,
    /// Seed of the subject partition.
    pub partition_seed: u64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            bin_width: BinWidth::default(),
            width_rule: WidthRule::default(),
            glmm: LocalGlmmOptions::default(),
            mfpca: MfpcaOptions::default(),
            priors: PriorSpec::default(),
            fixed_effects: FixedEffects::default(),
            mcmc: McmcOptions::default(),
            downsample: None,
            group_size: None,
            partition_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput<T> {
    pub plan: BinPlan,
    pub latent: LatentPredictorMatrix<T>,
    pub decomposition: MfpcaDecomposition<T>,
}

/// Steps 1 to 3. Without an explicit bandwidth the covariance smoother uses
/// the bin half-width, at least two grid steps.
pub fn fit_decomposition<T: Real>(data: &MultilevelFunctionalDataset<T>, options: &PipelineOptions) -> Result<FitOutput<T>> {
    let grid = data.grid();
    let plan = bin_plan(grid.len(), grid.is_cyclic(), options.bin_width, options.width_rule)?;
    let latent = fit_all_bins(data, &plan, &options.glmm)?;
    let mut mfpca = options.mfpca.clone();
    mfpca.visit_means |= options.glmm.visit_fixed_effects;
    if mfpca.bandwidth.is_none() {
        mfpca.bandwidth = Some(plan.half_width.max(2) as f64);
    }
    let decomposition = decompose(&latent, grid, &mfpca)?;
    Ok(FitOutput { plan, latent, decomposition })
}

/// Score model for a decomposition under the pipeline options.
pub fn score_spec<T: Real>(
    data: &MultilevelFunctionalDataset<T>,
    decomposition: &MfpcaDecomposition<T>,
    options: &PipelineOptions,
) -> Result<ScoreModelSpec<T>> {
    let mut spec = ScoreModelSpec::from_decomposition(decomposition, data.family());
    spec.priors = options.priors.clone();
    spec.fixed_effects = options.fixed_effects;
    if let Some(target) = options.downsample {
        spec.downsample = Some(downsample_grid(data.grid().len(), target)?);
    }
    if let Some(size) = options.group_size {
        spec.partition = Some(partition_subjects(data.n_subjects(), size, options.partition_seed)?);
    }
    Ok(spec)
}

#[derive(Debug, Clone)]
pub struct PipelineOutput<T> {
    pub fit: FitOutput<T>,
    pub spec: ScoreModelSpec<T>,
    pub scores: ScorePosterior<T>,
}

/// All four steps.
pub fn run_pipeline<T: Real>(data: &MultilevelFunctionalDataset<T>, options: &PipelineOptions) -> Result<PipelineOutput<T>> {
    let fit = fit_decomposition(data, options)?;
    let spec = score_spec(data, &fit.decomposition, options)?;
    let scores = fit_scores(data, &spec, &options.mcmc)?;
    Ok(PipelineOutput { fit, spec, scores })
}

/// A simulation design and the pipeline settings used on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub simulation: SimulationConfig,
    pub options: PipelineOptions,
}

impl Scenario {
    /// Four components at each level, as in the generating model.
    pub fn new(name: impl Into<String>, simulation: SimulationConfig, mut options: PipelineOptions) -> Self {
        if options.mfpca.n_components.is_none() {
            options.mfpca.n_components = Some((4, 4));
        }
        Self { name: name.into(), simulation, options }
    }
}

/// Metrics of one replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub mse: f64,
    pub ise_level1: Vec<f64>,
    pub ise_level2: Vec<f64>,
    pub level1_eigenvalues: Vec<f64>,
    pub level2_eigenvalues: Vec<f64>,
    pub step3_level1_eigenvalues: Vec<f64>,
    pub step3_level2_eigenvalues: Vec<f64>,
    pub observed_mean: f64,
    pub bin_status: BTreeMap<String, usize>,
    pub max_rhat: f64,
}

/// Simulates replicate `rep` of a scenario and runs the full pipeline on it.
/// Simulation and sampler seeds are offset by `rep`.
pub fn run_replicate(scenario: &Scenario, rep: usize) -> Result<ReplicateOutcome> {
    let mut sim = scenario.simulation.clone();
    sim.seed = sim.seed.wrapping_add(rep as u64);
    let (data, truth) = simulate::<f64>(&sim)?;
    let mut options = scenario.options.clone();
    options.mcmc.seed = options.mcmc.seed.wrapping_add(rep as u64);
    let out = run_pipeline(&data, &options)?;
    let d = &out.fit.decomposition;
    let ise_of = |est: &ndarray::Array2<f64>, truth: &ndarray::Array2<f64>| -> Result<Vec<f64>> {
        (0..est.ncols().min(truth.ncols()))
            .map(|l| ise(&est.column(l).to_vec(), &truth.column(l).to_vec(), d.spacing))
            .collect()
    };
    Ok(ReplicateOutcome {
        replicate: rep,
        mse: mse_linear_predictor(&out.scores.eta, &truth.eta)?,
        ise_level1: ise_of(&d.level1.eigenfunctions, &truth.phi)?,
        ise_level2: ise_of(&d.level2.eigenfunctions, &truth.psi)?,
        level1_eigenvalues: out.scores.level1_variances.clone(),
        level2_eigenvalues: out.scores.level2_variances.clone(),
        step3_level1_eigenvalues: d.level1.eigenvalues.clone(),
        step3_level2_eigenvalues: d.level2.eigenvalues.clone(),
        observed_mean: observed_mean(&data),
        bin_status: out.fit.latent.status_counts().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        max_rhat: out.scores.diagnostics.max_rhat,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    /// ISE of eigenfunction `component` (1-based) at `level` (1 or 2).
    Ise { level: u8, component: usize },
    /// Posterior-mean eigenvalue.
    Eigenvalue { level: u8, component: usize },
}

impl Metric {
    pub fn label(self) -> String {
        match self {
            Metric::Mse => "mse".into(),
            Metric::Ise { level, component } => format!("l{level}e{component}"),
            Metric::Eigenvalue { level, component } => format!("lambda{level}_{component}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s == "mse" {
            return Some(Metric::Mse);
        }
        if let Some(rest) = s.strip_prefix("lambda") {
            let (l, c) = rest.split_once('_')?;
            return Some(Metric::Eigenvalue { level: l.parse().ok()?, component: c.parse().ok()? });
        }
        let rest = s.strip_prefix('l')?;
        let (l, c) = rest.split_once('e')?;
        Some(Metric::Ise { level: l.parse().ok()?, component: c.parse().ok()? })
    }

    pub fn value(self, o: &ReplicateOutcome) -> Option<f64> {
        let pick = |v: &[f64], c: usize| c.checked_sub(1).and_then(|i| v.get(i).copied());
        match self {
            Metric::Mse => Some(o.mse),
            Metric::Ise { level: 1, component } => pick(&o.ise_level1, component),
            Metric::Ise { level: 2, component } => pick(&o.ise_level2, component),
            Metric::Eigenvalue { level: 1, component } => pick(&o.level1_eigenvalues, component),
            Metric::Eigenvalue { level: 2, component } => pick(&o.level2_eigenvalues, component),
            _ => None,
        }
    }
}

/// One cell of a replicate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub scenario: String,
    pub metric: String,
    /// Mean over successful replicates; `None` when all failed.
    pub mean: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug)]
pub struct ReplicateTable {
    pub cells: Vec<TableCell>,
    pub outcomes: Vec<Vec<Result<ReplicateOutcome>>>,
}

/// Runs `n_reps` replicates of every scenario and averages each metric in
/// replicate order.
pub fn replicate_table(scenarios: &[Scenario], n_reps: usize, metrics: &[Metric]) -> ReplicateTable {
    let outcomes: Vec<Vec<Result<ReplicateOutcome>>> = scenarios
        .iter()
        .map(|sc| (0..n_reps).into_par_iter().map(|rep| run_replicate(sc, rep)).collect())
        .collect();
    let mut cells = Vec::with_capacity(scenarios.len() * metrics.len());
    for (sc, outs) in scenarios.iter().zip(&outcomes) {
        for &metric in metrics {
            let values: Vec<f64> = outs.iter().filter_map(|o| o.as_ref().ok()).filter_map(|o| metric.value(o)).collect();
            let n_ok = values.len();
            cells.push(TableCell {
                scenario: sc.name.clone(),
                metric: metric.label(),
                mean: (n_ok > 0).then(|| values.iter().sum::<f64>() / n_ok as f64),
                n_ok,
                n_failed: n_reps - n_ok,
            });
        }
    }
    ReplicateTable { cells, outcomes }
}
