mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gmfpca::domain::Family;
use gmfpca::pipeline::BinWidth;
use gmfpca::scores::{FixedEffects, VariancePrior};
use gmfpca::simulation::{BasisCase, SimulationConfig};
use gmfpca::Error;
use serde_json::json;

use config::{parse_bin_width, parse_prior, DataConfig, PipelineConfig};

#[derive(Parser)]
#[command(name = "gmfpca", version, about = "Multilevel functional PCA for binary and count data")]
struct Cli {
    /// Worker threads (default: all available).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset with known truth, optionally a replicate study.
    Simulate(SimulateArgs),
    /// Bin, fit local mixed models and decompose (Steps 1 to 3).
    Fit(FitArgs),
    /// Bayesian score estimation on a saved decomposition.
    Scores(ScoresArgs),
    /// Summary tables and plot data for a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    /// Long-format CSV `subject_id,visit_id,time_index,value`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Grid size K of the input.
    #[arg(long)]
    grid_points: Option<usize>,
    /// The domain wraps around (e.g. time of day).
    #[arg(long)]
    cyclic: bool,
    #[arg(long, value_parser = parse_family)]
    family: Option<Family>,
    /// Derive binary data as `value >= threshold` (10.558 for MIMS).
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct DecompositionArgs {
    /// Window width: points (`30`) or percent of the grid (`5%`).
    #[arg(long, value_parser = parse_bin_width)]
    bin_width: Option<BinWidth>,
    /// Covariance smoother half-support in grid steps.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    pve_threshold: Option<f64>,
    #[arg(long)]
    max_components: Option<usize>,
    /// Fixed component counts `L,M` instead of the PVE rule.
    #[arg(long, value_parser = parse_pair)]
    components: Option<(usize, usize)>,
}

#[derive(Args)]
struct SamplerArgs {
    /// Score variance prior: `inverse-gamma[:a]`, `half-cauchy[:scale]`, `uniform[:upper]`.
    #[arg(long, value_parser = parse_prior)]
    prior: Option<VariancePrior>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    /// Sample scores on N equally spaced grid points.
    #[arg(long)]
    downsample: Option<usize>,
    /// Sample independent groups of about G subjects.
    #[arg(long)]
    group_size: Option<usize>,
    /// Re-estimate the mean function inside the sampler.
    #[arg(long)]
    refit_mean: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_parser = parse_family)]
    family: Option<Family>,
    /// Eigenfunction design, 1 or 2.
    #[arg(long, value_parser = parse_case)]
    case: Option<BasisCase>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    visits: Option<usize>,
    /// K; the grid has K + 1 points.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    b0: Option<f64>,
    /// Run the full pipeline on this many replicates.
    #[arg(long)]
    replicates: Option<usize>,
    #[command(flatten)]
    decomposition: DecompositionArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    decomposition: DecompositionArgs,
}

#[derive(Args)]
struct ScoresArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// `decomposition.json` written by `fit`.
    #[arg(long, required = true)]
    decomposition: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding the outputs of earlier commands.
    #[arg(long, required = true)]
    run: PathBuf,
    /// Where to write the report (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_family(s: &str) -> Result<Family, String> {
    Family::parse(s).ok_or_else(|| format!("unknown family {s:?} (binary, poisson, gaussian)"))
}

fn parse_case(s: &str) -> Result<BasisCase, String> {
    BasisCase::parse(s).ok_or_else(|| format!("unknown case {s:?} (1 or 2)"))
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected L,M, got {s:?}"))?;
    Ok((a.trim().parse().map_err(|_| format!("bad count {a:?}"))?, b.trim().parse().map_err(|_| format!("bad count {b:?}"))?))
}

fn base_config(common: &CommonArgs) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.out.is_some() {
        cfg.output = common.out.clone();
    }
    Ok(cfg)
}

impl DataArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(input) = &self.input {
            cfg.simulation = None;
            cfg.data.get_or_insert_with(DataConfig::default).input = input.clone();
        }
        if let Some(d) = cfg.data.as_mut() {
            if let Some(k) = self.grid_points {
                d.points = k;
            }
            d.cyclic |= self.cyclic;
            if let Some(f) = self.family {
                d.family = f;
            }
            if self.threshold.is_some() {
                d.threshold = self.threshold;
            }
        }
    }
}

impl DecompositionArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let p = &mut cfg.pipeline;
        if let Some(w) = self.bin_width {
            p.bin_width = w;
        }
        if self.bandwidth.is_some() {
            p.mfpca.bandwidth = self.bandwidth;
        }
        if let Some(t) = self.pve_threshold {
            p.mfpca.pve_threshold = t;
        }
        if let Some(m) = self.max_components {
            p.mfpca.max_components = m;
        }
        if self.components.is_some() {
            p.mfpca.n_components = self.components;
        }
    }
}

impl SamplerArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let p = &mut cfg.pipeline;
        if let Some(prior) = &self.prior {
            p.priors.level1 = prior.clone();
            p.priors.level2 = prior.clone();
        }
        if let Some(w) = self.warmup {
            p.mcmc.warmup = w;
        }
        if let Some(i) = self.iters {
            p.mcmc.iters = i;
        }
        if let Some(c) = self.chains {
            p.mcmc.chains = c;
        }
        if self.downsample.is_some() {
            p.downsample = self.downsample;
        }
        if self.group_size.is_some() {
            p.group_size = self.group_size;
        }
        if self.refit_mean {
            p.fixed_effects = FixedEffects::RefitPointwise;
        }
    }
}

fn output_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| PathBuf::from("gmfpca-run"))
}

/// Configuration of the fit that wrote `decomposition`, if none is given.
fn inherit_fit_config(cfg: &mut PipelineConfig, decomposition: &std::path::Path) -> Result<(), Error> {
    if cfg.data.is_some() || cfg.simulation.is_some() {
        return Ok(());
    }
    let dir = decomposition.parent().unwrap_or(std::path::Path::new("."));
    let manifest = dir.join(commands::FIT_MANIFEST);
    if !manifest.is_file() {
        return Ok(());
    }
    let m: serde_json::Value = gmfpca::io::read_json(&manifest)?;
    let fit: PipelineConfig = serde_json::from_value(m["config"].clone())?;
    cfg.data = fit.data;
    cfg.simulation = fit.simulation;
    Ok(())
}

fn run(cli: Cli) -> Result<serde_json::Value, Error> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::InvalidConfig("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate(a) => {
            let mut cfg = base_config(&a.common)?;
            let sim = cfg.simulation.get_or_insert_with(SimulationConfig::default);
            if let Some(f) = a.family {
                sim.family = f;
            }
            if let Some(c) = a.case {
                sim.basis = c;
            }
            if let Some(i) = a.subjects {
                sim.subjects = i;
            }
            if let Some(j) = a.visits {
                sim.visits = j;
            }
            if let Some(k) = a.points {
                sim.points = k;
            }
            if let Some(b0) = a.b0 {
                sim.b0 = b0;
            }
            if let Some(r) = a.replicates {
                cfg.replicates = r;
            }
            cfg.data = None;
            a.decomposition.apply(&mut cfg);
            a.sampler.apply(&mut cfg);
            cfg.apply_seed();
            cfg.validate()?;
            commands::simulate_cmd(&cfg, &output_dir(&cfg))
        }
        Command::Fit(a) => {
            let mut cfg = base_config(&a.common)?;
            a.data.apply(&mut cfg);
            a.decomposition.apply(&mut cfg);
            cfg.apply_seed();
            cfg.validate()?;
            commands::fit_cmd(&cfg, &output_dir(&cfg))
        }
        Command::Scores(a) => {
            let mut cfg = base_config(&a.common)?;
            a.data.apply(&mut cfg);
            inherit_fit_config(&mut cfg, &a.decomposition)?;
            a.sampler.apply(&mut cfg);
            cfg.apply_seed();
            cfg.validate()?;
            commands::scores_cmd(&cfg, &a.decomposition, &output_dir(&cfg))
        }
        Command::Report(a) => {
            let out = a.out.unwrap_or_else(|| a.run.clone());
            report::report_cmd(&a.run, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(manifest) => {
            let brief = json!({
                "command": manifest["command"],
                "counts": manifest.get("counts"),
                "outputs": manifest["outputs"].as_object().map(|o| o.keys().cloned().collect::<Vec<_>>()),
            });
            println!("{}", serde_json::to_string_pretty(&brief).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code: u8 = if matches!(e, Error::InvalidConfig(_)) { 2 } else { 1 };
            let body = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
