use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gmfpca::domain::MultilevelFunctionalDataset;
use gmfpca::io::{self, DecompositionFile};
use gmfpca::pipeline::{fit_decomposition, replicate_table, score_spec, Metric, Scenario};
use gmfpca::scores::fit_scores;
use gmfpca::simulation::{observed_mean, simulate};
use gmfpca::{Dataset, Error, Result};
use serde_json::{json, Value};

use crate::config::{hash_value, sha256_hex, PipelineConfig};

pub const SIMULATE_MANIFEST: &str = "simulate_manifest.json";
pub const FIT_MANIFEST: &str = "fit_manifest.json";
pub const SCORES_MANIFEST: &str = "scores_manifest.json";

/// Files written by one command, with their hashes.
pub struct RunDir {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: BTreeMap::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn record(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.path(name))?;
        self.files.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Writes the manifest and a diagnostics file next to it. The manifest
    /// holds nothing that varies between identical runs.
    pub fn finish(&self, command: &str, manifest: Value, started: Instant, warnings: &[String]) -> Result<Value> {
        let mut manifest = manifest;
        manifest["command"] = json!(command);
        manifest["version"] = json!(env!("CARGO_PKG_VERSION"));
        manifest["outputs"] = json!(self.files);
        io::write_json(&self.path(&format!("{command}_manifest.json")), &manifest)?;
        let diagnostics = json!({
            "command": command,
            "runtime_seconds": started.elapsed().as_secs_f64(),
            "workers": rayon::current_num_threads(),
            "warnings": warnings,
        });
        io::write_json(&self.path(&format!("{command}_diagnostics.json")), &diagnostics)?;
        Ok(manifest)
    }
}

fn header(cfg: &PipelineConfig) -> Value {
    let echo = cfg.echo();
    json!({ "config_hash": hash_value(&echo), "config": echo })
}

/// The dataset named by the configuration and a record of where it came from.
pub fn load_data(cfg: &PipelineConfig) -> Result<(Dataset, Value)> {
    cfg.require_one_source()?;
    if let Some(sim) = &cfg.simulation {
        let (data, _) = simulate::<f64>(sim)?;
        return Ok((data, json!({ "source": "simulation" })));
    }
    let d = cfg.data.as_ref().expect("one source");
    let bytes = std::fs::read(&d.input).map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", d.input.display())))?;
    let mut data = io::read_long_csv(bytes.as_slice(), d.grid()?, d.family)?;
    if let Some(t) = d.threshold {
        data = data.thresholded(t);
    }
    let record = json!({ "source": "file", "path": d.input, "sha256": sha256_hex(&bytes), "rejected_records": data.rejected().len() });
    Ok((data, record))
}

fn data_counts(data: &MultilevelFunctionalDataset<f64>) -> Value {
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    for r in data.rejected() {
        *reasons.entry(format!("{:?}", r.reason)).or_default() += 1;
    }
    json!({
        "family": data.family().name(),
        "grid_points": data.grid().len(),
        "cyclic": data.grid().is_cyclic(),
        "subjects": data.n_subjects(),
        "curves": data.n_curves(),
        "observed": data.n_observed(),
        "rejected": reasons,
        "observed_mean": observed_mean(data),
    })
}

fn study_metrics() -> Vec<Metric> {
    let mut m = vec![Metric::Mse];
    for level in [1u8, 2] {
        m.extend((1..=4).map(|component| Metric::Ise { level, component }));
    }
    for level in [1u8, 2] {
        m.extend((1..=4).map(|component| Metric::Eigenvalue { level, component }));
    }
    m
}

pub fn simulate_cmd(cfg: &PipelineConfig, out: &Path) -> Result<Value> {
    let started = Instant::now();
    let sim = cfg.simulation.clone().ok_or_else(|| Error::InvalidConfig("no simulation block".into()))?;
    let (data, truth) = simulate::<f64>(&sim)?;
    let mut run = RunDir::create(out)?;
    io::write_long_csv(&run.path("data.csv"), &data)?;
    run.record("data.csv")?;
    io::write_truth(out, &data, &truth)?;
    for f in ["truth_eigenfunctions.csv", "truth_scores_level1.csv", "truth_scores_level2.csv", "truth_eta.csv"] {
        run.record(f)?;
    }
    let mut manifest = header(cfg);
    manifest["counts"] = data_counts(&data);
    manifest["positive_rate"] = json!(observed_mean(&data));
    manifest["grid"] = json!({ "points": sim.points + 1, "start": 0.0, "end": 1.0, "cyclic": false });

    let mut warnings = Vec::new();
    if cfg.replicates > 0 {
        let name = format!("{}-{}-b0={}", sim.family.name(), sim.basis.name(), sim.b0);
        let scenario = Scenario::new(name, sim.clone(), cfg.pipeline.clone());
        let table = replicate_table(std::slice::from_ref(&scenario), cfg.replicates, &study_metrics());
        io::write_table_csv(&run.path("replicate_table.csv"), &table.cells)?;
        run.record("replicate_table.csv")?;
        let outcomes: Vec<Value> = table.outcomes[0]
            .iter()
            .enumerate()
            .map(|(rep, o)| match o {
                Ok(o) => serde_json::to_value(o).expect("outcome serializes"),
                Err(e) => {
                    warnings.push(format!("replicate {rep}: {e}"));
                    json!({ "replicate": rep, "error": e.kind(), "message": e.to_string() })
                }
            })
            .collect();
        io::write_json(&run.path("replicates.json"), &outcomes)?;
        run.record("replicates.json")?;
        manifest["replicates"] = json!(cfg.replicates);
    }
    run.finish("simulate", manifest, started, &warnings)
}

pub fn fit_cmd(cfg: &PipelineConfig, out: &Path) -> Result<Value> {
    let started = Instant::now();
    let (data, input) = load_data(cfg)?;
    let fit = fit_decomposition(&data, &cfg.pipeline)?;
    let mut run = RunDir::create(out)?;
    io::write_eta_csv(&run.path("eta.csv"), &data, &fit.latent)?;
    io::write_eigenfunctions_csv(&run.path("eigenfunctions.csv"), &fit.decomposition)?;
    io::write_eigenvalues_csv(&run.path("eigenvalues.csv"), &fit.decomposition)?;
    io::write_json(&run.path("decomposition.json"), &DecompositionFile::from(&fit.decomposition))?;
    write_bins_csv(&run.path("bins.csv"), &fit.latent.bins)?;
    for f in ["eta.csv", "eigenfunctions.csv", "eigenvalues.csv", "decomposition.json", "bins.csv"] {
        run.record(f)?;
    }
    let sizes: Vec<usize> = fit.plan.bins.iter().map(Vec::len).collect();
    let d = &fit.decomposition;
    let mut manifest = header(cfg);
    manifest["input"] = input;
    manifest["counts"] = data_counts(&data);
    manifest["bins"] = json!({
        "count": fit.plan.len(),
        "half_width": fit.plan.half_width,
        "min_points": sizes.iter().min(),
        "max_points": sizes.iter().max(),
        "status": fit.latent.status_counts(),
    });
    manifest["components"] = json!({ "level1": d.level1.n_components(), "level2": d.level2.n_components() });
    manifest["level1_share"] = json!(d.level1_share());
    let warnings: Vec<String> = fit
        .latent
        .bins
        .iter()
        .filter(|b| b.status.is_singular() || b.status.is_failure())
        .map(|b| format!("bin {}: {}", b.center + 1, b.status.as_str()))
        .collect();
    run.finish("fit", manifest, started, &warnings)
}

fn write_bins_csv(path: &Path, bins: &[gmfpca::local_glmm::BinSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["center", "status", "intercept", "sigma2_a", "sigma2_b", "log_likelihood", "outer_iterations", "n_obs"])?;
    for b in bins {
        w.write_record([
            (b.center + 1).to_string(),
            b.status.as_str().to_string(),
            b.intercept.to_string(),
            b.sigma2_a.to_string(),
            b.sigma2_b.to_string(),
            b.log_likelihood.to_string(),
            b.outer_iterations.to_string(),
            b.n_obs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn scores_cmd(cfg: &PipelineConfig, decomposition: &Path, out: &Path) -> Result<Value> {
    let started = Instant::now();
    let bytes = std::fs::read(decomposition)
        .map_err(|e| Error::InvalidConfig(format!("cannot read decomposition {}: {e}", decomposition.display())))?;
    let file: DecompositionFile = serde_json::from_slice(&bytes)?;
    let d = file.to_decomposition()?;
    let (data, input) = load_data(cfg)?;
    if d.grid_len() != data.grid().len() {
        return Err(Error::GridMismatch(format!("decomposition has {} points, data {}", d.grid_len(), data.grid().len())));
    }
    let spec = score_spec(&data, &d, &cfg.pipeline)?;
    let post = fit_scores(&data, &spec, &cfg.pipeline.mcmc)?;

    let mut run = RunDir::create(out)?;
    io::write_level1_scores_csv(&run.path("scores_level1.csv"), &data, &post)?;
    io::write_level2_scores_csv(&run.path("scores_level2.csv"), &data, &post)?;
    io::write_l2e_sd_csv(&run.path("l2e_sd.csv"), &data, &post)?;
    io::write_fitted_eta_csv(&run.path("fitted_eta.csv"), &data, &post.eta)?;
    io::write_json(&run.path("variances.json"), &json!({
        "level1": post.level1_variances,
        "level2": post.level2_variances,
        "residual": post.residual_variance,
        "groups": post.groups,
    }))?;
    for f in ["scores_level1.csv", "scores_level2.csv", "l2e_sd.csv", "fitted_eta.csv", "variances.json"] {
        run.record(f)?;
    }
    let mut manifest = header(cfg);
    manifest["input"] = input;
    manifest["decomposition"] = json!({ "path": decomposition, "sha256": sha256_hex(&bytes) });
    manifest["counts"] = data_counts(&data);
    manifest["downsample"] = match &spec.downsample {
        Some(idx) => json!({ "points": idx.len(), "time_indices": idx.iter().map(|i| i + 1).collect::<Vec<_>>() }),
        None => Value::Null,
    };
    let groups: Vec<usize> = spec.partition.as_ref().map_or_else(|| vec![data.n_subjects()], |p| p.iter().map(Vec::len).collect());
    manifest["groups"] = json!({ "count": groups.len(), "sizes": groups });
    manifest["max_rhat"] = json!(post.diagnostics.max_rhat);
    manifest["non_convergence"] = json!(post.diagnostics.non_convergence);
    run.finish("scores", manifest, started, &post.diagnostics.warnings)
}
