//! Summary tables and plot data from a run directory.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use gmfpca::domain::Family;
use gmfpca::io::{self, DecompositionFile};
use gmfpca::{Error, Result};
use serde_json::{json, Value};

use crate::commands::{RunDir, FIT_MANIFEST, SCORES_MANIFEST, SIMULATE_MANIFEST};

/// Share of subjects in each tail of the score profiles.
const TAIL: f64 = 0.1;

fn rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    Ok(r.records().collect::<std::result::Result<_, _>>()?)
}

fn num(row: &csv::StringRecord, i: usize) -> Result<f64> {
    let s = row.get(i).unwrap_or("");
    s.parse().map_err(|_| Error::Parse(format!("bad number {s:?}")))
}

fn grid_start(manifest: &Value) -> f64 {
    manifest["config"]["data"]["start"].as_f64().unwrap_or(0.0)
}

fn family_of(manifest: &Value) -> Family {
    manifest["counts"]["family"].as_str().and_then(Family::parse).unwrap_or(Family::Binary)
}

pub fn report_cmd(run_dir: &Path, out: &Path) -> Result<Value> {
    let started = std::time::Instant::now();
    let found = |name: &str| -> Result<Option<Value>> {
        let p = run_dir.join(name);
        if p.is_file() {
            Ok(Some(io::read_json(&p)?))
        } else {
            Ok(None)
        }
    };
    let (sim, fit, scores) = (found(SIMULATE_MANIFEST)?, found(FIT_MANIFEST)?, found(SCORES_MANIFEST)?);
    if sim.is_none() && fit.is_none() && scores.is_none() {
        return Err(Error::NoRunFound(run_dir.display().to_string()));
    }
    let mut run = RunDir::create(out)?;
    let mut stages = Vec::new();
    let mut summary = json!({});

    if let Some(m) = &sim {
        stages.push("simulate");
        summary["positive_rate"] = m["positive_rate"].clone();
        if run_dir.join("replicate_table.csv").is_file() {
            let cells = io::read_table_csv(&run_dir.join("replicate_table.csv"))?;
            io::write_table_csv(&run.path("summary_table.csv"), &cells)?;
            run.record("summary_table.csv")?;
            summary["table"] = json!(cells);
            eigenvalue_boxplot(run_dir, &mut run)?;
        }
    }
    if let Some(m) = &fit {
        stages.push("fit");
        let d: DecompositionFile = io::read_json(&run_dir.join("decomposition.json"))?;
        let start = grid_start(m);
        let mut w = csv::Writer::from_path(run.path("plot_eigenfunctions.csv"))?;
        w.write_record(["level", "component", "time_index", "s", "value"])?;
        for (level, f) in [(1, &d.level1), (2, &d.level2)] {
            for (c, col) in f.eigenfunctions.iter().enumerate() {
                for (k, v) in col.iter().enumerate() {
                    let s = start + d.spacing * k as f64;
                    w.write_record([level.to_string(), (c + 1).to_string(), (k + 1).to_string(), s.to_string(), v.to_string()])?;
                }
            }
        }
        w.flush()?;
        run.record("plot_eigenfunctions.csv")?;
        summary["eigenvalues"] = json!({ "level1": d.level1.eigenvalues, "level2": d.level2.eigenvalues });
        summary["level1_share"] = m["level1_share"].clone();
        summary["bins"] = m["bins"].clone();
    }
    if let Some(m) = &scores {
        stages.push("scores");
        l2e_table(run_dir, &mut run)?;
        let (start, spacing) = match &fit {
            Some(f) => (grid_start(f), io::read_json::<DecompositionFile>(&run_dir.join("decomposition.json"))?.spacing),
            None => (0.0, 1.0),
        };
        score_profiles(run_dir, &mut run, family_of(m), start, spacing)?;
        summary["max_rhat"] = m["max_rhat"].clone();
        summary["groups"] = m["groups"].clone();
    }
    summary["stages"] = json!(stages);
    run.finish("report", summary, started, &[])
}

fn eigenvalue_boxplot(run_dir: &Path, run: &mut RunDir) -> Result<()> {
    let outcomes: Vec<Value> = io::read_json(&run_dir.join("replicates.json"))?;
    let mut w = csv::Writer::from_path(run.path("plot_eigenvalues.csv"))?;
    w.write_record(["replicate", "level", "component", "eigenvalue"])?;
    for o in &outcomes {
        for (level, key) in [(1, "level1_eigenvalues"), (2, "level2_eigenvalues")] {
            for (c, v) in o[key].as_array().into_iter().flatten().enumerate() {
                w.write_record([o["replicate"].to_string(), level.to_string(), (c + 1).to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    run.record("plot_eigenvalues.csv")
}

/// One row per subject with a column per level-2 component.
fn l2e_table(run_dir: &Path, run: &mut RunDir) -> Result<()> {
    let mut by_subject: Vec<(String, Vec<String>)> = Vec::new();
    let mut n = 0;
    for row in rows(&run_dir.join("l2e_sd.csv"))? {
        let id = row.get(0).unwrap_or("").to_string();
        let c: usize = row.get(1).unwrap_or("").parse().map_err(|_| Error::Parse("bad component".into()))?;
        n = n.max(c);
        match by_subject.last_mut() {
            Some((last, v)) if *last == id => v.push(row.get(2).unwrap_or("NA").to_string()),
            _ => by_subject.push((id, vec![row.get(2).unwrap_or("NA").to_string()])),
        }
    }
    let mut w = csv::Writer::from_path(run.path("report_l2e_sd.csv"))?;
    let mut head = vec!["subject_id".to_string()];
    head.extend((1..=n).map(|c| format!("l2e_sd_{c}")));
    w.write_record(&head)?;
    for (id, v) in by_subject {
        let mut rec = vec![id];
        rec.extend(v);
        w.write_record(&rec)?;
    }
    w.flush()?;
    run.record("report_l2e_sd.csv")
}

/// Mean fitted curves of the subjects in the upper and lower tails of each
/// level-1 score.
fn score_profiles(run_dir: &Path, run: &mut RunDir, family: Family, start: f64, spacing: f64) -> Result<()> {
    let mut scores: BTreeMap<usize, Vec<(f64, String)>> = BTreeMap::new();
    for row in rows(&run_dir.join("scores_level1.csv"))? {
        let c: usize = row.get(1).unwrap_or("").parse().map_err(|_| Error::Parse("bad component".into()))?;
        scores.entry(c).or_default().push((num(&row, 2)?, row.get(0).unwrap_or("").to_string()));
    }
    let mut curves: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
    let mut current: Option<(String, String)> = None;
    for row in rows(&run_dir.join("fitted_eta.csv"))? {
        let key = (row.get(0).unwrap_or("").to_string(), row.get(1).unwrap_or("").to_string());
        let list = curves.entry(key.0.clone()).or_default();
        if current.as_ref() != Some(&key) {
            list.push(Vec::new());
            current = Some(key);
        }
        list.last_mut().expect("pushed").push(num(&row, 3)?);
    }
    let mut w = csv::Writer::from_path(run.path("plot_score_profiles.csv"))?;
    w.write_record(["component", "group", "time_index", "s", "mean_eta", "mean_response", "subjects"])?;
    for (c, mut list) in scores {
        list.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n_tail = ((list.len() as f64 * TAIL).round() as usize).max(1);
        for (group, members) in [("low", &list[..n_tail]), ("high", &list[list.len() - n_tail..])] {
            let rows: Vec<&Vec<f64>> = members.iter().filter_map(|(_, id)| curves.get(id)).flatten().collect();
            let k_len = rows.first().map_or(0, |r| r.len());
            for k in 0..k_len {
                let eta = rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
                let resp = rows.iter().map(|r| family.mean(r[k])).sum::<f64>() / rows.len() as f64;
                let s = start + spacing * k as f64;
                w.write_record([
                    c.to_string(),
                    group.to_string(),
                    (k + 1).to_string(),
                    s.to_string(),
                    eta.to_string(),
                    resp.to_string(),
                    members.len().to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    run.record("plot_score_profiles.csv")
}
