//! File formats: long-format observations, latent predictors, decomposition
//! tables, score tables and replicate tables. `time_index` is 1-based in
//! every file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::domain::{Family, MultilevelFunctionalDataset, SamplingGrid};
use crate::error::{Error, Result};
use crate::local_glmm::LatentPredictorMatrix;
use crate::mfpca::{LevelDecomposition, MfpcaDecomposition};
use crate::pipeline::TableCell;
use crate::scores::ScorePosterior;
use crate::simulation::SimulationTruth;

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

/// Reads `subject_id,visit_id,time_index,value` records. Rows whose index is
/// outside `1..=K` or that repeat a triple end up in
/// [`MultilevelFunctionalDataset::rejected`].
pub fn read_long_csv<R: Read>(input: R, grid: SamplingGrid<f64>, family: Family) -> Result<MultilevelFunctionalDataset<f64>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse(format!("missing column {name}")))
    };
    let (cs, cv, ck, cz) = (col("subject_id")?, col("visit_id")?, col("time_index")?, col("value")?);
    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let k: i64 = field(ck).parse().map_err(|_| Error::Parse(format!("row {}: bad time_index {:?}", line + 2, field(ck))))?;
        let v: f64 = match field(cz) {
            "" | "NA" | "NaN" | "nan" => continue,
            s => s.parse().map_err(|_| Error::Parse(format!("row {}: bad value {s:?}", line + 2)))?,
        };
        // out-of-range indices are kept for the validation report
        let k0 = if k >= 1 { (k - 1) as usize } else { usize::MAX };
        records.push((field(cs).to_string(), field(cv).to_string(), k0, v));
    }
    Ok(MultilevelFunctionalDataset::from_records(grid, family, records))
}

pub fn read_long_csv_file(path: &Path, grid: SamplingGrid<f64>, family: Family) -> Result<MultilevelFunctionalDataset<f64>> {
    read_long_csv(BufReader::new(File::open(path)?), grid, family)
}

pub fn write_long_csv(path: &Path, data: &MultilevelFunctionalDataset<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["subject_id", "visit_id", "time_index", "value"])?;
    for (c, curve) in data.curves().iter().enumerate() {
        let sid = &data.subjects()[curve.subject].id;
        for (k, &v) in data.values().row(c).iter().enumerate() {
            if !v.is_nan() {
                w.write_record([sid.as_str(), curve.visit_id.as_str(), &(k + 1).to_string(), &v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_eta_csv(path: &Path, data: &MultilevelFunctionalDataset<f64>, latent: &LatentPredictorMatrix<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["subject_id", "visit_id", "time_index", "eta_hat", "provenance"])?;
    for (c, curve) in data.curves().iter().enumerate() {
        let sid = &data.subjects()[curve.subject].id;
        for k in 0..latent.grid_len() {
            let status = latent.bins.get(k).map_or("unknown", |b| b.status.as_str());
            w.write_record([sid.as_str(), &curve.visit_id, &(k + 1).to_string(), &latent.eta[[c, k]].to_string(), status])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads an `eta_hat` dump back, aligned with the curves of `data`.
pub fn read_eta_csv(path: &Path, data: &MultilevelFunctionalDataset<f64>) -> Result<Array2<f64>> {
    let mut lookup = std::collections::HashMap::new();
    for (c, curve) in data.curves().iter().enumerate() {
        lookup.insert((data.subjects()[curve.subject].id.clone(), curve.visit_id.clone()), c);
    }
    let k_len = data.grid().len();
    let mut eta = Array2::from_elem((data.n_curves(), k_len), f64::NAN);
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(File::open(path)?));
    for row in reader.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or("");
        let c = *lookup
            .get(&(get(0).to_string(), get(1).to_string()))
            .ok_or_else(|| Error::Parse(format!("unknown curve {} / {}", get(0), get(1))))?;
        let k: usize = get(2).parse().map_err(|_| Error::Parse(format!("bad time_index {}", get(2))))?;
        if k == 0 || k > k_len {
            return Err(Error::Parse(format!("time_index {k} outside 1..={k_len}")));
        }
        eta[[c, k - 1]] = get(3).parse().map_err(|_| Error::Parse(format!("bad eta_hat {}", get(3))))?;
    }
    Ok(eta)
}

pub fn write_eigenfunctions_csv(path: &Path, d: &MfpcaDecomposition<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["level", "component", "time_index", "value"])?;
    for (level, dec) in [(1, &d.level1), (2, &d.level2)] {
        for c in 0..dec.n_components() {
            for (k, v) in dec.eigenfunctions.column(c).iter().enumerate() {
                w.write_record([level.to_string(), (c + 1).to_string(), (k + 1).to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_eigenvalues_csv(path: &Path, d: &MfpcaDecomposition<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["level", "component", "eigenvalue", "pve", "cumulative_pve", "total_proportion", "sssod"])?;
    let (t1, t2) = d.total_proportions();
    for (level, dec, total) in [(1, &d.level1, &t1), (2, &d.level2, &t2)] {
        for c in 0..dec.n_components() {
            w.write_record([
                level.to_string(),
                (c + 1).to_string(),
                dec.eigenvalues[c].to_string(),
                dec.pve[c].to_string(),
                dec.cumulative_pve[c].to_string(),
                total[c].to_string(),
                dec.sssod[c].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Everything later stages need from a decomposition, at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionFile {
    pub spacing: f64,
    pub mean: Vec<f64>,
    pub visit_means: Vec<Vec<f64>>,
    pub level1: LevelFile,
    pub level2: LevelFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelFile {
    /// One vector per component.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub spectrum: Vec<f64>,
    pub pve: Vec<f64>,
    pub cumulative_pve: Vec<f64>,
    pub sssod: Vec<f64>,
}

impl From<&LevelDecomposition<f64>> for LevelFile {
    fn from(d: &LevelDecomposition<f64>) -> Self {
        Self {
            eigenfunctions: d.eigenfunctions.columns().into_iter().map(|c| c.to_vec()).collect(),
            eigenvalues: d.eigenvalues.clone(),
            spectrum: d.spectrum.clone(),
            pve: d.pve.clone(),
            cumulative_pve: d.cumulative_pve.clone(),
            sssod: d.sssod.clone(),
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], n: usize, transpose: bool) -> Result<Array2<f64>> {
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Parse("ragged matrix in decomposition file".into()));
    }
    let m = Array2::from_shape_fn((rows.len(), n), |(i, j)| rows[i][j]);
    Ok(if transpose { m.reversed_axes() } else { m })
}

impl LevelFile {
    fn to_level(&self, k: usize) -> Result<LevelDecomposition<f64>> {
        Ok(LevelDecomposition {
            eigenfunctions: rows_to_matrix(&self.eigenfunctions, k, true)?,
            eigenvalues: self.eigenvalues.clone(),
            spectrum: self.spectrum.clone(),
            pve: self.pve.clone(),
            cumulative_pve: self.cumulative_pve.clone(),
            sssod: self.sssod.clone(),
        })
    }
}

impl From<&MfpcaDecomposition<f64>> for DecompositionFile {
    fn from(d: &MfpcaDecomposition<f64>) -> Self {
        Self {
            spacing: d.spacing,
            mean: d.mean.clone(),
            visit_means: d.visit_means.rows().into_iter().map(|r| r.to_vec()).collect(),
            level1: (&d.level1).into(),
            level2: (&d.level2).into(),
        }
    }
}

impl DecompositionFile {
    pub fn to_decomposition(&self) -> Result<MfpcaDecomposition<f64>> {
        let k = self.mean.len();
        Ok(MfpcaDecomposition {
            spacing: self.spacing,
            mean: self.mean.clone(),
            visit_means: rows_to_matrix(&self.visit_means, k, false)?,
            level1: self.level1.to_level(k)?,
            level2: self.level2.to_level(k)?,
        })
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_level1_scores_csv(path: &Path, data: &MultilevelFunctionalDataset<f64>, post: &ScorePosterior<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["subject_id", "component", "posterior_mean", "posterior_sd"])?;
    for (s, subject) in data.subjects().iter().enumerate() {
        for l in 0..post.level1_mean.ncols() {
            w.write_record([
                subject.id.clone(),
                (l + 1).to_string(),
                post.level1_mean[[s, l]].to_string(),
                post.level1_sd[[s, l]].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_level2_scores_csv(path: &Path, data: &MultilevelFunctionalDataset<f64>, post: &ScorePosterior<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["subject_id", "visit_id", "component", "posterior_mean", "posterior_sd"])?;
    for (c, curve) in data.curves().iter().enumerate() {
        for m in 0..post.level2_mean.ncols() {
            w.write_record([
                data.subjects()[curve.subject].id.clone(),
                curve.visit_id.clone(),
                (m + 1).to_string(),
                post.level2_mean[[c, m]].to_string(),
                post.level2_sd[[c, m]].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_l2e_sd_csv(path: &Path, data: &MultilevelFunctionalDataset<f64>, post: &ScorePosterior<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["subject_id", "component", "l2e_sd"])?;
    for (s, subject) in data.subjects().iter().enumerate() {
        for m in 0..post.l2e_sd.ncols() {
            let v = post.l2e_sd[[s, m]];
            let text = if v.is_nan() { "NA".to_string() } else { v.to_string() };
            w.write_record([subject.id.clone(), (m + 1).to_string(), text])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reconstructed linear predictors after score estimation.
pub fn write_fitted_eta_csv(path: &Path, data: &MultilevelFunctionalDataset<f64>, eta: &Array2<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["subject_id", "visit_id", "time_index", "eta"])?;
    for (c, curve) in data.curves().iter().enumerate() {
        let sid = &data.subjects()[curve.subject].id;
        for (k, v) in eta.row(c).iter().enumerate() {
            w.write_record([sid.as_str(), &curve.visit_id, &(k + 1).to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the truth of a simulated dataset: eigenfunctions, scores and
/// linear predictors, into `dir`.
pub fn write_truth(dir: &Path, data: &MultilevelFunctionalDataset<f64>, truth: &SimulationTruth<f64>) -> Result<()> {
    let mut w = writer(&dir.join("truth_eigenfunctions.csv"))?;
    w.write_record(["level", "component", "time_index", "value"])?;
    for (level, f) in [(1, &truth.phi), (2, &truth.psi)] {
        for c in 0..f.ncols() {
            for (k, v) in f.column(c).iter().enumerate() {
                w.write_record([level.to_string(), (c + 1).to_string(), (k + 1).to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;

    let mut w = writer(&dir.join("truth_scores_level1.csv"))?;
    w.write_record(["subject_id", "component", "score"])?;
    for (s, subject) in data.subjects().iter().enumerate() {
        for l in 0..truth.xi.ncols() {
            w.write_record([subject.id.clone(), (l + 1).to_string(), truth.xi[[s, l]].to_string()])?;
        }
    }
    w.flush()?;

    let mut w = writer(&dir.join("truth_scores_level2.csv"))?;
    w.write_record(["subject_id", "visit_id", "component", "score"])?;
    for (c, curve) in data.curves().iter().enumerate() {
        for m in 0..truth.zeta.ncols() {
            w.write_record([
                data.subjects()[curve.subject].id.clone(),
                curve.visit_id.clone(),
                (m + 1).to_string(),
                truth.zeta[[c, m]].to_string(),
            ])?;
        }
    }
    w.flush()?;
    write_fitted_eta_csv(&dir.join("truth_eta.csv"), data, &truth.eta)
}

/// Reads a `level,component,time_index,value` file into `(level 1, level 2)`
/// matrices of `K x components`.
pub fn read_eigenfunctions_csv(path: &Path) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut entries: Vec<(usize, usize, usize, f64)> = Vec::new();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(File::open(path)?));
    for row in reader.records() {
        let row = row?;
        let num = |i: usize| -> Result<usize> {
            row.get(i).unwrap_or("").parse().map_err(|_| Error::Parse(format!("bad integer in {:?}", row)))
        };
        let v: f64 = row.get(3).unwrap_or("").parse().map_err(|_| Error::Parse(format!("bad value in {:?}", row)))?;
        entries.push((num(0)?, num(1)?, num(2)?, v));
    }
    let build = |level: usize| {
        let sel: Vec<_> = entries.iter().filter(|e| e.0 == level).collect();
        let nc = sel.iter().map(|e| e.1).max().unwrap_or(0);
        let nk = sel.iter().map(|e| e.2).max().unwrap_or(0);
        let mut m = Array2::zeros((nk, nc));
        for e in sel {
            m[[e.2 - 1, e.1 - 1]] = e.3;
        }
        m
    };
    Ok((build(1), build(2)))
}

pub fn write_table_csv(path: &Path, cells: &[TableCell]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["scenario", "metric", "mean", "n_ok", "n_failed"])?;
    for c in cells {
        let mean = c.mean.map_or_else(|| "NA".to_string(), |v| v.to_string());
        w.write_record([c.scenario.clone(), c.metric.clone(), mean, c.n_ok.to_string(), c.n_failed.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table_csv(path: &Path) -> Result<Vec<TableCell>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(File::open(path)?));
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or("").to_string();
        let parse_count = |i: usize| get(i).parse::<usize>().map_err(|_| Error::Parse(format!("bad count {}", get(i))));
        out.push(TableCell {
            scenario: get(0),
            metric: get(1),
            mean: match get(2).as_str() {
                "NA" => None,
                s => Some(s.parse().map_err(|_| Error::Parse(format!("bad mean {s}")))?),
            },
            n_ok: parse_count(3)?,
            n_failed: parse_count(4)?,
        });
    }
    Ok(out)
}
