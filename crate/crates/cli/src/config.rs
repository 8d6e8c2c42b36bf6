//! Run configuration: a TOML file whose fields every command-line flag can
//! override.

use std::path::{Path, PathBuf};

use gmfpca::domain::{Family, SamplingGrid};
use gmfpca::pipeline::{BinWidth, PipelineOptions};
use gmfpca::scores::VariancePrior;
use gmfpca::simulation::SimulationConfig;
use gmfpca::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Long-format input and the grid it lives on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub input: PathBuf,
    /// Number of grid points `K`.
    pub points: usize,
    pub cyclic: bool,
    pub start: f64,
    pub end: f64,
    pub units: String,
    pub family: Family,
    /// Convert a continuous measurement to `1{value >= threshold}`.
    pub threshold: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            points: 0,
            cyclic: false,
            start: 0.0,
            end: 1.0,
            units: "unitless".into(),
            family: Family::Binary,
            threshold: None,
        }
    }
}

impl DataConfig {
    /// Equally spaced grid over `[start, end]`; a cyclic grid leaves out
    /// `end`, which coincides with `start`.
    pub fn grid(&self) -> Result<SamplingGrid<f64>, Error> {
        if self.points < 3 {
            return Err(Error::InvalidConfig(format!("data.points = {} (need at least 3 grid points)", self.points)));
        }
        if !(self.end > self.start) {
            return Err(Error::InvalidConfig("data.end must exceed data.start".into()));
        }
        let span = self.end - self.start;
        let step = if self.cyclic { span / self.points as f64 } else { span / (self.points - 1) as f64 };
        SamplingGrid::uniform(self.points, self.start, step, self.cyclic)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed: overrides the simulation, sampler and partition seeds.
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub data: Option<DataConfig>,
    pub simulation: Option<SimulationConfig>,
    /// Replicates of a simulation study run by `simulate`.
    pub replicates: usize,
    pub pipeline: PipelineOptions,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e.message())))
    }

    /// Pushes the global seed into every seeded stage.
    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            if let Some(sim) = self.simulation.as_mut() {
                sim.seed = seed;
            }
            self.pipeline.mcmc.seed = seed;
            self.pipeline.partition_seed = seed;
        }
    }

    /// Checks the option ranges shared by every command.
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let p = &self.pipeline;
        match p.bin_width {
            BinWidth::Points(0) => return bad("bin width must be at least one point".into()),
            BinWidth::Percent(x) if !(x > 0.0 && x < 100.0) => return bad(format!("bin width {x}% outside (0, 100)")),
            _ => {}
        }
        if !(p.mfpca.pve_threshold > 0.0 && p.mfpca.pve_threshold <= 1.0) {
            return bad(format!("pve_threshold {} outside (0, 1]", p.mfpca.pve_threshold));
        }
        if p.mfpca.max_components == 0 {
            return bad("max_components must be positive".into());
        }
        if let Some(b) = p.mfpca.bandwidth {
            if !(b >= 0.0) {
                return bad(format!("bandwidth {b} is negative"));
            }
        }
        if p.mcmc.iters < 2 || p.mcmc.chains == 0 {
            return bad("mcmc needs at least 2 iterations and 1 chain".into());
        }
        if let Some(sim) = &self.simulation {
            sim.validate()?;
        }
        Ok(())
    }

    /// Exactly one data source for commands that consume data.
    pub fn require_one_source(&self) -> Result<(), Error> {
        match (&self.data, &self.simulation) {
            (Some(_), Some(_)) => Err(Error::InvalidConfig("give either an input file or a simulation block, not both".into())),
            (None, None) => Err(Error::InvalidConfig("no input file or simulation block".into())),
            _ => Ok(()),
        }
    }

    /// The configuration as recorded in manifests, without the output path.
    pub fn echo(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.output = None;
        serde_json::to_value(&c).expect("configuration serializes")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_value(v: &serde_json::Value) -> String {
    sha256_hex(serde_json::to_string(v).expect("json value serializes").as_bytes())
}

/// `5%` or `5 %` as a percentage, a bare integer as a width in points.
pub fn parse_bin_width(s: &str) -> Result<BinWidth, String> {
    let s = s.trim();
    if let Some(p) = s.strip_suffix('%') {
        return p.trim().parse::<f64>().map(BinWidth::Percent).map_err(|_| format!("bad percentage {s:?}"));
    }
    s.parse::<usize>().map(BinWidth::Points).map_err(|_| format!("bad bin width {s:?}, expected points or a percentage"))
}

pub fn parse_prior(s: &str) -> Result<VariancePrior, String> {
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a.parse::<f64>().map_err(|_| format!("bad prior parameter in {s:?}"))?)),
        None => (s, None),
    };
    match name {
        "inverse-gamma" | "ig" => Ok(VariancePrior::InverseGamma { shape: arg.unwrap_or(1.0), scale: arg.unwrap_or(1.0) }),
        "half-cauchy" => Ok(VariancePrior::HalfCauchy { scale: arg.unwrap_or(10.0) }),
        "uniform" => Ok(VariancePrior::Uniform { upper: arg.unwrap_or(10.0) }),
        _ => Err(format!("unknown prior {name:?} (inverse-gamma, half-cauchy, uniform)")),
    }
}
