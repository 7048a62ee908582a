use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cohort::bin_label;
use super::{run_microsim, LifeTable, ModelOutputs, NatHistParams, Series};
use super::{N_BINS, N_OUTPUTS};
use crate::rng::{derive_seed, tag};
use crate::stats;
use crate::{Error, Result};

/// One calibration target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub target_id: String,
    pub series: Series,
    pub age_bin: String,
    pub mean: f64,
    pub se: f64,
}

/// The 36 calibration targets, ordered like [`ModelOutputs::to_vec`].
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub targets: Vec<Target>,
    /// Targets whose standard error was raised to the floor.
    pub floored: Vec<String>,
}

/// Lower bound on a target's standard error.
pub fn se_floor(mean: f64) -> f64 {
    1e-4 * mean.abs().max(0.01)
}

impl TargetSet {
    /// Builds targets from means and standard errors, applying the SE floor.
    pub fn from_moments(means: &[f64], ses: &[f64]) -> Result<Self> {
        if means.len() != N_OUTPUTS || ses.len() != N_OUTPUTS {
            return Err(Error::Argument(format!(
                "expected {N_OUTPUTS} target means and SEs, got {} and {}",
                means.len(),
                ses.len()
            )));
        }
        let ids = ModelOutputs::ids();
        let mut floored = Vec::new();
        let targets = (0..N_OUTPUTS)
            .map(|i| {
                let (series, bin) = ModelOutputs::locate(i);
                let floor = se_floor(means[i]);
                let se = if ses[i] < floor || !ses[i].is_finite() {
                    floored.push(ids[i].clone());
                    floor
                } else {
                    ses[i]
                };
                Target {
                    target_id: ids[i].clone(),
                    series,
                    age_bin: bin_label(bin),
                    mean: means[i],
                    se,
                }
            })
            .collect();
        Ok(TargetSet { targets, floored })
    }

    pub fn means(&self) -> Vec<f64> {
        self.targets.iter().map(|t| t.mean).collect()
    }

    pub fn ses(&self) -> Vec<f64> {
        self.targets.iter().map(|t| t.se).collect()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Writes the `target_id,series,age_bin,mean,se` CSV, preceded by optional
    /// `#` comment lines.
    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for c in comments {
            writeln!(file, "# {c}").map_err(|e| Error::io(path, e))?;
        }
        let mut w = csv::Writer::from_writer(file);
        for t in &self.targets {
            w.serialize(t)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
        let targets: Vec<Target> = rdr
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, e.to_string()))?;
        let ids = ModelOutputs::ids();
        if targets.len() != N_OUTPUTS || targets.iter().zip(&ids).any(|(t, id)| &t.target_id != id) {
            return Err(Error::format(path, format!("expected the {N_OUTPUTS} targets in canonical order")));
        }
        if let Some(t) = targets.iter().find(|t| !(t.se > 0.0) || !t.mean.is_finite()) {
            return Err(Error::format(path, format!("target {} needs a finite mean and se > 0", t.target_id)));
        }
        Ok(TargetSet { targets, floored: Vec::new() })
    }
}

/// Settings for synthetic target generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetGenConfig {
    /// Independent microsimulation runs aggregated into each target.
    pub runs: usize,
    /// Individuals per run for the adenoma series.
    pub n_adenoma: usize,
    /// Individuals per run for the incidence series.
    pub n_incid: usize,
    pub seed: u64,
    /// Reuse the first run's seeds for every run (zero between-run variance).
    pub same_seed_each_run: bool,
}

impl Default for TargetGenConfig {
    fn default() -> Self {
        TargetGenConfig {
            runs: 100,
            n_adenoma: 500,
            n_incid: 100_000,
            seed: 20_200_101,
            same_seed_each_run: false,
        }
    }
}

/// Aggregates repeated microsimulation runs into target means and standard
/// errors (sample SD over runs divided by the square root of the run count).
pub fn generate_targets(params: &NatHistParams, lt: &LifeTable, cfg: &TargetGenConfig) -> Result<TargetSet> {
    if cfg.runs < 2 {
        return Err(Error::Argument("target generation needs at least 2 runs".into()));
    }
    let mut per_run: Vec<Vec<f64>> = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs as u64 {
        let r = if cfg.same_seed_each_run { 0 } else { r };
        let adenoma = run_microsim(params, lt, cfg.n_adenoma, derive_seed(cfg.seed, tag::TARGETS, 2 * r))?;
        let incid = run_microsim(params, lt, cfg.n_incid, derive_seed(cfg.seed, tag::TARGETS, 2 * r + 1))?;
        let mut v = Vec::with_capacity(N_OUTPUTS);
        v.extend_from_slice(&adenoma.adenoma_prev);
        v.extend_from_slice(&adenoma.prop_small);
        v.extend_from_slice(&incid.incid_early);
        v.extend_from_slice(&incid.incid_late);
        per_run.push(v);
    }
    debug_assert_eq!(per_run[0].len(), 4 * N_BINS);
    let sqrt_runs = (cfg.runs as f64).sqrt();
    let (means, ses): (Vec<f64>, Vec<f64>) = (0..N_OUTPUTS)
        .map(|i| {
            let col: Vec<f64> = per_run.iter().map(|r| r[i]).collect();
            (stats::mean(&col), stats::std_dev(&col) / sqrt_runs)
        })
        .unzip();
    let set = TargetSet::from_moments(&means, &ses)?;
    if !set.floored.is_empty() {
        log::warn!("standard error floored for {} target(s): {}", set.floored.len(), set.floored.join(", "));
    }
    Ok(set)
}
