//! Posterior draws, summaries and convergence diagnostics.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::stats;
use crate::{Error, Result};

/// Split-R-hat above this fails the diagnostics.
pub const RHAT_FAIL: f64 = 1.05;
/// Share of divergent post-warmup transitions above which a warning is raised.
pub const DIVERGENCE_WARN: f64 = 0.10;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub mean_accept: f64,
    pub step_size: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub gradient_evaluations: usize,
    pub inv_metric: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    /// Split-R-hat; undefined for a single chain.
    pub rhat: Option<f64>,
    /// Bulk effective sample size.
    pub ess: f64,
}

impl ParamSummary {
    fn from_chains(name: &str, chains: &[Vec<f64>]) -> Self {
        let all: Vec<f64> = chains.iter().flatten().copied().collect();
        let mut sorted = all.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        ParamSummary {
            name: name.to_string(),
            mean: stats::mean(&all),
            sd: stats::std_dev(&all),
            q025: stats::quantile_sorted(&sorted, 0.025),
            q50: stats::quantile_sorted(&sorted, 0.5),
            q975: stats::quantile_sorted(&sorted, 0.975),
            rhat: stats::split_rhat(chains),
            ess: stats::bulk_ess(chains),
        }
    }

    /// Whether `value` falls inside the central 95% interval.
    pub fn covers(&self, value: f64) -> bool {
        self.q025 <= value && value <= self.q975
    }
}

/// Draws from one calibration method, grouped by chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub method: String,
    pub param_names: Vec<String>,
    /// `chains[c][i]` is draw `i` of chain `c`, in natural units.
    #[serde(skip)]
    pub chains: Vec<Vec<Vec<f64>>>,
    pub summary: Vec<ParamSummary>,
    pub chain_stats: Vec<ChainStats>,
    /// Log-density or simulator evaluations spent.
    pub evaluations: usize,
    pub wall_clock_secs: f64,
}

impl Posterior {
    pub fn from_chains(method: &str, param_names: Vec<String>, chains: Vec<Vec<Vec<f64>>>, chain_stats: Vec<ChainStats>) -> Self {
        let mut p = Posterior {
            method: method.to_string(),
            param_names,
            chains,
            summary: Vec::new(),
            chain_stats,
            evaluations: 0,
            wall_clock_secs: 0.0,
        };
        p.summarize();
        p
    }

    fn summarize(&mut self) {
        self.summary = self
            .param_names
            .iter()
            .enumerate()
            .map(|(j, name)| ParamSummary::from_chains(name, &self.column(j)))
            .collect();
    }

    /// Parameter `j` split by chain.
    pub fn column(&self, j: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.iter().map(|d| d[j]).collect()).collect()
    }

    /// All draws, chains concatenated.
    pub fn draws(&self) -> Vec<Vec<f64>> {
        self.chains.iter().flatten().cloned().collect()
    }

    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    pub fn means(&self) -> Vec<f64> {
        self.summary.iter().map(|s| s.mean).collect()
    }

    pub fn summary_for(&self, name: &str) -> Option<&ParamSummary> {
        self.summary.iter().find(|s| s.name == name)
    }

    /// Writes `chain,iter,<params>` rows.
    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        for c in comments {
            writeln!(f, "# {c}").map_err(|e| Error::io(path, e))?;
        }
        let mut w = csv::Writer::from_writer(f);
        let mut header = vec!["chain".to_string(), "iter".to_string()];
        header.extend(self.param_names.iter().cloned());
        w.write_record(&header)?;
        for (c, chain) in self.chains.iter().enumerate() {
            for (i, d) in chain.iter().enumerate() {
                let mut rec = vec![c.to_string(), i.to_string()];
                rec.extend(d.iter().map(|v| format!("{v:e}")));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads draws written by [`Posterior::write_csv`]. Sampler statistics
    /// are not stored in the CSV and come back empty.
    pub fn read_csv(path: &Path, method: &str) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let body: String = BufReader::new(f)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(path, e))?
            .into_iter()
            .filter(|l| !l.starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n");
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "chain" || &header[1] != "iter" {
            return Err(Error::format(path, "expected header chain,iter,<parameters>"));
        }
        let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let mut chains: Vec<Vec<Vec<f64>>> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let c: usize = rec[0].parse().map_err(|_| Error::format(path, format!("bad chain index {:?}", &rec[0])))?;
            let draw = rec
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>().map_err(|_| Error::format(path, format!("bad value {v:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            if c >= chains.len() {
                chains.resize(c + 1, Vec::new());
            }
            chains[c].push(draw);
        }
        if chains.iter().all(Vec::is_empty) {
            return Err(Error::format(path, "no draws"));
        }
        chains.retain(|c| !c.is_empty());
        Ok(Posterior::from_chains(method, names, chains, Vec::new()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiagnosticStatus {
    Pass,
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub status: DiagnosticStatus,
    pub max_rhat: Option<f64>,
    pub min_ess: f64,
    pub divergence_rate: f64,
    pub messages: Vec<String>,
}

/// Convergence checks on a sampled posterior.
pub fn diagnostics(post: &Posterior) -> Diagnostics {
    let mut status = DiagnosticStatus::Pass;
    let mut messages = Vec::new();
    let max_rhat = post.summary.iter().filter_map(|s| s.rhat).reduce(f64::max);
    let min_ess = post.summary.iter().map(|s| s.ess).fold(f64::INFINITY, f64::min);

    if post.chains.len() < 2 {
        status = DiagnosticStatus::Warn;
        messages.push("single chain: R-hat unavailable".to_string());
    }
    let divergent: usize = post.chain_stats.iter().map(|s| s.divergences).sum();
    let divergence_rate = if post.n_draws() > 0 {
        divergent as f64 / post.n_draws() as f64
    } else {
        0.0
    };
    if divergence_rate > DIVERGENCE_WARN {
        status = DiagnosticStatus::Warn;
        messages.push(format!("{:.1}% of transitions diverged", 100.0 * divergence_rate));
    }
    for s in &post.summary {
        if let Some(r) = s.rhat {
            if r > RHAT_FAIL {
                status = DiagnosticStatus::Fail;
                messages.push(format!("{}: R-hat {r:.3} exceeds {RHAT_FAIL}", s.name));
            }
        }
    }
    Diagnostics {
        status,
        max_rhat,
        min_ess,
        divergence_rate,
        messages,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_chains(n_chains: usize, n: usize, offsets: &[f64]) -> Vec<Vec<Vec<f64>>> {
        (0..n_chains)
            .map(|c| {
                let mut rng = substream(4, 90, c as u64);
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        vec![z + offsets[c], 2.0 * z]
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn summaries_of_normal_draws() {
        let p = Posterior::from_chains("t", vec!["a".into(), "b".into()], normal_chains(4, 1000, &[0.0; 4]), vec![]);
        let a = &p.summary[0];
        assert!(a.mean.abs() < 0.1);
        assert!((a.q975 - 1.96).abs() < 0.15);
        assert!((p.summary[1].sd - 2.0).abs() < 0.1);
        assert_eq!(diagnostics(&p).status, DiagnosticStatus::Pass);
        assert!(a.covers(0.0) && !a.covers(3.0));
    }

    #[test]
    fn disagreeing_chains_fail() {
        let p = Posterior::from_chains("t", vec!["a".into(), "b".into()], normal_chains(4, 500, &[0.0, 0.0, 0.0, 3.0]), vec![]);
        let d = diagnostics(&p);
        assert_eq!(d.status, DiagnosticStatus::Fail);
        assert!(d.messages.iter().any(|m| m.starts_with("a:")));
    }

    #[test]
    fn single_chain_warns() {
        let p = Posterior::from_chains("t", vec!["a".into(), "b".into()], normal_chains(1, 500, &[0.0]), vec![]);
        let d = diagnostics(&p);
        assert_eq!(d.status, DiagnosticStatus::Warn);
        assert!(d.max_rhat.is_none());
    }

    #[test]
    fn many_divergences_warn() {
        let stats = vec![ChainStats { divergences: 300, ..Default::default() }];
        let chains = normal_chains(2, 1000, &[0.0, 0.0]);
        let p = Posterior::from_chains("t", vec!["a".into(), "b".into()], chains, stats);
        assert_eq!(diagnostics(&p).status, DiagnosticStatus::Warn);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("post.csv");
        let p = Posterior::from_chains("hmc", vec!["a".into(), "b".into()], normal_chains(2, 30, &[0.0, 1.0]), vec![]);
        p.write_csv(&path, &["seed 4".to_string()]).unwrap();
        let q = Posterior::read_csv(&path, "hmc").unwrap();
        assert_eq!(p.chains, q.chains);
        assert_eq!(p.summary, q.summary);
    }
}
