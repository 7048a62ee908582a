//! Incremental mixture importance sampling on the cohort simulator.
//!
//! Sampling happens in unit-cube coordinates of the prior box, where the
//! prior density is 1 and Euclidean distance is the Mahalanobis distance
//! scaled by the prior ranges.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{Likelihood, Posterior};
use crate::doe::PriorSpec;
use crate::nathist::{run_cohort, LifeTable, NatHistParams, TargetSet};
use crate::rng::{substream, tag};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImisConfig {
    pub n_initial: usize,
    /// Points drawn from each new mixture component; also the neighbourhood size.
    pub batch: usize,
    pub max_iterations: usize,
    /// Size of the final weighted resample.
    pub resample: usize,
    pub seed: u64,
    /// Fixed simulator-evaluation budget. When set, the unique-fraction
    /// stopping rule and `max_iterations` are ignored and iterations run
    /// until the budget is spent.
    pub max_evaluations: Option<usize>,
}

impl Default for ImisConfig {
    fn default() -> Self {
        ImisConfig {
            n_initial: 1000,
            batch: 100,
            max_iterations: 100,
            resample: 4000,
            seed: 1,
            max_evaluations: None,
        }
    }
}

impl ImisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_initial == 0 || self.batch == 0 || self.max_iterations == 0 || self.resample == 0 {
            return Err(Error::Argument("IMIS counts must all be >= 1".into()));
        }
        if self.batch > self.n_initial {
            return Err(Error::Argument(format!(
                "IMIS batch {} exceeds the initial sample {}",
                self.batch, self.n_initial
            )));
        }
        Ok(())
    }
}

/// Expected share of distinct points in a resample of size `j` drawn with
/// replacement from normalised `weights`.
pub fn effective_unique_fraction(weights: &[f64], j: usize) -> f64 {
    let j_f = j as f64;
    weights.iter().map(|&w| -(j_f * (-w).ln_1p()).exp_m1()).sum::<f64>() / j_f
}

/// Multivariate normal component in unit-cube coordinates.
#[derive(Debug, Clone)]
pub struct Component {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Component {
    /// Factorises `cov`, adding a ridge when it is not positive definite.
    /// The flag reports whether the ridge was needed.
    fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<(Self, bool)> {
        let d = mean.len();
        let (cov, chol, ridged) = match Cholesky::new(cov.clone()) {
            Some(c) => (cov, c.l(), false),
            None => {
                let reg = &cov + DMatrix::identity(d, d) * RIDGE;
                let c = Cholesky::new(reg.clone())
                    .ok_or_else(|| Error::Domain("mixture covariance not positive definite after ridge".into()))?;
                (reg, c.l(), true)
            }
        };
        let log_det: f64 = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = -0.5 * (d as f64 * LN_2PI + log_det);
        Ok((Component { mean, cov, chol, log_norm }, ridged))
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mean;
        let z = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }

    fn sample(&self, rng: &mut crate::rng::Rng) -> Vec<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.mean + &self.chol * z).iter().copied().collect()
    }
}

fn ln_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Every point drawn so far, with its log likelihood (`-inf` outside the
/// box) and the log of the summed component densities at that point.
#[derive(Debug, Clone, Default)]
pub struct MixtureState {
    pub points: Vec<Vec<f64>>,
    pub log_lik: Vec<f64>,
    log_sum_components: Vec<f64>,
    pub components: Vec<Component>,
    n_initial: usize,
    batch: usize,
}

impl MixtureState {
    /// `ln q_mix` at point `i`, with the prior density equal to 1 in the cube.
    fn log_mixture(&self, i: usize) -> f64 {
        let n = self.points.len() as f64;
        let prior = (self.n_initial as f64 / n).ln();
        let comps = (self.batch as f64 / n).ln() + self.log_sum_components[i];
        ln_add_exp(prior, comps)
    }

    /// Normalised importance weights `L p / q_mix`.
    pub fn weights(&self) -> Vec<f64> {
        let logw: Vec<f64> = (0..self.points.len())
            .map(|i| {
                if self.log_lik[i] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    self.log_lik[i] - self.log_mixture(i)
                }
            })
            .collect();
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return vec![1.0 / logw.len() as f64; logw.len()];
        }
        let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }

    /// Mixture density divided by the prior share, at point `i`; at least 1
    /// inside the box.
    pub fn mixture_over_prior_share(&self, i: usize) -> f64 {
        (self.log_mixture(i) - (self.n_initial as f64 / self.points.len() as f64).ln()).exp()
    }

    fn push_points(&mut self, pts: Vec<Vec<f64>>, log_lik: Vec<f64>) {
        for p in pts {
            let s = self
                .components
                .iter()
                .fold(f64::NEG_INFINITY, |acc, c| ln_add_exp(acc, c.log_density(&p)));
            self.log_sum_components.push(s);
            self.points.push(p);
        }
        self.log_lik.extend(log_lik);
    }

    fn push_component(&mut self, c: Component) {
        for (p, s) in self.points.iter().zip(self.log_sum_components.iter_mut()) {
            *s = ln_add_exp(*s, c.log_density(p));
        }
        self.components.push(c);
    }
}

/// Outcome of an IMIS run with its mixture and stopping history.
#[derive(Debug, Clone)]
pub struct ImisRun {
    pub posterior: Posterior,
    pub state: MixtureState,
    pub iterations: usize,
    /// Unique-fraction statistic after each weighting, starting with the prior sample.
    pub unique_fraction: Vec<f64>,
    pub converged: bool,
    pub ridge_events: usize,
}

fn in_cube(z: &[f64]) -> bool {
    z.iter().all(|v| (0.0..=1.0).contains(v))
}

fn evaluate<L: Likelihood + ?Sized>(lik: &L, priors: &PriorSpec, pts: &[Vec<f64>]) -> (Vec<f64>, usize) {
    let ll: Vec<f64> = pts
        .par_iter()
        .map(|z| {
            if !in_cube(z) {
                return f64::NEG_INFINITY;
            }
            let v = lik.log_likelihood(&to_natural(priors, z));
            if v.is_nan() {
                f64::NEG_INFINITY
            } else {
                v
            }
        })
        .collect();
    (ll, pts.iter().filter(|z| in_cube(z)).count())
}

fn to_natural(priors: &PriorSpec, z: &[f64]) -> Vec<f64> {
    priors.ranges.iter().zip(z).map(|(r, v)| r.lower + r.width() * v).collect()
}

/// Gaussian centred at `centre` with the weighted covariance of its `b`
/// nearest points.
fn neighbour_component(state: &MixtureState, weights: &[f64], centre: usize, b: usize) -> Result<(Component, bool)> {
    let x0 = &state.points[centre];
    let d = x0.len();
    let mut idx: Vec<(f64, usize)> = state
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.iter().zip(x0).map(|(a, c)| (a - c).powi(2)).sum::<f64>(), i))
        .collect();
    let k = b.min(idx.len());
    idx.select_nth_unstable_by(k - 1, |a, c| a.0.total_cmp(&c.0).then(a.1.cmp(&c.1)));
    let n = state.points.len() as f64;
    let mean = DVector::from_column_slice(x0);
    let mut cov = DMatrix::zeros(d, d);
    let mut total = 0.0;
    for &(_, i) in &idx[..k] {
        let omega = (weights[i] + 1.0 / n) / 2.0;
        let diff = DVector::from_column_slice(&state.points[i]) - &mean;
        cov += &diff * diff.transpose() * omega;
        total += omega;
    }
    Component::new(mean, cov / total)
}

/// Runs IMIS and returns the full run record.
pub fn imis_run_detailed<L: Likelihood + ?Sized>(lik: &L, priors: &PriorSpec, cfg: &ImisConfig) -> Result<ImisRun> {
    cfg.validate()?;
    let started = Instant::now();
    let d = priors.dim();
    let target_fraction = 1.0 - (-1.0f64).exp();

    let mut rng = substream(cfg.seed, tag::IMIS, 0);
    let initial: Vec<Vec<f64>> = (0..cfg.n_initial)
        .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
        .collect();
    let (ll, mut evaluations) = evaluate(lik, priors, &initial);
    let mut state = MixtureState {
        n_initial: cfg.n_initial,
        batch: cfg.batch,
        ..Default::default()
    };
    state.push_points(initial, ll);

    let mut weights = state.weights();
    let mut unique_fraction = vec![effective_unique_fraction(&weights, cfg.resample)];
    let mut converged = false;
    let mut iterations = 0;
    let mut ridge_events = 0;
    loop {
        match cfg.max_evaluations {
            Some(budget) if evaluations >= budget => break,
            Some(_) => {}
            None => {
                if *unique_fraction.last().unwrap() >= target_fraction {
                    converged = true;
                    break;
                }
                if iterations >= cfg.max_iterations {
                    break;
                }
            }
        }
        iterations += 1;
        let centre = weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("state is never empty");
        let (comp, ridged) = neighbour_component(&state, &weights, centre, cfg.batch)?;
        if ridged {
            ridge_events += 1;
            log::warn!("IMIS iteration {iterations}: singular neighbour covariance, ridge {RIDGE} added");
        }
        let mut rng = substream(cfg.seed, tag::IMIS, iterations as u64);
        let batch: Vec<Vec<f64>> = (0..cfg.batch).map(|_| comp.sample(&mut rng)).collect();
        let (ll, n_eval) = evaluate(lik, priors, &batch);
        evaluations += n_eval;
        state.push_component(comp);
        state.push_points(batch, ll);
        weights = state.weights();
        unique_fraction.push(effective_unique_fraction(&weights, cfg.resample));
    }

    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Domain(format!("IMIS weights: {e}")))?;
    let mut rng = substream(cfg.seed, tag::IMIS, u64::MAX);
    let draws: Vec<Vec<f64>> = (0..cfg.resample)
        .map(|_| to_natural(priors, &state.points[dist.sample(&mut rng)]))
        .collect();
    let mut posterior = Posterior::from_chains("imis", priors.names(), vec![draws], Vec::new());
    posterior.evaluations = evaluations;
    posterior.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(ImisRun {
        posterior,
        state,
        iterations,
        unique_fraction,
        converged,
        ridge_events,
    })
}

/// Runs IMIS and returns the weighted resample as a posterior.
pub fn imis_run<L: Likelihood + ?Sized>(lik: &L, priors: &PriorSpec, cfg: &ImisConfig) -> Result<Posterior> {
    imis_run_detailed(lik, priors, cfg).map(|r| r.posterior)
}

/// Normal likelihood of the targets with the cohort model as the simulator.
#[derive(Debug, Clone)]
pub struct SimulatorLikelihood<'a> {
    base: NatHistParams,
    life_table: &'a LifeTable,
    means: Vec<f64>,
    ses: Vec<f64>,
    constant: f64,
}

impl<'a> SimulatorLikelihood<'a> {
    pub fn new(base: &NatHistParams, life_table: &'a LifeTable, targets: &TargetSet) -> Self {
        let ses = targets.ses();
        let constant = -ses.iter().map(|s| s.ln() + 0.5 * LN_2PI).sum::<f64>();
        SimulatorLikelihood {
            base: *base,
            life_table,
            means: targets.means(),
            ses,
            constant,
        }
    }
}

impl Likelihood for SimulatorLikelihood<'_> {
    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        let params = self.base.with_calibrated(theta);
        let Ok((_, out)) = run_cohort(&params, self.life_table) else {
            return f64::NEG_INFINITY;
        };
        self.constant
            - out
                .to_vec()
                .iter()
                .zip(self.means.iter().zip(&self.ses))
                .map(|(p, (y, s))| ((y - p) / s).powi(2))
                .sum::<f64>()
                / 2.0
    }
}
