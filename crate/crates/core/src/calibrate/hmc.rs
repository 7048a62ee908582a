//! Hamiltonian Monte Carlo with a jittered number of leapfrog steps.
//!
//! Warmup tunes the step size by dual averaging towards the target
//! acceptance rate and estimates a diagonal inverse mass matrix from the
//! draws of the second half of warmup.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::posterior::{ChainStats, Posterior};
use super::LogDensity;
use crate::rng::{substream, tag, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    /// Base leapfrog step count; each iteration uses a uniform draw from
    /// `[(1 - jitter) L, (1 + jitter) L]`.
    pub leapfrog_steps: usize,
    pub step_jitter: f64,
    pub target_accept: f64,
    /// Energy error beyond which a trajectory counts as divergent.
    pub max_energy_error: f64,
    /// Adam ascent steps applied to each random initial point before
    /// warmup; 0 starts warmup at the random point.
    pub init_ascent_steps: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            chains: 4,
            warmup: 1000,
            samples: 1000,
            leapfrog_steps: 20,
            step_jitter: 0.2,
            target_accept: 0.8,
            max_energy_error: 1000.0,
            init_ascent_steps: 500,
            seed: 1,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.warmup == 0 || self.samples == 0 || self.leapfrog_steps == 0 {
            return Err(Error::Argument("HMC chain, warmup, sample and leapfrog counts must be >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Argument(format!(
                "target acceptance must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return Err(Error::Argument("step jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Step-size adaptation of Hoffman & Gelman.
struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_eps_bar: f64,
    count: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            target,
            h_bar: 0.0,
            log_eps_bar: 0.0,
            count: 0.0,
        }
    }

    /// Feeds one acceptance probability and returns the next step size.
    fn update(&mut self, accept: f64) -> f64 {
        self.count += 1.0;
        let w = 1.0 / (self.count + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        let log_eps = self.mu - self.count.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.count.powf(-Self::KAPPA);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

struct State {
    x: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Trajectory {
    accept_prob: f64,
    divergent: bool,
    proposal: State,
}

fn kinetic(p: &[f64], inv_metric: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
}

/// Runs `steps` leapfrog steps from `start` with momentum `p` (modified in place).
fn leapfrog<T: LogDensity + ?Sized>(target: &T, start: &State, p: &mut [f64], eps: f64, steps: usize, inv_metric: &[f64], evals: &mut usize) -> State {
    let mut x = start.x.clone();
    let mut grad = start.grad.clone();
    let mut logp = start.logp;
    for _ in 0..steps {
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * eps * g;
        }
        for ((xi, pi), m) in x.iter_mut().zip(p.iter()).zip(inv_metric) {
            *xi += eps * m * pi;
        }
        logp = target.log_density_grad(&x, &mut grad);
        *evals += 1;
        if !logp.is_finite() {
            break;
        }
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * eps * g;
        }
    }
    State { x, grad, logp }
}

/// Change in total energy after `steps` leapfrog steps of size `eps` from
/// `x` with momentum `p` and unit mass.
pub fn leapfrog_energy_error<T: LogDensity + ?Sized>(target: &T, x: &[f64], p: &[f64], eps: f64, steps: usize) -> f64 {
    let mut grad = vec![0.0; target.dim()];
    let logp = target.log_density_grad(x, &mut grad);
    let start = State { x: x.to_vec(), grad, logp };
    let ones = vec![1.0; target.dim()];
    let h0 = -logp + kinetic(p, &ones);
    let mut p = p.to_vec();
    let mut evals = 0;
    let end = leapfrog(target, &start, &mut p, eps, steps, &ones, &mut evals);
    -end.logp + kinetic(&p, &ones) - h0
}

fn transition<T: LogDensity + ?Sized>(
    target: &T,
    cur: &State,
    eps: f64,
    steps: usize,
    inv_metric: &[f64],
    max_energy_error: f64,
    rng: &mut Rng,
    evals: &mut usize,
) -> Trajectory {
    let mut p: Vec<f64> = inv_metric
        .iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            z / m.sqrt()
        })
        .collect();
    let h0 = -cur.logp + kinetic(&p, inv_metric);
    let proposal = leapfrog(target, cur, &mut p, eps, steps, inv_metric, evals);
    let h1 = -proposal.logp + kinetic(&p, inv_metric);
    let delta = h1 - h0;
    if !delta.is_finite() || delta > max_energy_error {
        return Trajectory { accept_prob: 0.0, divergent: true, proposal };
    }
    Trajectory {
        accept_prob: (-delta).exp().min(1.0),
        divergent: false,
        proposal,
    }
}

/// Heuristic initial step size: doubles or halves until the one-step
/// acceptance probability crosses 0.5.
fn initial_step_size<T: LogDensity + ?Sized>(target: &T, cur: &State, inv_metric: &[f64], rng: &mut Rng, evals: &mut usize) -> f64 {
    let mut eps = 0.1;
    let accept = |eps: f64, rng: &mut Rng, evals: &mut usize| {
        let t = transition(target, cur, eps, 1, inv_metric, f64::INFINITY, rng, evals);
        if t.proposal.logp.is_finite() {
            t.accept_prob
        } else {
            0.0
        }
    };
    let first = accept(eps, rng, evals);
    let grow = first > 0.5;
    for _ in 0..60 {
        let next = if grow { eps * 2.0 } else { eps / 2.0 };
        let a = accept(next, rng, evals);
        if grow && a < 0.5 {
            break;
        }
        eps = next;
        if !grow && a > 0.5 {
            break;
        }
    }
    eps
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    stats: ChainStats,
}

fn run_chain<T: LogDensity + ?Sized>(target: &T, cfg: &HmcConfig, chain: usize) -> Result<ChainOutput> {
    let dim = target.dim();
    let mut rng = substream(cfg.seed, tag::HMC_CHAIN, chain as u64);
    let mut evals = 0usize;

    let mut cur = None;
    for _ in 0..100 {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut grad = vec![0.0; dim];
        let logp = target.log_density_grad(&x, &mut grad);
        evals += 1;
        if logp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            cur = Some(State { x, grad, logp });
            break;
        }
    }
    let mut cur = cur.ok_or_else(|| Error::Domain(format!("chain {chain}: no finite initial point found")))?;
    if cfg.init_ascent_steps > 0 {
        cur = ascend(target, cur, cfg.init_ascent_steps, &mut evals);
    }

    let mut inv_metric = vec![1.0; dim];
    let mut eps = initial_step_size(target, &cur, &inv_metric, &mut rng, &mut evals);
    let mut adapt = DualAveraging::new(eps, cfg.target_accept);

    let term = (cfg.warmup / 10).max(1);
    let window = cfg.warmup / 2..cfg.warmup.saturating_sub(term);
    let mut window_draws: Vec<Vec<f64>> = Vec::new();

    let mut draws = Vec::with_capacity(cfg.samples);
    let mut stats = ChainStats::default();
    let mut accept_sum = 0.0;
    let lo = ((1.0 - cfg.step_jitter) * cfg.leapfrog_steps as f64).round().max(1.0) as usize;
    let hi = ((1.0 + cfg.step_jitter) * cfg.leapfrog_steps as f64).round().max(lo as f64) as usize;

    for it in 0..cfg.warmup + cfg.samples {
        let steps = rng.random_range(lo..=hi);
        let t = transition(target, &cur, eps, steps, &inv_metric, cfg.max_energy_error, &mut rng, &mut evals);
        if !t.divergent && rng.random::<f64>() < t.accept_prob {
            cur = t.proposal;
        }

        if it < cfg.warmup {
            if t.divergent {
                stats.warmup_divergences += 1;
            }
            eps = adapt.update(t.accept_prob);
            if window.contains(&it) {
                window_draws.push(cur.x.clone());
            }
            if it + 1 == window.end && window_draws.len() >= 10 {
                inv_metric = regularized_variance(&window_draws);
                eps = initial_step_size(target, &cur, &inv_metric, &mut rng, &mut evals);
                adapt = DualAveraging::new(eps, cfg.target_accept);
            }
            if it + 1 == cfg.warmup {
                eps = adapt.final_step();
                stats.step_size = eps;
            }
        } else {
            if t.divergent {
                stats.divergences += 1;
            }
            accept_sum += t.accept_prob;
            draws.push(target.to_natural(&cur.x));
        }
    }
    stats.mean_accept = accept_sum / cfg.samples as f64;
    stats.inv_metric = inv_metric;
    stats.gradient_evaluations = evals;
    Ok(ChainOutput { draws, stats })
}

/// Adam ascent on the log density. Keeps the best finite point seen.
fn ascend<T: LogDensity + ?Sized>(target: &T, start: State, steps: usize, evals: &mut usize) -> State {
    const LR: f64 = 0.05;
    let dim = start.x.len();
    let (mut m, mut v) = (vec![0.0; dim], vec![0.0; dim]);
    let mut x = start.x.clone();
    let mut grad = start.grad.clone();
    let mut best = start;
    for t in 1..=steps {
        let (b1, b2) = (1.0 - 0.9f64.powi(t as i32), 1.0 - 0.999f64.powi(t as i32));
        for j in 0..dim {
            m[j] = 0.9 * m[j] + 0.1 * grad[j];
            v[j] = 0.999 * v[j] + 0.001 * grad[j] * grad[j];
            x[j] += LR * (m[j] / b1) / ((v[j] / b2).sqrt() + 1e-8);
        }
        let logp = target.log_density_grad(&x, &mut grad);
        *evals += 1;
        if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            break;
        }
        if logp > best.logp {
            best = State { x: x.clone(), grad: grad.clone(), logp };
        }
    }
    best
}

fn regularized_variance(draws: &[Vec<f64>]) -> Vec<f64> {
    let n = draws.len() as f64;
    (0..draws[0].len())
        .map(|j| {
            let col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
            let var = crate::stats::variance(&col);
            (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
        })
        .collect()
}

/// Samples `target` with independent chains. Chain `c` draws from substream
/// `c` of the configured seed, so the result does not depend on scheduling.
pub fn hmc_sample<T: LogDensity + ?Sized>(target: &T, cfg: &HmcConfig) -> Result<Posterior> {
    cfg.validate()?;
    let started = Instant::now();
    let outputs: Vec<Result<ChainOutput>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(target, cfg, c))
        .collect();
    let outputs: Vec<ChainOutput> = outputs.into_iter().collect::<Result<_>>()?;
    let (chains, stats): (Vec<_>, Vec<_>) = outputs.into_iter().map(|o| (o.draws, o.stats)).unzip();
    let mut posterior = Posterior::from_chains("hmc", target.param_names(), chains, stats);
    posterior.evaluations = posterior.chain_stats.iter().map(|s| s.gradient_evaluations).sum();
    posterior.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(posterior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::{FlatLikelihood, LogPosterior, StandardNormal};
    use crate::doe::PriorSpec;
    use crate::stats;

    #[test]
    fn standard_normal_is_recovered() {
        let cfg = HmcConfig { seed: 3, ..HmcConfig::default() };
        let post = hmc_sample(&StandardNormal { dim: 9 }, &cfg).unwrap();
        for s in &post.summary {
            assert!(s.mean.abs() <= 4.0 / s.ess.sqrt(), "{s:?}");
            assert!((s.sd * s.sd - 1.0).abs() <= 0.1, "{s:?}");
            assert!(s.rhat.unwrap() <= 1.02, "{s:?}");
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let cfg = HmcConfig {
            chains: 2,
            warmup: 100,
            samples: 50,
            seed: 8,
            ..HmcConfig::default()
        };
        let a = hmc_sample(&StandardNormal { dim: 3 }, &cfg).unwrap();
        let b = hmc_sample(&StandardNormal { dim: 3 }, &cfg).unwrap();
        assert_eq!(a.chains, b.chains);
        let c = hmc_sample(&StandardNormal { dim: 3 }, &HmcConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.chains, c.chains);
    }

    #[test]
    fn leapfrog_error_is_second_order() {
        let target = StandardNormal { dim: 9 };
        let x: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.3).collect();
        let p: Vec<f64> = (0..9).map(|i| ((i * 7) % 5) as f64 * 0.4 - 0.8).collect();
        // fixed trajectory length 1.0
        let errs: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&eps| leapfrog_energy_error(&target, &x, &p, eps, (1.0 / eps as f64).round() as usize).abs())
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.0..5.0).contains(&ratio), "{errs:?}");
        }
    }

    #[test]
    fn flat_likelihood_recovers_uniform_prior() {
        let priors = PriorSpec::crc();
        let lp = LogPosterior::new(FlatLikelihood, &priors);
        let cfg = HmcConfig { seed: 5, ..HmcConfig::default() };
        let post = hmc_sample(&lp, &cfg).unwrap();
        let draws = post.draws();
        assert_eq!(draws.len(), 4000);
        for (j, r) in priors.ranges.iter().enumerate() {
            let col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
            assert!(col.iter().all(|&v| v >= r.lower && v <= r.upper));
            let ks = stats::ks_uniform(&col, r.lower, r.upper);
            assert!(ks < 0.05, "{}: KS {ks}", r.name);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = HmcConfig { target_accept: 1.0, ..HmcConfig::default() };
        assert!(hmc_sample(&StandardNormal { dim: 2 }, &bad).is_err());
        let bad = HmcConfig { chains: 0, ..HmcConfig::default() };
        assert!(hmc_sample(&StandardNormal { dim: 2 }, &bad).is_err());
    }
}
