use rand::Rng as _;
use rayon::prelude::*;

use super::{initial_distribution, transition_probs, HealthState, LifeTable, ModelOutputs, NatHistParams};
use super::{CYCLES, START_AGE};
use crate::rng::{substream, tag};
use crate::{Error, Result};

const S: usize = HealthState::COUNT;

/// Categorical distribution prepared for inversion sampling.
#[derive(Clone, Copy)]
struct Categorical {
    cdf: [f64; S],
    last: usize,
}

impl Categorical {
    fn new(p: &[f64; S]) -> Self {
        let mut cdf = [0.0; S];
        let mut acc = 0.0;
        let mut last = 0;
        for (j, &pj) in p.iter().enumerate() {
            acc += pj;
            cdf[j] = acc;
            if pj > 0.0 {
                last = j;
            }
        }
        Categorical { cdf, last }
    }

    fn sample(&self, u: f64) -> usize {
        self.cdf.iter().position(|&c| u < c).unwrap_or(self.last)
    }
}

#[derive(Clone)]
struct Tally {
    occupancy: Vec<[u64; S]>,
    new_early: Vec<u64>,
    new_late: Vec<u64>,
}

impl Tally {
    fn new() -> Self {
        Tally {
            occupancy: vec![[0; S]; CYCLES + 1],
            new_early: vec![0; CYCLES],
            new_late: vec![0; CYCLES],
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        for (a, b) in self.occupancy.iter_mut().zip(&other.occupancy) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.new_early.iter_mut().zip(&other.new_early) {
            *a += b;
        }
        for (a, b) in self.new_late.iter_mut().zip(&other.new_late) {
            *a += b;
        }
        self
    }
}

/// Simulates `n` independent individuals and summarises them with the same
/// output definitions as the cohort model.
///
/// Individual `i` draws from its own substream of `seed`, so the result does
/// not depend on how the work is scheduled across threads.
pub fn run_microsim(params: &NatHistParams, lt: &LifeTable, n: usize, seed: u64) -> Result<ModelOutputs> {
    use HealthState::*;
    if n == 0 {
        return Err(Error::Argument("microsimulation needs at least one individual".into()));
    }
    params.validate()?;
    let init = Categorical::new(&initial_distribution(params)?);
    let steps: Vec<[Categorical; S]> = (0..CYCLES)
        .map(|k| {
            let p = transition_probs(params, (START_AGE as usize + k) as f64, lt)?;
            Ok(std::array::from_fn(|i| Categorical::new(&p[i])))
        })
        .collect::<Result<_>>()?;
    let base_rng = substream(seed, tag::MICROSIM, 0);

    let tally = (0..n as u64)
        .into_par_iter()
        .fold(Tally::new, |mut t, i| {
            let mut rng = base_rng.clone();
            rng.set_stream(i);
            let mut state = init.sample(rng.random());
            for k in 0..CYCLES {
                t.occupancy[k][state] += 1;
                if HealthState::ALL[state].is_absorbing() {
                    for row in &mut t.occupancy[k + 1..] {
                        row[state] += 1;
                    }
                    return t;
                }
                let next = steps[k][state].sample(rng.random());
                if next == ClinEarly.index() && state == PreclinEarly.index() {
                    t.new_early[k] += 1;
                } else if next == ClinLate.index() && state == PreclinLate.index() {
                    t.new_late[k] += 1;
                }
                state = next;
            }
            t.occupancy[CYCLES][state] += 1;
            t
        })
        .reduce(Tally::new, Tally::merge);

    let to_f64 = |xs: &[u64]| xs.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let occupancy: Vec<[f64; S]> = tally
        .occupancy
        .iter()
        .map(|row| std::array::from_fn(|j| row[j] as f64))
        .collect();
    let out = ModelOutputs::from_occupancy(&occupancy, &to_f64(&tally.new_early), &to_f64(&tally.new_late));
    if out.degenerate {
        log::warn!("microsimulation (n={n}, seed={seed}) had empty denominators; affected outputs reported as 0");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nathist::run_cohort;

    #[test]
    fn same_seed_is_bit_identical() {
        let p = NatHistParams::base_case();
        let lt = LifeTable::bundled();
        let a = run_microsim(&p, &lt, 2000, 42).unwrap();
        let b = run_microsim(&p, &lt, 2000, 42).unwrap();
        let c = run_microsim(&p, &lt, 2000, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn frozen_model_keeps_initial_split() {
        let params = NatHistParams {
            l: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            lambda6: 0.0,
            lambda7: 0.0,
            lambda8: 0.0,
            ..NatHistParams::base_case()
        };
        let out = run_microsim(&params, &LifeTable::zero(), 50_000, 1).unwrap();
        // carriers of small/large adenomas: 50,000 * 0.216 = 10,800; binomial SE of 0.71 ~ 0.0044
        for b in 0..9 {
            assert!((out.prop_small[b] - 0.71).abs() < 0.02);
            assert_eq!(out.prop_small[b], out.prop_small[0]);
        }
    }

    #[test]
    fn large_microsim_matches_cohort() {
        let p = NatHistParams::base_case();
        let lt = LifeTable::bundled();
        let n = 100_000;
        let micro = run_microsim(&p, &lt, n, 7).unwrap().to_vec();
        let (trace, cohort) = run_cohort(&p, &lt).unwrap();
        let cohort = cohort.to_vec();
        for (i, (m, c)) in micro.iter().zip(&cohort).enumerate() {
            let se = binomial_se(i, c, &trace, n);
            assert!((m - c).abs() <= 5.0 * se, "output {i}: micro {m} cohort {c} se {se}");
        }
    }

    /// Conservative SE of an output: binomial on the smallest denominator in the bin.
    pub(crate) fn binomial_se(i: usize, value: &f64, trace: &crate::nathist::CohortTrace, n: usize) -> f64 {
        use crate::nathist::{ModelOutputs, Series, BIN_WIDTH};
        let (series, bin) = ModelOutputs::locate(i);
        let rows = &trace.rows[bin * BIN_WIDTH..(bin + 1) * BIN_WIDTH];
        let den = |r: &[f64; S]| -> f64 {
            match series {
                Series::AdenomaPrev => HealthState::ALL.iter().filter(|s| s.is_alive()).map(|s| r[s.index()]).sum(),
                Series::PropSmall => r[1] + r[2],
                _ => HealthState::ALL.iter().filter(|s| s.is_undiagnosed()).map(|s| r[s.index()]).sum(),
            }
        };
        let count = match series {
            Series::AdenomaPrev | Series::PropSmall => rows.iter().map(den).fold(f64::INFINITY, f64::min),
            _ => rows.iter().map(den).sum(),
        } * n as f64;
        let v = value.clamp(1e-12, 1.0);
        (v * (1.0 - v) / count).sqrt().max(1e-12)
    }
}
