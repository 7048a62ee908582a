//! Summary statistics and MCMC convergence diagnostics.

use statrs::distribution::{ContinuousCDF, Normal};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Linearly interpolated quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, p)
}

/// Kolmogorov-Smirnov distance between the sample and Uniform(lower, upper).
pub fn ks_uniform(xs: &[f64], lower: f64, upper: f64) -> f64 {
    let mut u: Vec<f64> = xs.iter().map(|x| (x - lower) / (upper - lower)).collect();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    u.iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - v).max(v - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Gaussian kernel density estimate on `grid` with Silverman's bandwidth.
pub fn kde(xs: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let sd = std_dev(xs);
    let iqr = quantile(xs, 0.75) - quantile(xs, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let bw = 0.9 * spread * n.powf(-0.2);
    if !(bw > 0.0) {
        return grid.iter().map(|_| 0.0).collect();
    }
    let norm = 1.0 / (n * bw * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&g| {
            norm * xs
                .iter()
                .map(|&x| (-0.5 * ((g - x) / bw).powi(2)).exp())
                .sum::<f64>()
        })
        .collect()
}

/// Splits every chain into its first and second halves (dropping the middle
/// draw of odd-length chains).
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[n - half..n].to_vec()])
        .collect()
}

/// Potential scale reduction over equal-length chains; `None` with fewer
/// than two chains or fewer than two draws each.
pub fn rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min()?;
    if m < 2 || n < 2 {
        return None;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let within = chains.iter().map(|c| variance(&c[..n])).sum::<f64>() / m as f64;
    let between = n as f64 * variance(&means);
    if within <= 0.0 {
        return if between <= 0.0 { Some(1.0) } else { Some(f64::INFINITY) };
    }
    let nf = n as f64;
    let var_plus = (nf - 1.0) / nf * within + between / nf;
    Some((var_plus / within).sqrt())
}

/// Split-R̂: R̂ computed on chains split in half.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.len() < 2 {
        return None;
    }
    rhat(&split_chains(chains))
}

fn autocovariance(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let m = mean(xs);
    let centered: Vec<f64> = xs.iter().map(|x| x - m).collect();
    (0..n)
        .map(|lag| {
            centered[..n - lag]
                .iter()
                .zip(&centered[lag..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

/// Effective sample size across chains using Geyer's initial monotone
/// sequence on the combined autocorrelation.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return (m * n) as f64;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c)).collect();
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let var_plus = if m > 1 {
        within * (nf - 1.0) / nf + variance(&means)
    } else {
        within * (nf - 1.0) / nf
    };
    if var_plus <= 0.0 {
        return (m * n) as f64;
    }
    let rho = |t: usize| -> f64 {
        let mean_acov = acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
        1.0 - (within - mean_acov) / var_plus
    };

    let mut pair_sums = Vec::new();
    let mut t = 0;
    while t + 1 < n {
        let p = rho(t) + rho(t + 1);
        if p <= 0.0 {
            break;
        }
        let p = match pair_sums.last() {
            Some(&prev) if p > prev => prev,
            _ => p,
        };
        pair_sums.push(p);
        t += 2;
    }
    let tau = (-1.0 + 2.0 * pair_sums.iter().sum::<f64>()).max(1.0 / ((m * n) as f64).log10());
    (m * n) as f64 / tau
}

/// Replaces every draw by the normal score of its pooled rank.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pooled: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, xs)| xs.iter().enumerate().map(move |(i, &x)| (x, c, i)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = pooled.len() as f64;
    let std_normal = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < pooled.len() {
        // average rank over ties
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = std_normal.inverse_cdf((rank - 0.375) / (total + 0.25));
        for &(_, c, k) in &pooled[i..=j] {
            out[c][k] = z;
        }
        i = j + 1;
    }
    out
}

/// Bulk effective sample size: ESS of rank-normalized split chains.
pub fn bulk_ess(chains: &[Vec<f64>]) -> f64 {
    ess(&rank_normalize(&split_chains(chains)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn iid_chains(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert!((quantile(&xs, 0.5) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn ks_of_grid_is_small() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_uniform(&xs, 0.0, 1.0) <= 0.0005 + 1e-12);
        let bad: Vec<f64> = xs.iter().map(|x| x * 0.5).collect();
        assert!(ks_uniform(&bad, 0.0, 1.0) > 0.49);
    }

    #[test]
    fn rhat_of_iid_chains_is_near_one() {
        let chains = iid_chains(4, 1000, 11);
        let r = split_rhat(&chains).unwrap();
        assert!((0.99..=1.02).contains(&r), "rhat {r}");
    }

    #[test]
    fn rhat_detects_disjoint_chains() {
        let mut chains = iid_chains(4, 500, 12);
        for (k, c) in chains.iter_mut().enumerate() {
            for x in c.iter_mut() {
                *x += 10.0 * k as f64;
            }
        }
        assert!(split_rhat(&chains).unwrap() > 1.1);
    }

    #[test]
    fn rhat_needs_two_chains() {
        assert!(split_rhat(&iid_chains(1, 100, 1)).is_none());
    }

    #[test]
    fn ess_of_iid_draws_matches_count() {
        let chains = iid_chains(4, 1000, 13);
        let e = bulk_ess(&chains);
        assert!((e / 4000.0 - 1.0).abs() < 0.2, "ess {e}");
        let e = ess(&chains);
        assert!((e / 4000.0 - 1.0).abs() < 0.2, "ess {e}");
    }

    #[test]
    fn ess_of_autocorrelated_chain_is_reduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = 0.0;
        let chain: Vec<f64> = (0..4000)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = 0.9 * x + e;
                x
            })
            .collect();
        // AR(1) with phi = 0.9 has tau = (1 + phi) / (1 - phi) = 19
        let e = ess(&[chain]);
        assert!(e > 4000.0 / 19.0 * 0.6 && e < 4000.0 / 19.0 * 1.6, "ess {e}");
    }

    #[test]
    fn kde_integrates_to_one() {
        let xs: Vec<f64> = iid_chains(1, 2000, 5).remove(0);
        let grid: Vec<f64> = (0..801).map(|i| -8.0 + i as f64 * 0.02).collect();
        let d = kde(&xs, &grid);
        let area: f64 = d.iter().sum::<f64>() * 0.02;
        assert!((area - 1.0).abs() < 1e-3);
    }
}
