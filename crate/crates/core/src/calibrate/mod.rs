//! Bayesian calibration on the metamodel.
//!
//! The posterior is sampled in an unbounded space: each parameter with a
//! uniform prior on `[a, b]` is written as `a + (b - a) * logistic(u)`, and
//! the log-Jacobian of that map is added to the log density.

mod hmc;
mod posterior;

use ndarray::ArrayView1;

use crate::ann::{logistic, AnnModel};
use crate::doe::PriorSpec;
use crate::nathist::TargetSet;
use crate::{Error, Result};

pub use hmc::{hmc_sample, leapfrog_energy_error, HmcConfig};
pub use posterior::{diagnostics, ChainStats, DiagnosticStatus, Diagnostics, ParamSummary, Posterior};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Log density with gradient, over an unbounded parameter vector.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Returns the log density at `x` and writes its gradient into `grad`.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x{i}")).collect()
    }

    /// Maps a sampler position to reported units.
    fn to_natural(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

/// Log likelihood over natural-unit parameters.
pub trait Likelihood: Sync {
    fn log_likelihood(&self, theta: &[f64]) -> f64;
}

/// Likelihood that also provides its gradient in natural units.
pub trait GradLikelihood: Likelihood {
    fn log_likelihood_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64;
}

/// Constant likelihood; the posterior equals the prior.
#[derive(Debug, Clone, Copy, Default)]
pub struct FlatLikelihood;

impl Likelihood for FlatLikelihood {
    fn log_likelihood(&self, _theta: &[f64]) -> f64 {
        0.0
    }
}

impl GradLikelihood for FlatLikelihood {
    fn log_likelihood_grad(&self, _theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        0.0
    }
}

/// Independent normal likelihood centred at `mean` with scales `sd`.
#[derive(Debug, Clone)]
pub struct GaussianLikelihood {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Likelihood for GaussianLikelihood {
    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(x, (m, s))| -0.5 * ((x - m) / s).powi(2) - s.ln() - LN_SQRT_2PI)
            .sum()
    }
}

impl GradLikelihood for GaussianLikelihood {
    fn log_likelihood_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        for (i, g) in grad.iter_mut().enumerate() {
            *g = -(theta[i] - self.mean[i]) / self.sd[i].powi(2);
        }
        self.log_likelihood(theta)
    }
}

/// Normal likelihood of the calibration targets given the metamodel's
/// prediction: `sum_t -ln(se_t sqrt(2 pi)) - (y_t - phi_t)^2 / (2 se_t^2)`.
#[derive(Debug, Clone)]
pub struct SurrogateLikelihood<'a> {
    model: &'a AnnModel,
    priors: &'a PriorSpec,
    means: Vec<f64>,
    ses: Vec<f64>,
    constant: f64,
}

impl<'a> SurrogateLikelihood<'a> {
    pub fn new(model: &'a AnnModel, targets: &TargetSet, priors: &'a PriorSpec) -> Result<Self> {
        if targets.len() != model.config.output_dim {
            return Err(Error::Argument(format!(
                "{} targets for a metamodel with {} outputs",
                targets.len(),
                model.config.output_dim
            )));
        }
        if priors.dim() != model.config.input_dim {
            return Err(Error::Argument(format!(
                "{} prior parameters for a metamodel with {} inputs",
                priors.dim(),
                model.config.input_dim
            )));
        }
        let ses = targets.ses();
        let constant = -ses.iter().map(|s| s.ln() + LN_SQRT_2PI).sum::<f64>();
        Ok(SurrogateLikelihood {
            model,
            priors,
            means: targets.means(),
            ses,
            constant,
        })
    }

    /// Metamodel prediction in natural units.
    pub fn predict(&self, theta: &[f64]) -> Vec<f64> {
        self.model.predict(theta).expect("dimensions checked at construction")
    }
}

impl Likelihood for SurrogateLikelihood<'_> {
    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        if !self.priors.contains(theta) {
            return f64::NEG_INFINITY;
        }
        let phi = self.predict(theta);
        self.constant
            - phi
                .iter()
                .zip(self.means.iter().zip(&self.ses))
                .map(|(p, (y, s))| ((y - p) / s).powi(2))
                .sum::<f64>()
                / 2.0
    }
}

impl GradLikelihood for SurrogateLikelihood<'_> {
    fn log_likelihood_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        if !self.priors.contains(theta) {
            grad.fill(0.0);
            return f64::NEG_INFINITY;
        }
        let model = self.model;
        let x = model.input_scaler.scale(theta);
        let trace = model.forward_trace(ArrayView1::from(&x[..])).expect("dimensions checked at construction");
        let mut quad = 0.0;
        let v: Vec<f64> = trace
            .output()
            .iter()
            .enumerate()
            .map(|(t, &out)| {
                let phi = model.output_scaler.unscale_value(t, out);
                let r = (self.means[t] - phi) / self.ses[t];
                quad += r * r;
                // d/dout of the log likelihood
                r / self.ses[t] * model.output_scaler.half_range(t)
            })
            .collect();
        let g = model.backprop(&trace, &v);
        for (j, gj) in grad.iter_mut().enumerate() {
            let h = model.input_scaler.half_range(j);
            *gj = if h > 0.0 { g[j] / h } else { 0.0 };
        }
        self.constant - quad / 2.0
    }
}

/// Logit reparameterisation of a prior box.
#[derive(Debug, Clone)]
pub struct BoxTransform {
    lower: Vec<f64>,
    width: Vec<f64>,
}

impl BoxTransform {
    pub fn new(priors: &PriorSpec) -> Self {
        BoxTransform {
            lower: priors.ranges.iter().map(|r| r.lower).collect(),
            width: priors.ranges.iter().map(|r| r.width()).collect(),
        }
    }

    /// Natural parameters to the unbounded space; the point must lie strictly
    /// inside the box.
    pub fn transform(&self, theta: &[f64]) -> Result<Vec<f64>> {
        theta
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let p = (x - self.lower[j]) / self.width[j];
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::Domain(format!(
                        "parameter {j} = {x} is not strictly inside [{}, {}]",
                        self.lower[j],
                        self.lower[j] + self.width[j]
                    )));
                }
                Ok((p / (1.0 - p)).ln())
            })
            .collect()
    }

    pub fn untransform(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(j, &v)| {
                let x = self.lower[j] + self.width[j] * logistic(v);
                x.clamp(self.lower[j], self.lower[j] + self.width[j])
            })
            .collect()
    }

    /// `sum_j ln(b_j - a_j) + ln f(u_j) + ln(1 - f(u_j))`.
    pub fn log_jacobian(&self, u: &[f64]) -> f64 {
        u.iter()
            .zip(&self.width)
            .map(|(&v, w)| w.ln() - softplus(-v) - softplus(v))
            .sum()
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Posterior in the unbounded space: likelihood at the untransformed point
/// plus the log-Jacobian. The uniform prior contributes a constant.
pub struct LogPosterior<'a, L> {
    pub likelihood: L,
    pub priors: &'a PriorSpec,
    transform: BoxTransform,
}

impl<'a, L: GradLikelihood> LogPosterior<'a, L> {
    pub fn new(likelihood: L, priors: &'a PriorSpec) -> Self {
        LogPosterior {
            likelihood,
            priors,
            transform: BoxTransform::new(priors),
        }
    }

    pub fn transform(&self) -> &BoxTransform {
        &self.transform
    }

    pub fn log_posterior(&self, u: &[f64]) -> f64 {
        let theta = self.transform.untransform(u);
        self.likelihood.log_likelihood(&theta) + self.transform.log_jacobian(u)
    }
}

impl<L: GradLikelihood> LogDensity for LogPosterior<'_, L> {
    fn dim(&self) -> usize {
        self.priors.dim()
    }

    fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        let theta = self.transform.untransform(u);
        let ll = self.likelihood.log_likelihood_grad(&theta, grad);
        for (j, g) in grad.iter_mut().enumerate() {
            let f = logistic(u[j]);
            *g = *g * self.transform.width[j] * f * (1.0 - f) + (1.0 - 2.0 * f);
        }
        ll + self.transform.log_jacobian(u)
    }

    fn param_names(&self) -> Vec<String> {
        self.priors.names()
    }

    fn to_natural(&self, u: &[f64]) -> Vec<f64> {
        self.transform.untransform(u)
    }
}

/// Standard normal in `dim` dimensions; a sampler test target.
#[derive(Debug, Clone, Copy)]
pub struct StandardNormal {
    pub dim: usize,
}

impl LogDensity for StandardNormal {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        for (g, v) in grad.iter_mut().zip(x) {
            *g = -v;
        }
        -0.5 * x.iter().map(|v| v * v).sum::<f64>() - self.dim as f64 * LN_SQRT_2PI
    }
}
