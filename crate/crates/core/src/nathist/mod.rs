//! Discrete-time natural-history model of colorectal cancer.
//!
//! Individuals enter at age 50 and are followed in annual cycles to age 100.
//! Adenoma onset follows a Weibull hazard in age; every later progression is
//! a constant rate. The deterministic cohort model feeds the design of
//! experiments and the direct calibrator, while the microsimulation is used to
//! produce noisy synthetic calibration targets.

mod cohort;
mod lifetable;
mod microsim;
mod targets;
mod transition;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use cohort::{run_cohort, CohortTrace, ModelOutputs, Series};
pub use lifetable::LifeTable;
pub use microsim::run_microsim;
pub use targets::{generate_targets, Target, TargetGenConfig, TargetSet};
pub use transition::{initial_distribution, transition_probs, TransitionMatrix};

/// Age at cohort entry.
pub const START_AGE: u32 = 50;
/// Age at which follow-up ends.
pub const END_AGE: u32 = 100;
/// Number of annual transitions between `START_AGE` and `END_AGE`.
pub const CYCLES: usize = (END_AGE - START_AGE) as usize;
/// Width of a target age bin in years.
pub const BIN_WIDTH: usize = 5;
/// Number of target age bins (50-54 through 90-94).
pub const N_BINS: usize = 9;
/// Number of model outputs used as calibration targets.
pub const N_OUTPUTS: usize = 4 * N_BINS;

/// Share of the adenoma-bearing mass at age 50 that is already preclinical
/// early / late cancer.
pub const PRECLIN_EARLY_SHARE: f64 = 0.12;
pub const PRECLIN_LATE_SHARE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HealthState {
    Normal = 0,
    SmallAdenoma,
    LargeAdenoma,
    PreclinEarly,
    PreclinLate,
    ClinEarly,
    ClinLate,
    CrcDeath,
    OtherDeath,
}

impl HealthState {
    pub const COUNT: usize = 9;

    pub const ALL: [HealthState; 9] = [
        HealthState::Normal,
        HealthState::SmallAdenoma,
        HealthState::LargeAdenoma,
        HealthState::PreclinEarly,
        HealthState::PreclinLate,
        HealthState::ClinEarly,
        HealthState::ClinLate,
        HealthState::CrcDeath,
        HealthState::OtherDeath,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_absorbing(self) -> bool {
        matches!(self, HealthState::CrcDeath | HealthState::OtherDeath)
    }

    pub fn is_alive(self) -> bool {
        !self.is_absorbing()
    }

    /// Alive and not yet clinically diagnosed with CRC.
    pub fn is_undiagnosed(self) -> bool {
        self.index() <= HealthState::PreclinLate.index()
    }
}

/// Parameters of the natural-history model. Rates are per year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NatHistParams {
    /// Weibull scale of adenoma onset (1/year^g).
    pub l: f64,
    /// Weibull shape of adenoma onset.
    pub g: f64,
    /// Small to large adenoma.
    pub lambda2: f64,
    /// Large adenoma to preclinical early CRC.
    pub lambda3: f64,
    /// Preclinical early to preclinical late CRC.
    pub lambda4: f64,
    /// Preclinical early to clinical early CRC.
    pub lambda5: f64,
    /// Preclinical late to clinical late CRC.
    pub lambda6: f64,
    /// CRC mortality, clinical early stage.
    pub lambda7: f64,
    /// CRC mortality, clinical late stage.
    pub lambda8: f64,
    /// Adenoma prevalence at age 50.
    pub p_adeno: f64,
    /// Proportion of small adenomas at age 50.
    pub p_small: f64,
}

impl NatHistParams {
    /// Names of the nine calibrated parameters, in vector order.
    pub const CALIBRATED: [&'static str; 9] = [
        "l", "g", "lambda2", "lambda3", "lambda4", "lambda5", "lambda6", "p_adeno", "p_small",
    ];

    /// Base-case values used to generate the synthetic targets.
    pub fn base_case() -> Self {
        NatHistParams {
            l: 2.86e-6,
            g: 2.78,
            lambda2: 0.0346,
            lambda3: 0.0215,
            lambda4: 0.3697,
            lambda5: 0.2382,
            lambda6: 0.4852,
            lambda7: 0.0302,
            lambda8: 0.2099,
            p_adeno: 0.27,
            p_small: 0.71,
        }
    }

    /// Calibrated parameters as a vector ordered like [`Self::CALIBRATED`].
    pub fn calibrated(&self) -> [f64; 9] {
        [
            self.l,
            self.g,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
            self.p_adeno,
            self.p_small,
        ]
    }

    /// Copy of `self` with the calibrated parameters replaced by `theta`;
    /// the CRC mortality rates are kept.
    pub fn with_calibrated(&self, theta: &[f64]) -> Self {
        assert_eq!(theta.len(), 9, "expected 9 calibrated parameters");
        NatHistParams {
            l: theta[0],
            g: theta[1],
            lambda2: theta[2],
            lambda3: theta[3],
            lambda4: theta[4],
            lambda5: theta[5],
            lambda6: theta[6],
            p_adeno: theta[7],
            p_small: theta[8],
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("l", self.l),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
            ("lambda6", self.lambda6),
            ("lambda7", self.lambda7),
            ("lambda8", self.lambda8),
        ];
        for (name, r) in rates {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::Domain(format!("{name} must be a finite rate >= 0, got {r}")));
            }
        }
        if !(self.g.is_finite() && self.g > 0.0) {
            return Err(Error::Domain(format!("g must be > 0, got {}", self.g)));
        }
        for (name, p) in [("p_adeno", self.p_adeno), ("p_small", self.p_small)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Domain(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Weibull adenoma-onset hazard `l * g * a^(g - 1)` at age `a`.
pub fn weibull_hazard(l: f64, g: f64, a: f64) -> Result<f64> {
    if !(l >= 0.0 && g > 0.0 && a > 0.0) {
        return Err(Error::Domain(format!(
            "weibull hazard needs l >= 0, g > 0, a > 0 (l={l}, g={g}, a={a})"
        )));
    }
    let h = l * g * a.powf(g - 1.0);
    if !h.is_finite() {
        return Err(Error::Domain(format!("weibull hazard overflow (l={l}, g={g}, a={a})")));
    }
    Ok(h)
}
