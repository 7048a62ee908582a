use serde::{Deserialize, Serialize};

use super::{initial_distribution, transition_probs, HealthState, LifeTable, NatHistParams};
use super::{BIN_WIDTH, CYCLES, N_BINS, N_OUTPUTS, START_AGE};
use crate::Result;

/// The four age-specific output series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Series {
    AdenomaPrev,
    PropSmall,
    IncidEarly,
    IncidLate,
}

impl Series {
    pub const ALL: [Series; 4] = [Series::AdenomaPrev, Series::PropSmall, Series::IncidEarly, Series::IncidLate];

    pub fn name(self) -> &'static str {
        match self {
            Series::AdenomaPrev => "adenoma_prev",
            Series::PropSmall => "prop_small",
            Series::IncidEarly => "incid_early",
            Series::IncidLate => "incid_late",
        }
    }

    /// Prevalence-type series are bounded by one.
    pub fn is_proportion(self) -> bool {
        matches!(self, Series::AdenomaPrev | Series::PropSmall)
    }
}

/// Age label of bin `b`, e.g. `"50-54"`.
pub fn bin_label(b: usize) -> String {
    let lo = START_AGE as usize + b * BIN_WIDTH;
    format!("{}-{}", lo, lo + BIN_WIDTH - 1)
}

/// State occupancy by annual cycle, from age 50 (row 0) to age 100.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortTrace {
    pub rows: Vec<[f64; HealthState::COUNT]>,
}

impl CohortTrace {
    pub fn age(&self, row: usize) -> u32 {
        START_AGE + row as u32
    }
}

/// The 36 calibration outputs: four series by nine age bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutputs {
    /// Share of the living population carrying an adenoma or a preclinical
    /// lesion grown from one.
    pub adenoma_prev: [f64; N_BINS],
    /// Small adenomas among small and large adenomas.
    pub prop_small: [f64; N_BINS],
    /// Clinical diagnoses per undiagnosed person-year.
    pub incid_early: [f64; N_BINS],
    pub incid_late: [f64; N_BINS],
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl ModelOutputs {
    pub fn series(&self, s: Series) -> &[f64; N_BINS] {
        match s {
            Series::AdenomaPrev => &self.adenoma_prev,
            Series::PropSmall => &self.prop_small,
            Series::IncidEarly => &self.incid_early,
            Series::IncidLate => &self.incid_late,
        }
    }

    /// Flattened series-major vector (9 adenoma prevalences first).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(N_OUTPUTS);
        for s in Series::ALL {
            v.extend_from_slice(self.series(s));
        }
        v
    }

    /// Identifier of every flattened output, e.g. `adenoma_prev_50_54`.
    pub fn ids() -> Vec<String> {
        Series::ALL
            .iter()
            .flat_map(|s| (0..N_BINS).map(move |b| format!("{}_{}", s.name(), bin_label(b).replace('-', "_"))))
            .collect()
    }

    /// Series and bin of flattened index `i`.
    pub fn locate(i: usize) -> (Series, usize) {
        (Series::ALL[i / N_BINS], i % N_BINS)
    }

    /// Summarises an occupancy history. `occupancy` has `CYCLES + 1` rows;
    /// `new_early` / `new_late` hold the clinical diagnoses during each cycle.
    pub(crate) fn from_occupancy(occupancy: &[[f64; HealthState::COUNT]], new_early: &[f64], new_late: &[f64]) -> Self {
        use HealthState::*;
        debug_assert_eq!(occupancy.len(), CYCLES + 1);
        let mut out = ModelOutputs {
            adenoma_prev: [0.0; N_BINS],
            prop_small: [0.0; N_BINS],
            incid_early: [0.0; N_BINS],
            incid_late: [0.0; N_BINS],
            degenerate: false,
        };
        let mut degenerate = false;
        let mut safe_div = |num: f64, den: f64| {
            if den > 0.0 {
                num / den
            } else {
                degenerate = true;
                0.0
            }
        };
        for b in 0..N_BINS {
            let rows = b * BIN_WIDTH..(b + 1) * BIN_WIDTH;
            let (mut prev, mut small, mut py, mut early, mut late) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for k in rows {
                let occ = &occupancy[k];
                let alive: f64 = HealthState::ALL.iter().filter(|s| s.is_alive()).map(|s| occ[s.index()]).sum();
                let adenoma = occ[SmallAdenoma.index()] + occ[LargeAdenoma.index()];
                let bearing = adenoma + occ[PreclinEarly.index()] + occ[PreclinLate.index()];
                prev += safe_div(bearing, alive);
                small += safe_div(occ[SmallAdenoma.index()], adenoma);
                py += HealthState::ALL
                    .iter()
                    .filter(|s| s.is_undiagnosed())
                    .map(|s| occ[s.index()])
                    .sum::<f64>();
                early += new_early[k];
                late += new_late[k];
            }
            out.adenoma_prev[b] = prev / BIN_WIDTH as f64;
            out.prop_small[b] = small / BIN_WIDTH as f64;
            out.incid_early[b] = safe_div(early, py);
            out.incid_late[b] = safe_div(late, py);
        }
        out.degenerate = degenerate;
        out
    }
}

/// Runs the deterministic cohort model from age 50 to 100.
pub fn run_cohort(params: &NatHistParams, lt: &LifeTable) -> Result<(CohortTrace, ModelOutputs)> {
    use HealthState::*;
    params.validate()?;
    let mut rows = Vec::with_capacity(CYCLES + 1);
    rows.push(initial_distribution(params)?);
    let mut new_early = vec![0.0; CYCLES];
    let mut new_late = vec![0.0; CYCLES];
    for k in 0..CYCLES {
        let p = transition_probs(params, (START_AGE as usize + k) as f64, lt)?;
        let cur = rows[k];
        let mut next = [0.0; HealthState::COUNT];
        for (i, &mass) in cur.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (j, n) in next.iter_mut().enumerate() {
                *n += mass * p[i][j];
            }
        }
        new_early[k] = cur[PreclinEarly.index()] * p[PreclinEarly.index()][ClinEarly.index()];
        new_late[k] = cur[PreclinLate.index()] * p[PreclinLate.index()][ClinLate.index()];
        rows.push(next);
    }
    let outputs = ModelOutputs::from_occupancy(&rows, &new_early, &new_late);
    if outputs.degenerate {
        log::warn!("cohort outputs had zero denominators; affected values reported as 0");
    }
    Ok((CohortTrace { rows }, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_cohort_keeps_prevalence() {
        let params = NatHistParams {
            l: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            lambda6: 0.0,
            lambda7: 0.0,
            lambda8: 0.0,
            p_adeno: 0.27,
            p_small: 0.71,
            ..NatHistParams::base_case()
        };
        let (_, out) = run_cohort(&params, &LifeTable::zero()).unwrap();
        for b in 0..N_BINS {
            assert!((out.adenoma_prev[b] - 0.27).abs() < 1e-12);
            assert!((out.prop_small[b] - 0.71).abs() < 1e-12);
            assert_eq!(out.incid_early[b], 0.0);
        }
    }

    #[test]
    fn base_case_outputs_are_plausible() {
        let (trace, out) = run_cohort(&NatHistParams::base_case(), &LifeTable::bundled()).unwrap();
        assert_eq!(trace.rows.len(), 51);
        assert_eq!(trace.age(50), 100);
        assert_eq!(out.to_vec().len(), 36);
        assert!((0.25..=0.35).contains(&out.adenoma_prev[0]), "{}", out.adenoma_prev[0]);
        assert!(!out.degenerate);
        for (i, v) in out.to_vec().iter().enumerate() {
            let (s, _) = ModelOutputs::locate(i);
            assert!(*v >= 0.0);
            if s.is_proportion() {
                assert!(*v <= 1.0);
            }
        }
    }

    #[test]
    fn trace_conserves_mass() {
        let (trace, _) = run_cohort(&NatHistParams::base_case(), &LifeTable::bundled()).unwrap();
        let mut prev_dead = 0.0;
        for row in &trace.rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let dead = row[HealthState::CrcDeath.index()] + row[HealthState::OtherDeath.index()];
            assert!(dead >= prev_dead);
            prev_dead = dead;
        }
    }

    #[test]
    fn ids_follow_series_then_bin() {
        let ids = ModelOutputs::ids();
        assert_eq!(ids.len(), 36);
        assert_eq!(ids[0], "adenoma_prev_50_54");
        assert_eq!(ids[35], "incid_late_90_94");
        assert_eq!(ModelOutputs::locate(10), (Series::PropSmall, 1));
    }
}
