use super::{weibull_hazard, HealthState, LifeTable, NatHistParams};
use super::{PRECLIN_EARLY_SHARE, PRECLIN_LATE_SHARE};
use crate::{Error, Result};

/// Row-stochastic one-year transition matrix indexed by [`HealthState`].
pub type TransitionMatrix = [[f64; HealthState::COUNT]; HealthState::COUNT];

/// Annual transition probabilities at `age`.
///
/// Each state's competing exits (disease progression plus all-cause death)
/// are converted jointly: with total exit rate `L`, the state is kept with
/// probability `exp(-L)` and exit `j` is taken with probability
/// `(r_j / L) * (1 - exp(-L))`.
pub fn transition_probs(params: &NatHistParams, age: f64, lt: &LifeTable) -> Result<TransitionMatrix> {
    use HealthState::*;

    let mu = lt.mu(age)?;
    let onset = weibull_hazard(params.l, params.g, age)?;

    let exits: [&[(HealthState, f64)]; 7] = [
        &[(SmallAdenoma, onset), (OtherDeath, mu)],
        &[(LargeAdenoma, params.lambda2), (OtherDeath, mu)],
        &[(PreclinEarly, params.lambda3), (OtherDeath, mu)],
        &[(PreclinLate, params.lambda4), (ClinEarly, params.lambda5), (OtherDeath, mu)],
        &[(ClinLate, params.lambda6), (OtherDeath, mu)],
        &[(CrcDeath, params.lambda7), (OtherDeath, mu)],
        &[(CrcDeath, params.lambda8), (OtherDeath, mu)],
    ];

    let mut p = [[0.0; HealthState::COUNT]; HealthState::COUNT];
    for (from, arcs) in exits.iter().enumerate() {
        let total: f64 = arcs.iter().map(|(_, r)| r).sum();
        if !total.is_finite() {
            return Err(Error::Domain(format!("non-finite exit rate from state {from} at age {age}")));
        }
        if total == 0.0 {
            p[from][from] = 1.0;
            continue;
        }
        let leave = -(-total).exp_m1();
        p[from][from] = (-total).exp();
        for &(to, rate) in arcs.iter() {
            p[from][to.index()] += rate / total * leave;
        }
    }
    p[CrcDeath.index()][CrcDeath.index()] = 1.0;
    p[OtherDeath.index()][OtherDeath.index()] = 1.0;
    Ok(p)
}

/// State distribution at cohort entry.
///
/// A fraction `p_adeno` carries disease; of that mass, 12% is preclinical
/// early and 8% preclinical late cancer, and the remainder is split into
/// small and large adenomas by `p_small`.
pub fn initial_distribution(params: &NatHistParams) -> Result<[f64; HealthState::COUNT]> {
    use HealthState::*;

    for (name, p) in [("p_adeno", params.p_adeno), ("p_small", params.p_small)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    let adenoma = params.p_adeno * (1.0 - PRECLIN_EARLY_SHARE - PRECLIN_LATE_SHARE);
    let mut dist = [0.0; HealthState::COUNT];
    dist[Normal.index()] = 1.0 - params.p_adeno;
    dist[SmallAdenoma.index()] = adenoma * params.p_small;
    dist[LargeAdenoma.index()] = adenoma * (1.0 - params.p_small);
    dist[PreclinEarly.index()] = params.p_adeno * PRECLIN_EARLY_SHARE;
    dist[PreclinLate.index()] = params.p_adeno * PRECLIN_LATE_SHARE;
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use HealthState::*;

    fn zero_rates() -> NatHistParams {
        NatHistParams {
            l: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            lambda6: 0.0,
            lambda7: 0.0,
            lambda8: 0.0,
            ..NatHistParams::base_case()
        }
    }

    #[test]
    fn no_rates_give_identity() {
        let p = transition_probs(&zero_rates(), 60.0, &LifeTable::zero()).unwrap();
        for (i, row) in p.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn single_exit_matches_closed_form() {
        let params = NatHistParams { lambda2: 0.0346, ..zero_rates() };
        let p = transition_probs(&params, 60.0, &LifeTable::zero()).unwrap();
        let row = p[SmallAdenoma.index()];
        assert!((row[SmallAdenoma.index()] - 0.96599).abs() < 1e-5);
        assert!((row[LargeAdenoma.index()] - 0.03401).abs() < 1e-5);
        // closed form
        assert!((row[LargeAdenoma.index()] - (1.0 - (-0.0346f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn base_case_rows_sum_to_one() {
        let p = transition_probs(&NatHistParams::base_case(), 60.0, &LifeTable::bundled()).unwrap();
        for row in p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn only_model_arcs_are_nonzero() {
        let p = transition_probs(&NatHistParams::base_case(), 70.0, &LifeTable::bundled()).unwrap();
        let allowed = [
            (Normal, SmallAdenoma),
            (SmallAdenoma, LargeAdenoma),
            (LargeAdenoma, PreclinEarly),
            (PreclinEarly, PreclinLate),
            (PreclinEarly, ClinEarly),
            (PreclinLate, ClinLate),
            (ClinEarly, CrcDeath),
            (ClinLate, CrcDeath),
        ];
        for from in HealthState::ALL {
            for to in HealthState::ALL {
                let v = p[from.index()][to.index()];
                let ok = from == to
                    || allowed.contains(&(from, to))
                    || (to == OtherDeath && from.is_alive());
                if !ok {
                    assert_eq!(v, 0.0, "{from:?} -> {to:?}");
                } else {
                    assert!(v > 0.0, "{from:?} -> {to:?}");
                }
            }
        }
    }

    #[test]
    fn age_outside_table_is_range_error() {
        let err = transition_probs(&NatHistParams::base_case(), 130.0, &LifeTable::bundled());
        assert!(matches!(err, Err(Error::AgeOutOfRange { .. })));
    }

    #[test]
    fn initial_distribution_cases() {
        let base = NatHistParams::base_case();
        let d = initial_distribution(&NatHistParams { p_adeno: 0.0, ..base }).unwrap();
        assert_eq!(d, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let d = initial_distribution(&base).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((d[Normal.index()] - 0.73).abs() < 1e-15);
        // 0.27 * 0.8 * 0.71, 0.27 * 0.8 * 0.29, 0.27 * 0.12, 0.27 * 0.08
        let expected = [0.73, 0.15336, 0.06264, 0.0324, 0.0216];
        for (got, want) in d.iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }

        let d = initial_distribution(&NatHistParams { p_adeno: 1.0, p_small: 1.0, ..base }).unwrap();
        assert_eq!(d[Normal.index()], 0.0);
        assert!((d[SmallAdenoma.index()] - 0.80).abs() < 1e-15);
        assert_eq!(d[LargeAdenoma.index()], 0.0);
        assert!((d[PreclinEarly.index()] - 0.12).abs() < 1e-15);
        assert!((d[PreclinLate.index()] - 0.08).abs() < 1e-15);

        assert!(initial_distribution(&NatHistParams { p_adeno: 1.5, ..base }).is_err());
    }
}
