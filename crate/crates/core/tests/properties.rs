use baycann::ann::{AnnConfig, AnnModel};
use baycann::calibrate::BoxTransform;
use baycann::doe::{lhs_sample, PriorSpec, Scaler};
use baycann::nathist::{initial_distribution, run_cohort, transition_probs, LifeTable, NatHistParams, END_AGE, START_AGE};
use ndarray::Array2;
use proptest::prelude::*;

fn fractions() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, 9)
}

fn params_from(fr: &[f64]) -> NatHistParams {
    let priors = PriorSpec::crc();
    let theta: Vec<f64> = priors.ranges.iter().zip(fr).map(|(r, f)| r.lower + f * r.width()).collect();
    NatHistParams::base_case().with_calibrated(&theta)
}

fn unit_scaler(dim: usize) -> Scaler {
    Scaler { min: vec![-1.0; dim], max: vec![1.0; dim] }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn transition_rows_sum_to_one(fr in fractions(), age in START_AGE..END_AGE) {
        let p = params_from(&fr);
        let m = transition_probs(&p, age as f64, &LifeTable::bundled()).unwrap();
        for row in m.iter() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn initial_distribution_sums_to_one(fr in fractions()) {
        let d = initial_distribution(&params_from(&fr)).unwrap();
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cohort_trace_conserves_mass(fr in fractions()) {
        let (trace, out) = run_cohort(&params_from(&fr), &LifeTable::bundled()).unwrap();
        for row in &trace.rows {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert!(out.to_vec().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn box_transform_roundtrips(fr in prop::collection::vec(0.001..0.999f64, 9)) {
        let priors = PriorSpec::crc();
        let t = BoxTransform::new(&priors);
        let theta: Vec<f64> = priors.ranges.iter().zip(&fr).map(|(r, f)| r.lower + f * r.width()).collect();
        let back = t.untransform(&t.transform(&theta).unwrap());
        for (a, b) in theta.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn scaler_roundtrips(rows in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 4), 2..20)) {
        let data = Array2::from_shape_fn((rows.len(), 4), |(i, j)| rows[i][j]);
        let s = Scaler::fit(&data);
        let back = s.unscale_matrix(&s.scale_matrix(&data));
        for (a, b) in data.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
        for v in s.scale_matrix(&data).iter() {
            prop_assert!(v.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn lhs_has_one_point_per_stratum(n in 2usize..200, seed in any::<u64>()) {
        let priors = PriorSpec::crc();
        let x = lhs_sample(&priors, n, seed).unwrap();
        for (j, r) in priors.ranges.iter().enumerate() {
            let mut hit = vec![false; n];
            for v in x.column(j) {
                let k = (((v - r.lower) / r.width()) * n as f64).floor() as usize;
                prop_assert!(!hit[k.min(n - 1)]);
                hit[k.min(n - 1)] = true;
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ann_jacobian_matches_central_differences(seed in any::<u64>(), x in prop::collection::vec(-1.0..1.0f64, 9)) {
        let m = AnnModel::initialized(AnnConfig::default(), unit_scaler(9), unit_scaler(36), seed).unwrap();
        let jac = m.input_gradient(&x).unwrap();
        let h = 1e-5;
        for j in 0..9 {
            let mut up = x.clone();
            let mut dn = x.clone();
            up[j] += h;
            dn[j] -= h;
            let (yu, yd) = (m.forward(&up).unwrap(), m.forward(&dn).unwrap());
            for i in 0..36 {
                let fd = (yu[i] - yd[i]) / (2.0 * h);
                let an = jac[[i, j]];
                prop_assert!((an - fd).abs() <= 1e-5 * an.abs().max(1e-3), "({i},{j}): {an} vs {fd}");
            }
        }
    }
}
