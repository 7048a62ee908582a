//! Comparison of the two calibration methods and plot-ready data files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::Posterior;
use crate::doe::PriorSpec;
use crate::nathist::{run_cohort, LifeTable, ModelOutputs, NatHistParams, TargetSet};
use crate::stats;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub parameter: String,
    pub truth: f64,
    pub surrogate_mean: f64,
    pub imis_mean: f64,
    pub surrogate_dev: f64,
    pub imis_dev: f64,
    /// `surrogate_dev / imis_dev`; absent when the IMIS deviation is zero.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    /// Wall-clock seconds per pipeline stage.
    pub stage_secs: BTreeMap<String, f64>,
    pub surrogate_evaluations: usize,
    pub imis_evaluations: usize,
}

impl ComparisonReport {
    /// Parameters whose surrogate deviation is smaller than the IMIS deviation.
    pub fn ratios_below_one(&self) -> usize {
        self.rows.iter().filter(|r| r.ratio.is_some_and(|v| v < 1.0)).count()
    }

    /// Text table with one row per parameter.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10}",
            "parameter", "truth", "baycann", "imis", "baycann_dev", "imis_dev", "ratio"
        );
        for r in &self.rows {
            let ratio = r.ratio.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{:<10} {:>12.5e} {:>12.5e} {:>12.5e} {:>12.4e} {:>12.4e} {:>10}",
                r.parameter, r.truth, r.surrogate_mean, r.imis_mean, r.surrogate_dev, r.imis_dev, ratio
            );
        }
        for (stage, secs) in &self.stage_secs {
            let _ = writeln!(out, "{stage:<10} {secs:>10.2} s");
        }
        out
    }
}

/// Deviation ratio `|a - truth| / |b - truth|`; `None` when `b` hits the truth.
pub fn deviation_ratio(a: f64, b: f64, truth: f64) -> Option<f64> {
    let db = (b - truth).abs();
    (db > 0.0).then(|| (a - truth).abs() / db)
}

/// Compares posterior means of `surrogate` and `imis` against `truth`.
pub fn compare(surrogate: &Posterior, imis: &Posterior, truth: &[(String, f64)]) -> Result<ComparisonReport> {
    if surrogate.param_names != imis.param_names {
        return Err(Error::Argument(format!(
            "posterior columns differ: {:?} vs {:?}",
            surrogate.param_names, imis.param_names
        )));
    }
    let rows = surrogate
        .param_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let t = truth
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Argument(format!("no true value for {name}")))?;
            let (a, b) = (surrogate.summary[j].mean, imis.summary[j].mean);
            Ok(ComparisonRow {
                parameter: name.clone(),
                truth: t,
                surrogate_mean: a,
                imis_mean: b,
                surrogate_dev: (a - t).abs(),
                imis_dev: (b - t).abs(),
                ratio: deviation_ratio(a, b, t),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonReport {
        rows,
        stage_secs: BTreeMap::new(),
        surrogate_evaluations: surrogate.evaluations,
        imis_evaluations: imis.evaluations,
    })
}

fn create_with_comments(path: &Path, comments: &[String]) -> Result<std::fs::File> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for c in comments {
        writeln!(f, "# {c}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

pub fn write_truth_csv(path: &Path, truth: &[(String, f64)], comments: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_with_comments(path, comments)?);
    w.write_record(["parameter", "value"])?;
    for (n, v) in truth {
        w.write_record([n.clone(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_truth_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(f);
    let header = r.headers()?.clone();
    if header.len() != 2 || &header[0] != "parameter" || &header[1] != "value" {
        return Err(Error::format(path, "expected header parameter,value"));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let v = rec[1]
                .parse::<f64>()
                .map_err(|_| Error::format(path, format!("bad value {:?}", &rec[1])))?;
            Ok((rec[0].to_string(), v))
        })
        .collect()
}

/// Calibrated parameter names paired with their values in `params`.
pub fn truth_of(params: &NatHistParams) -> Vec<(String, f64)> {
    NatHistParams::CALIBRATED
        .iter()
        .map(|n| n.to_string())
        .zip(params.calibrated())
        .collect()
}

/// Writes `output_id,observed_scaled,predicted_scaled`.
pub fn write_validation_scatter(path: &Path, output_ids: &[String], scatter: &[(usize, f64, f64)], comments: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_with_comments(path, comments)?);
    w.write_record(["output_id", "observed_scaled", "predicted_scaled"])?;
    for &(j, obs, pred) in scatter {
        w.write_record([output_ids[j].clone(), obs.to_string(), pred.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Evenly spaced grid over each prior range with prior and kernel density
/// estimates of every posterior.
pub fn write_density_grid(path: &Path, priors: &PriorSpec, posteriors: &[&Posterior], points: usize, comments: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_with_comments(path, comments)?);
    let mut header = vec!["parameter".to_string(), "x".to_string(), "prior".to_string()];
    header.extend(posteriors.iter().map(|p| p.method.clone()));
    w.write_record(&header)?;
    for (j, r) in priors.ranges.iter().enumerate() {
        let grid: Vec<f64> = (0..points)
            .map(|i| r.lower + r.width() * i as f64 / (points - 1) as f64)
            .collect();
        let dens: Vec<Vec<f64>> = posteriors
            .iter()
            .map(|p| {
                let col: Vec<f64> = p.column(j).into_iter().flatten().collect();
                stats::kde(&col, &grid)
            })
            .collect();
        for (i, x) in grid.iter().enumerate() {
            let mut rec = vec![r.name.clone(), x.to_string(), (1.0 / r.width()).to_string()];
            rec.extend(dens.iter().map(|d| d[i].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Posterior-predictive summary of one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub target_id: String,
    pub target_mean: f64,
    pub target_se: f64,
    pub pred_mean: f64,
    pub pred_q025: f64,
    pub pred_q975: f64,
}

/// Pushes `n_draws` evenly thinned posterior draws through the cohort model.
pub fn predictive_band(post: &Posterior, base: &NatHistParams, lt: &LifeTable, targets: &TargetSet, n_draws: usize) -> Result<Vec<BandRow>> {
    let draws = post.draws();
    if draws.is_empty() || n_draws == 0 {
        return Err(Error::Argument("predictive band needs posterior draws".into()));
    }
    let picks: Vec<&Vec<f64>> = (0..n_draws).map(|i| &draws[i * draws.len() / n_draws]).collect();
    let outputs: Vec<Vec<f64>> = picks
        .par_iter()
        .map(|d| run_cohort(&base.with_calibrated(d), lt).map(|(_, o)| o.to_vec()))
        .collect::<Result<_>>()?;
    let ids = ModelOutputs::ids();
    Ok((0..ids.len())
        .map(|t| {
            let mut col: Vec<f64> = outputs.iter().map(|o| o[t]).collect();
            col.sort_by(|a, b| a.total_cmp(b));
            BandRow {
                target_id: ids[t].clone(),
                target_mean: targets.targets[t].mean,
                target_se: targets.targets[t].se,
                pred_mean: stats::mean(&col),
                pred_q025: stats::quantile_sorted(&col, 0.025),
                pred_q975: stats::quantile_sorted(&col, 0.975),
            }
        })
        .collect())
}

pub fn write_band_csv(path: &Path, rows: &[BandRow], comments: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_with_comments(path, comments)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_mass(method: &str, value: &[f64]) -> Posterior {
        let names = NatHistParams::CALIBRATED.iter().map(|s| s.to_string()).collect();
        Posterior::from_chains(method, names, vec![vec![value.to_vec(); 4]], Vec::new())
    }

    #[test]
    fn published_lambda4_ratio() {
        let r = deviation_ratio(0.3699218, 0.4026561, 0.3697).unwrap();
        assert!((r - 0.0067302).abs() < 5e-8, "{r}");
    }

    #[test]
    fn point_mass_at_truth_gives_zero_ratios() {
        let truth = truth_of(&NatHistParams::base_case());
        let t: Vec<f64> = truth.iter().map(|(_, v)| *v).collect();
        let off: Vec<f64> = t.iter().map(|v| v * 1.1).collect();
        let rep = compare(&point_mass("hmc", &t), &point_mass("imis", &off), &truth).unwrap();
        assert!(rep.rows.iter().all(|r| r.surrogate_dev == 0.0 && r.ratio == Some(0.0)));
        assert_eq!(rep.ratios_below_one(), 9);
    }

    #[test]
    fn identical_posteriors_give_unit_ratios() {
        let truth = truth_of(&NatHistParams::base_case());
        let off: Vec<f64> = truth.iter().map(|(_, v)| v * 0.9).collect();
        let rep = compare(&point_mass("hmc", &off), &point_mass("imis", &off), &truth).unwrap();
        for r in &rep.rows {
            assert!((r.ratio.unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(rep.ratios_below_one(), 0);
    }

    #[test]
    fn zero_imis_deviation_has_no_ratio() {
        let truth = truth_of(&NatHistParams::base_case());
        let t: Vec<f64> = truth.iter().map(|(_, v)| *v).collect();
        let rep = compare(&point_mass("hmc", &t), &point_mass("imis", &t), &truth).unwrap();
        assert!(rep.rows.iter().all(|r| r.ratio.is_none()));
        assert!(rep.render_table().contains("NA"));
    }

    #[test]
    fn column_mismatch_is_an_argument_error() {
        let truth = truth_of(&NatHistParams::base_case());
        let a = point_mass("hmc", &[0.0; 9]);
        let mut b = a.clone();
        b.param_names[3] = "other".into();
        assert!(matches!(compare(&a, &b, &truth), Err(Error::Argument(_))));
    }

    #[test]
    fn truth_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.csv");
        let truth = truth_of(&NatHistParams::base_case());
        write_truth_csv(&path, &truth, &["x".into()]).unwrap();
        assert_eq!(read_truth_csv(&path).unwrap(), truth);
    }

    #[test]
    fn band_brackets_point_mass_prediction() {
        let lt = LifeTable::bundled();
        let base = NatHistParams::base_case();
        let (_, out) = run_cohort(&base, &lt).unwrap();
        let y = out.to_vec();
        let targets = TargetSet::from_moments(&y, &vec![0.01; 36]).unwrap();
        let band = predictive_band(&point_mass("hmc", &base.calibrated()), &base, &lt, &targets, 10).unwrap();
        for (b, v) in band.iter().zip(&y) {
            assert_eq!((b.pred_q025, b.pred_q975), (*v, *v));
            assert!((b.pred_mean - v).abs() <= 1e-15 * v.abs().max(1.0));
        }
    }
}
