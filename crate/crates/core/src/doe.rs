//! Latin hypercube design of experiments over the prior box and batch
//! evaluation of the cohort simulator.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nathist::{run_cohort, LifeTable, ModelOutputs, NatHistParams, N_OUTPUTS};
use crate::rng::{substream, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorRange {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

impl PriorRange {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Independent uniform priors on a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub ranges: Vec<PriorRange>,
}

impl PriorSpec {
    pub fn new(ranges: Vec<PriorRange>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::Argument("prior needs at least one parameter".into()));
        }
        if let Some(r) = ranges.iter().find(|r| !(r.lower < r.upper) || !r.width().is_finite()) {
            return Err(Error::Argument(format!(
                "prior range for {} must satisfy lower < upper, got [{}, {}]",
                r.name, r.lower, r.upper
            )));
        }
        Ok(PriorSpec { ranges })
    }

    /// Uniform priors of the nine calibrated natural-history parameters.
    pub fn crc() -> Self {
        let bounds = [
            (2e-6, 2e-5),
            (2.0, 4.0),
            (0.01, 0.10),
            (0.01, 0.04),
            (0.20, 0.50),
            (0.20, 0.30),
            (0.30, 0.70),
            (0.25, 0.35),
            (0.38, 0.95),
        ];
        let ranges = NatHistParams::CALIBRATED
            .iter()
            .zip(bounds)
            .map(|(name, (lower, upper))| PriorRange {
                name: name.to_string(),
                lower,
                upper,
            })
            .collect();
        PriorSpec { ranges }
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.ranges.iter().map(|r| r.name.clone()).collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && self.ranges.iter().zip(theta).all(|(r, &x)| x >= r.lower && x <= r.upper)
    }

    /// Log density of the uniform prior (−∞ outside the box).
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if self.contains(theta) {
            -self.ranges.iter().map(|r| r.width().ln()).sum::<f64>()
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Latin hypercube sample of `n` points in the prior box.
///
/// Every column places exactly one point, uniformly jittered, in each of the
/// `n` equal-width strata of its range. Columns use independent permutations.
pub fn lhs_sample(priors: &PriorSpec, n: usize, seed: u64) -> Result<Array2<f64>> {
    if n < 2 {
        return Err(Error::Argument(format!("LHS needs n >= 2, got {n}")));
    }
    let mut out = Array2::zeros((n, priors.dim()));
    for (j, range) in priors.ranges.iter().enumerate() {
        let mut rng = substream(seed, tag::LHS, j as u64);
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (i, &s) in strata.iter().enumerate() {
            let u: f64 = rng.random();
            let x = range.lower + (s as f64 + u) / n as f64 * range.width();
            // guard the upper edge against rounding
            out[[i, j]] = x.min(range.upper);
        }
    }
    Ok(out)
}

/// Per-column affine map of `[min, max]` onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaler {
    /// Fits the column ranges of `data`.
    pub fn fit(data: &Array2<f64>) -> Self {
        let (min, max) = data
            .axis_iter(Axis(1))
            .map(|col| {
                col.iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
            })
            .unzip();
        Scaler { min, max }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Half-width of column `j`; the derivative of the unscaling map.
    pub fn half_range(&self, j: usize) -> f64 {
        (self.max[j] - self.min[j]) / 2.0
    }

    pub fn scale_value(&self, j: usize, x: f64) -> f64 {
        let h = self.half_range(j);
        if h > 0.0 {
            (x - self.min[j]) / h - 1.0
        } else {
            0.0
        }
    }

    pub fn unscale_value(&self, j: usize, s: f64) -> f64 {
        self.min[j] + (s + 1.0) * self.half_range(j)
    }

    pub fn scale(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(j, &v)| self.scale_value(j, v)).collect()
    }

    pub fn unscale(&self, s: &[f64]) -> Vec<f64> {
        s.iter().enumerate().map(|(j, &v)| self.unscale_value(j, v)).collect()
    }

    pub fn scale_matrix(&self, data: &Array2<f64>) -> Array2<f64> {
        let mut out = data.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|x| self.scale_value(j, x));
        }
        out
    }

    pub fn unscale_matrix(&self, data: &Array2<f64>) -> Array2<f64> {
        let mut out = data.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|s| self.unscale_value(j, s));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRow {
    pub row: usize,
    pub reason: String,
}

/// Simulator inputs and outputs at the design points, with the scalers used
/// to map both onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    /// n × d inputs in natural units.
    pub inputs: Array2<f64>,
    /// n × m simulator outputs.
    pub outputs: Array2<f64>,
    pub input_scaler: Scaler,
    pub output_scaler: Scaler,
    /// Index of every row in the design it was drawn from.
    pub rows: Vec<usize>,
    pub seed: u64,
    pub dropped: Vec<DroppedRow>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    input_names: Vec<String>,
    output_names: Vec<String>,
    input_scaler: Scaler,
    output_scaler: Scaler,
    rows: Vec<usize>,
    seed: u64,
    dropped: Vec<DroppedRow>,
    #[serde(default)]
    meta: serde_json::Value,
}

impl Design {
    /// Pairs inputs and outputs and fits both scalers on them.
    pub fn new(input_names: Vec<String>, output_names: Vec<String>, inputs: Array2<f64>, outputs: Array2<f64>, seed: u64) -> Result<Self> {
        if inputs.nrows() != outputs.nrows() {
            return Err(Error::Argument(format!(
                "design has {} input rows but {} output rows",
                inputs.nrows(),
                outputs.nrows()
            )));
        }
        if inputs.ncols() != input_names.len() || outputs.ncols() != output_names.len() {
            return Err(Error::Argument("design column names do not match the data".into()));
        }
        Ok(Design {
            input_scaler: Scaler::fit(&inputs),
            output_scaler: Scaler::fit(&outputs),
            rows: (0..inputs.nrows()).collect(),
            input_names,
            output_names,
            inputs,
            outputs,
            seed,
            dropped: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scaled_inputs(&self) -> Array2<f64> {
        self.input_scaler.scale_matrix(&self.inputs)
    }

    pub fn scaled_outputs(&self) -> Array2<f64> {
        self.output_scaler.scale_matrix(&self.outputs)
    }

    fn select(&self, idx: &[usize]) -> Design {
        Design {
            input_names: self.input_names.clone(),
            output_names: self.output_names.clone(),
            inputs: self.inputs.select(Axis(0), idx),
            outputs: self.outputs.select(Axis(0), idx),
            input_scaler: self.input_scaler.clone(),
            output_scaler: self.output_scaler.clone(),
            rows: idx.iter().map(|&i| self.rows[i]).collect(),
            seed: self.seed,
            dropped: Vec::new(),
        }
    }

    /// Writes the design CSV (inputs then outputs) and its JSON sidecar.
    pub fn write(&self, csv_path: &Path, sidecar_path: &Path, comments: &[String], meta: serde_json::Value) -> Result<()> {
        let mut file = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        for c in comments {
            writeln!(file, "# {c}").map_err(|e| Error::io(csv_path, e))?;
        }
        let mut w = csv::Writer::from_writer(file);
        w.write_record(self.input_names.iter().chain(&self.output_names))?;
        for (x, y) in self.inputs.outer_iter().zip(self.outputs.outer_iter()) {
            w.write_record(x.iter().chain(y.iter()).map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(csv_path, e))?;
        let sidecar = Sidecar {
            input_names: self.input_names.clone(),
            output_names: self.output_names.clone(),
            input_scaler: self.input_scaler.clone(),
            output_scaler: self.output_scaler.clone(),
            rows: self.rows.clone(),
            seed: self.seed,
            dropped: self.dropped.clone(),
            meta,
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(sidecar_path, json).map_err(|e| Error::io(sidecar_path, e))
    }

    pub fn read(csv_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(sidecar_path, e.to_string()))?;
        let file = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
        let d = sc.input_names.len();
        let m = sc.output_names.len();
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.len() != d + m || header[..d] != sc.input_names[..] || header[d..] != sc.output_names[..] {
            return Err(Error::format(csv_path, "design columns do not match the sidecar"));
        }
        let mut values = Vec::new();
        let mut n = 0;
        for rec in rdr.records() {
            let rec = rec?;
            for field in rec.iter() {
                values.push(field.parse::<f64>().map_err(|e| Error::format(csv_path, e.to_string()))?);
            }
            n += 1;
        }
        let all = Array2::from_shape_vec((n, d + m), values).map_err(|e| Error::format(csv_path, e.to_string()))?;
        if sc.rows.len() != n {
            return Err(Error::format(sidecar_path, "row index count does not match the design"));
        }
        Ok(Design {
            input_names: sc.input_names,
            output_names: sc.output_names,
            inputs: all.slice(ndarray::s![.., ..d]).to_owned(),
            outputs: all.slice(ndarray::s![.., d..]).to_owned(),
            input_scaler: sc.input_scaler,
            output_scaler: sc.output_scaler,
            rows: sc.rows,
            seed: sc.seed,
            dropped: sc.dropped,
        })
    }
}

/// Evaluates the cohort model at `n` Latin hypercube points. Rows on which the
/// simulator fails are dropped and recorded.
pub fn run_design(priors: &PriorSpec, n: usize, seed: u64, base: &NatHistParams, lt: &LifeTable) -> Result<Design> {
    if priors.dim() != NatHistParams::CALIBRATED.len() {
        return Err(Error::Argument(format!(
            "the natural-history simulator takes {} calibrated parameters, prior has {}",
            NatHistParams::CALIBRATED.len(),
            priors.dim()
        )));
    }
    let points = lhs_sample(priors, n, seed)?;
    let results: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| simulate_row(points.row(i), base, lt))
        .collect();

    let mut kept = Vec::with_capacity(n);
    let mut outputs = Vec::with_capacity(n * N_OUTPUTS);
    let mut dropped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(y) => {
                kept.push(i);
                outputs.extend(y);
            }
            Err(e) => {
                log::warn!("design row {i} dropped: {e}");
                dropped.push(DroppedRow { row: i, reason: e.to_string() });
            }
        }
    }
    if kept.len() < 2 {
        return Err(Error::Argument(format!("only {} design rows could be simulated", kept.len())));
    }
    let inputs = points.select(Axis(0), &kept);
    let outputs = Array2::from_shape_vec((kept.len(), N_OUTPUTS), outputs).expect("row-major outputs");
    let mut design = Design::new(priors.names(), ModelOutputs::ids(), inputs, outputs, seed)?;
    design.rows = kept;
    design.dropped = dropped;
    Ok(design)
}

fn simulate_row(theta: ArrayView1<f64>, base: &NatHistParams, lt: &LifeTable) -> Result<Vec<f64>> {
    let theta: Vec<f64> = theta.to_vec();
    let (_, out) = run_cohort(&base.with_calibrated(&theta), lt)?;
    let y = out.to_vec();
    if out.degenerate || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("simulator produced degenerate outputs".into()));
    }
    Ok(y)
}

/// Random row partition into training and validation designs. Scalers are
/// refitted on the training rows and shared with the validation rows.
pub fn split(design: &Design, fraction: f64, seed: u64) -> Result<(Design, Design)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n = design.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Argument(format!("split of {n} rows at {fraction} leaves an empty side")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, tag::SPLIT, 0));
    let (train_idx, valid_idx) = idx.split_at(n_train);
    let mut train_idx = train_idx.to_vec();
    let mut valid_idx = valid_idx.to_vec();
    train_idx.sort_unstable();
    valid_idx.sort_unstable();

    let mut train = design.select(&train_idx);
    train.input_scaler = Scaler::fit(&train.inputs);
    train.output_scaler = Scaler::fit(&train.outputs);
    train.dropped = design.dropped.clone();
    let mut valid = design.select(&valid_idx);
    valid.input_scaler = train.input_scaler.clone();
    valid.output_scaler = train.output_scaler.clone();
    Ok((train, valid))
}
