use ndarray::{Array1, Array2, Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Activation, AnnConfig, AnnModel, Layer};
use crate::doe::Design;
use crate::rng::{substream, tag};
use crate::{Error, Result};

/// Step-size reduction when validation loss stalls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lr_decay: Option<LrDecay>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 2000,
            patience: 50,
            lr_decay: Some(LrDecay {
                factor: 0.5,
                patience: 20,
                min_lr: 1e-5,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean mini-batch loss per epoch.
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    /// Per-output validation R², `None` where the observed column is constant.
    pub r2: Vec<Option<f64>>,
    pub aggregate_r2: f64,
    pub epochs: usize,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub early_stopped: bool,
}

/// Cross-validation summary in scaled output space.
#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub r2: Vec<Option<f64>>,
    /// Mean of the defined per-output R² values.
    pub aggregate_r2: f64,
    /// `(output index, observed, predicted)` for every validation row.
    pub scatter: Vec<(usize, f64, f64)>,
}

/// Coefficient of determination; `None` for a constant observed vector.
pub fn r_squared<'a>(observed: impl IntoIterator<Item = &'a f64> + Clone, predicted: impl IntoIterator<Item = &'a f64>) -> Option<f64> {
    let obs: Vec<f64> = observed.into_iter().cloned().collect();
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let ss_tot: f64 = obs.iter().map(|o| (o - mean).powi(2)).sum();
    let ss_res: f64 = obs.iter().zip(predicted).map(|(o, p)| (o - p).powi(2)).sum();
    if ss_tot > 0.0 {
        Some(1.0 - ss_res / ss_tot)
    } else {
        None
    }
}

/// Per-output R² of the model on a validation design.
pub fn validate(model: &AnnModel, valid: &Design) -> Result<Validation> {
    if valid.is_empty() {
        return Err(Error::Argument("validation design is empty".into()));
    }
    let x = model.input_scaler.scale_matrix(&valid.inputs);
    let observed = model.output_scaler.scale_matrix(&valid.outputs);
    let predicted = model.forward_batch(&x)?;
    Ok(summarize(&observed, &predicted))
}

fn summarize(observed: &Array2<f64>, predicted: &Array2<f64>) -> Validation {
    let r2: Vec<Option<f64>> = observed
        .axis_iter(Axis(1))
        .zip(predicted.axis_iter(Axis(1)))
        .map(|(o, p)| r_squared(o.iter(), p.iter()))
        .collect();
    let defined: Vec<f64> = r2.iter().flatten().cloned().collect();
    let aggregate_r2 = defined.iter().sum::<f64>() / defined.len().max(1) as f64;
    let mut scatter = Vec::with_capacity(observed.len());
    for j in 0..observed.ncols() {
        for i in 0..observed.nrows() {
            scatter.push((j, observed[[i, j]], predicted[[i, j]]));
        }
    }
    Validation { r2, aggregate_r2, scatter }
}

struct AdamState {
    m_w: Array2<f64>,
    v_w: Array2<f64>,
    m_b: Array1<f64>,
    v_b: Array1<f64>,
}

/// Fits the network to the training design by mini-batch Adam on the mean
/// squared error in scaled space, stopping early on validation loss and
/// keeping the best weights seen.
pub fn train(train: &Design, valid: &Design, config: &AnnConfig, opts: &TrainOptions, seed: u64) -> Result<(AnnModel, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("training design is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::Argument("validation design is empty".into()));
    }
    if train.inputs.ncols() != config.input_dim || train.outputs.ncols() != config.output_dim {
        return Err(Error::Argument(format!(
            "design is {}→{} but network is {}→{}",
            train.inputs.ncols(),
            train.outputs.ncols(),
            config.input_dim,
            config.output_dim
        )));
    }
    if opts.batch_size == 0 || opts.max_epochs == 0 {
        return Err(Error::Argument("batch size and epoch count must be >= 1".into()));
    }

    let mut model = AnnModel::initialized(
        config.clone(),
        train.input_scaler.clone(),
        train.output_scaler.clone(),
        seed,
    )?;
    let x = train.scaled_inputs();
    let y = train.scaled_outputs();
    let xv = model.input_scaler.scale_matrix(&valid.inputs);
    let yv = model.output_scaler.scale_matrix(&valid.outputs);

    let mut adam: Vec<AdamState> = model
        .layers
        .iter()
        .map(|l| AdamState {
            m_w: Array2::zeros(l.weights.raw_dim()),
            v_w: Array2::zeros(l.weights.raw_dim()),
            m_b: Array1::zeros(l.biases.raw_dim()),
            v_b: Array1::zeros(l.biases.raw_dim()),
        })
        .collect();
    let acts: Vec<Activation> = (0..model.layers.len()).map(|k| config.activation(k)).collect();

    let mut rng = substream(seed, tag::ANN_SHUFFLE, 0);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut lr = opts.learning_rate;
    let mut step = 0i32;
    let mut best: (f64, usize, Vec<Layer>) = (f64::INFINITY, 0, model.layers.clone());
    let mut since_best = 0;
    let mut since_decay = 0;
    let mut report = TrainReport {
        train_loss: Vec::new(),
        valid_loss: Vec::new(),
        r2: Vec::new(),
        aggregate_r2: 0.0,
        epochs: 0,
        best_epoch: 0,
        early_stopped: false,
    };

    for epoch in 0..opts.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb = y.select(Axis(0), batch);
            let mut layer_out = Vec::with_capacity(model.layers.len() + 1);
            layer_out.push(xb);
            for (layer, act) in model.layers.iter().zip(&acts) {
                let mut z = layer_out.last().unwrap().dot(&layer.weights.t()) + &layer.biases;
                if *act != Activation::Linear {
                    z.mapv_inplace(|v| act.apply(v));
                }
                layer_out.push(z);
            }
            let residual = layer_out.last().unwrap() - &yb;
            epoch_loss += residual.iter().map(|r| r * r).sum::<f64>();
            let scale = 2.0 / residual.len() as f64;
            let mut delta = residual * scale;

            step += 1;
            let bias1 = 1.0 - opts.beta1.powi(step);
            let bias2 = 1.0 - opts.beta2.powi(step);
            for k in (0..model.layers.len()).rev() {
                if acts[k] != Activation::Linear {
                    Zip::from(&mut delta)
                        .and(&layer_out[k + 1])
                        .for_each(|d, &a| *d *= acts[k].derivative_from_output(a));
                }
                let grad_w = delta.t().dot(&layer_out[k]);
                let grad_b = delta.sum_axis(Axis(0));
                if k > 0 {
                    delta = delta.dot(&model.layers[k].weights);
                }
                let st = &mut adam[k];
                let layer = &mut model.layers[k];
                adam_update(&mut layer.weights, &grad_w, &mut st.m_w, &mut st.v_w, lr, bias1, bias2, opts);
                adam_update(&mut layer.biases, &grad_b, &mut st.m_b, &mut st.v_b, lr, bias1, bias2, opts);
            }
        }
        let train_loss = epoch_loss / y.len() as f64;
        let pred = model.forward_batch(&xv)?;
        let valid_loss = (&pred - &yv).iter().map(|r| r * r).sum::<f64>() / yv.len() as f64;
        report.train_loss.push(train_loss);
        report.valid_loss.push(valid_loss);
        report.epochs = epoch + 1;

        if !train_loss.is_finite() || !valid_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!(
                    "train loss {train_loss}, validation loss {valid_loss}, learning rate {lr}, best validation loss {} at epoch {}",
                    best.0, best.1
                ),
            });
        }

        if valid_loss < best.0 {
            best = (valid_loss, epoch, model.layers.clone());
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
        }
        if let Some(decay) = &opts.lr_decay {
            if since_decay >= decay.patience && lr > decay.min_lr {
                lr = (lr * decay.factor).max(decay.min_lr);
                since_decay = 0;
                log::debug!("epoch {epoch}: learning rate reduced to {lr:e}");
            }
        }
        if epoch % 50 == 0 {
            log::debug!("epoch {epoch}: train {train_loss:.3e} valid {valid_loss:.3e}");
        }
        if since_best >= opts.patience {
            report.early_stopped = true;
            break;
        }
    }

    model.layers = best.2;
    report.best_epoch = best.1;
    let v = validate(&model, valid)?;
    report.r2 = v.r2;
    report.aggregate_r2 = v.aggregate_r2;
    Ok((model, report))
}

#[allow(clippy::too_many_arguments)]
fn adam_update<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr: f64,
    bias1: f64,
    bias2: f64,
    opts: &TrainOptions,
) {
    Zip::from(param).and(grad).and(m).and(v).for_each(|p, &g, m, v| {
        *m = opts.beta1 * *m + (1.0 - opts.beta1) * g;
        *v = opts.beta2 * *v + (1.0 - opts.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + opts.epsilon);
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doe::{split, Scaler};
    use rand::Rng as _;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn synthetic_design(n: usize, d: usize, m: usize, seed: u64, f: impl Fn(&[f64]) -> Vec<f64>) -> Design {
        let mut rng = substream(seed, 90, 0);
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(0.0..1.0));
        let mut y = Array2::zeros((n, m));
        for (i, row) in x.outer_iter().enumerate() {
            let out = f(row.as_slice().unwrap());
            for (j, v) in out.into_iter().enumerate() {
                y[[i, j]] = v;
            }
        }
        Design::new(names("x", d), names("y", m), x, y, seed).unwrap()
    }

    /// Least-squares oracle: fits y = A x + c exactly, so its R² is 1 up to rounding.
    fn least_squares_r2(design: &Design) -> f64 {
        let n = design.len();
        let d = design.inputs.ncols();
        let mut a = nalgebra::DMatrix::zeros(n, d + 1);
        for i in 0..n {
            for j in 0..d {
                a[(i, j)] = design.inputs[[i, j]];
            }
            a[(i, d)] = 1.0;
        }
        let svd = a.clone().svd(true, true);
        let mut worst: f64 = 1.0;
        for col in design.outputs.axis_iter(Axis(1)) {
            let b = nalgebra::DVector::from_iterator(n, col.iter().cloned());
            let coef = svd.solve(&b, 1e-12).unwrap();
            let fit = &a * coef;
            worst = worst.min(r_squared(col.iter(), fit.iter()).unwrap());
        }
        worst
    }

    #[test]
    fn r_squared_definitions() {
        let obs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(r_squared(obs.iter(), obs.iter()), Some(1.0));
        let mean = [2.5; 4];
        assert_eq!(r_squared(obs.iter(), mean.iter()), Some(0.0));
        assert_eq!(r_squared([1.0, 1.0].iter(), [1.0, 2.0].iter()), None);
    }

    #[test]
    fn learns_linear_map() {
        let design = synthetic_design(500, 3, 2, 1, |x| {
            vec![2.0 * x[0] - x[1] + 0.5 * x[2] + 1.0, -x[0] + 3.0 * x[2] - 2.0]
        });
        assert!(least_squares_r2(&design) > 1.0 - 1e-12);
        let (tr, va) = split(&design, 0.8, 2).unwrap();
        let cfg = AnnConfig {
            input_dim: 3,
            hidden_layers: vec![10, 10],
            output_dim: 2,
            ..AnnConfig::default()
        };
        let opts = TrainOptions {
            batch_size: 32,
            learning_rate: 3e-3,
            max_epochs: 1500,
            ..TrainOptions::default()
        };
        let (_, report) = train(&tr, &va, &cfg, &opts, 3).unwrap();
        assert!(report.aggregate_r2 >= 0.999, "R² {}", report.aggregate_r2);
    }

    #[test]
    fn training_is_deterministic() {
        let design = synthetic_design(200, 2, 1, 4, |x| vec![(3.0 * x[0]).sin() + x[1]]);
        let (tr, va) = split(&design, 0.8, 2).unwrap();
        let cfg = AnnConfig {
            input_dim: 2,
            hidden_layers: vec![8],
            output_dim: 1,
            ..AnnConfig::default()
        };
        let opts = TrainOptions { max_epochs: 30, ..TrainOptions::default() };
        let (a, ra) = train(&tr, &va, &cfg, &opts, 5).unwrap();
        let (b, rb) = train(&tr, &va, &cfg, &opts, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let (c, _) = train(&tr, &va, &cfg, &opts, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn divergence_is_reported() {
        let design = synthetic_design(100, 2, 1, 4, |x| vec![x[0] * 1e200]);
        let (tr, va) = split(&design, 0.8, 2).unwrap();
        // a scaler that leaves the huge outputs unscaled
        let mut tr = tr;
        tr.output_scaler = Scaler { min: vec![-1.0], max: vec![1.0] };
        let cfg = AnnConfig {
            input_dim: 2,
            hidden_layers: vec![4],
            output_dim: 1,
            ..AnnConfig::default()
        };
        let opts = TrainOptions { max_epochs: 5, ..TrainOptions::default() };
        assert!(matches!(train(&tr, &va, &cfg, &opts, 1), Err(Error::Divergence { .. })));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let design = synthetic_design(50, 2, 1, 4, |x| vec![x[0]]);
        let (tr, va) = split(&design, 0.8, 2).unwrap();
        assert!(train(&tr, &va, &AnnConfig::default(), &TrainOptions::default(), 1).is_err());
    }

    #[test]
    fn validation_of_perfect_and_mean_predictors() {
        let obs = ndarray::array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let v = summarize(&obs, &obs);
        assert_eq!(v.r2, vec![Some(1.0), None]);
        assert_eq!(v.aggregate_r2, 1.0);
        let mean = ndarray::array![[2.0, 5.0], [2.0, 5.0], [2.0, 5.0]];
        assert_eq!(summarize(&obs, &mean).r2[0], Some(0.0));
        assert_eq!(v.scatter.len(), 6);
    }
}
