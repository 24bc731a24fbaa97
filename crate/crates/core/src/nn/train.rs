//! Mini-batch training loop and optimizers.
//!
//! Everything is deterministic given the seed: initialization comes from
//! [`build_unet`](super::build_unet)'s stream, shuffling from a per-epoch
//! derived stream, and all reductions run in a fixed order.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::loss::{dice_score, LossSpec};
use crate::nn::{forward_graph, Model};
use crate::rng;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

fn default_epochs() -> usize {
    40
}
fn default_batch_size() -> usize {
    8
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_seed() -> u64 {
    42
}
fn default_shuffle() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_shuffle")]
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            optimizer: Optimizer::default(),
            seed: default_seed(),
            shuffle: default_shuffle(),
        }
    }
}

impl TrainConfig {
    /// Full config-level validation (a zero learning rate is rejected here
    /// even though [`train`] tolerates it, because a configured run with
    /// lr = 0 is always a mistake).
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs < 1 {
            problems.push("epochs: must be ≥ 1".to_string());
        }
        if self.batch_size < 1 {
            problems.push("batch_size: must be ≥ 1".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            problems.push(format!(
                "learning_rate: must be > 0, got {}",
                self.learning_rate
            ));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                problems.push(format!(
                    "optimizer: adam betas must lie in [0,1), got ({beta1}, {beta2})"
                ));
            }
            if !(eps.is_finite() && eps > 0.0) {
                problems.push(format!("optimizer: adam eps must be > 0, got {eps}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// The weaker precondition [`train`] itself enforces: lr may be zero
    /// (a no-op step), never negative or non-finite.
    fn check_runnable(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::contract(
                "training needs epochs ≥ 1 and batch_size ≥ 1",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::contract(format!(
                "learning rate must be finite and ≥ 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub train_loss: f64,
    pub train_dice: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_val_dice(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.val_dice)
    }
}

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct OptState {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: u64,
}

impl OptState {
    pub fn new(params: &[(String, Tensor<f32>)]) -> Self {
        OptState {
            m: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            t: 0,
        }
    }
}

/// One optimizer update over all parameters. SGD: `p ← p − lr·g`. Adam:
/// bias-corrected moment estimates, elementwise step.
pub fn optimizer_step(
    params: &mut [(String, Tensor<f32>)],
    grads: &[Tensor<f32>],
    state: &mut OptState,
    tc: &TrainConfig,
) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
    let lr = tc.learning_rate as f32;
    match tc.optimizer {
        Optimizer::Sgd => {
            for ((_, p), g) in params.iter_mut().zip(grads) {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            state.t += 1;
            let (b1, b2) = (beta1 as f32, beta2 as f32);
            let eps = eps as f32;
            let c1 = 1.0 - (beta1.powi(state.t as i32)) as f32;
            let c2 = 1.0 - (beta2.powi(state.t as i32)) as f32;
            for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
                let m = state.m[i].data_mut();
                let v = state.v[i].data_mut();
                for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[j] = b1 * m[j] + (1.0 - b1) * gv;
                    v[j] = b2 * v[j] + (1.0 - b2) * gv * gv;
                    let m_hat = m[j] / c1;
                    let v_hat = v[j] / c2;
                    *pv -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

fn net_rasters(ds: &Dataset, model: &Model) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let want_h = model.config.input_height;
    let want_w = model.config.input_width;
    ds.samples
        .iter()
        .map(|s| {
            if s.height() != want_h || s.width() != want_w {
                return Err(Error::shape(format!(
                    "sample {}: raster {}×{} does not match model input {want_h}×{want_w}",
                    s.id,
                    s.height(),
                    s.width()
                )));
            }
            Ok((
                s.image.reshaped(&[1, want_h, want_w])?,
                s.mask.reshaped(&[1, want_h, want_w])?,
            ))
        })
        .collect()
}

/// Trains `model` on `train_set` with validation scoring on `val_set`,
/// returning the updated model and per-epoch history. Aborts with a
/// diagnostic if the loss ever turns non-finite.
pub fn train(
    mut model: Model,
    train_set: &Dataset,
    val_set: &Dataset,
    loss: &LossSpec,
    tc: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    tc.check_runnable()?;
    loss.validate()?;
    let train_data = net_rasters(train_set, &model)?;
    let val_data = net_rasters(val_set, &model)?;
    let n = train_data.len();

    let mut state = OptState::new(model.params());
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..tc.epochs {
        if tc.shuffle {
            let mut stream = rng::stream(rng::derive_seed(tc.seed, epoch, 0));
            order.shuffle(&mut stream);
        }
        let mut loss_sum = 0.0f64;
        let mut dice_sum = 0.0f64;
        for (batch_idx, batch) in order.chunks(tc.batch_size).enumerate() {
            let mut grads: Vec<Tensor<f32>> = model
                .params()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect();
            for &idx in batch {
                let (image, mask) = &train_data[idx];
                let mut tape: Tape<f32> = Tape::new();
                let pvars = model.input_params(&mut tape);
                let img = tape.input(image.clone());
                let target = tape.input(mask.clone());
                let logits = forward_graph(&mut tape, &model.config, &pvars, img)?;
                let probs = tape.sigmoid(logits);
                let root = loss.build(&mut tape, probs, target)?;
                let loss_value = tape.value(root).item() as f64;
                if !loss_value.is_finite() {
                    return Err(Error::train(format!(
                        "loss became {loss_value} at epoch {} of {}, batch {} (sample {})",
                        epoch + 1,
                        tc.epochs,
                        batch_idx + 1,
                        train_set.samples[idx].id
                    )));
                }
                loss_sum += loss_value;
                dice_sum += dice_score(tape.value(probs), mask, 0.5)?;
                tape.backward(root)?;
                for (acc, pv) in grads.iter_mut().zip(&pvars) {
                    for (a, g) in acc.data_mut().iter_mut().zip(tape.grad(*pv).data()) {
                        *a += g;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            optimizer_step(model.params_mut(), &grads, &mut state, tc);
        }

        let mut val_sum = 0.0f64;
        for (image, mask) in &val_data {
            let probs = model.forward(image, super::OutputMode::Probabilities)?;
            val_sum += dice_score(&probs, mask, 0.5)?;
        }
        history.epochs.push(EpochRecord {
            train_loss: loss_sum / n as f64,
            train_dice: dice_sum / n as f64,
            val_dice: val_sum / val_data.len() as f64,
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f32) -> Vec<(String, Tensor<f32>)> {
        vec![("p".to_string(), Tensor::new(&[1], vec![v]).unwrap())]
    }

    fn grad(v: f32) -> Vec<Tensor<f32>> {
        vec![Tensor::new(&[1], vec![v]).unwrap()]
    }

    #[test]
    fn sgd_takes_the_textbook_step() {
        let mut params = one_param(1.0);
        let mut state = OptState::new(&params);
        let tc = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        optimizer_step(&mut params, &grad(2.0), &mut state, &tc);
        assert!((params[0].1.item() - 0.8).abs() < 1e-7);
    }

    #[test]
    fn adam_drives_a_quadratic_to_zero() {
        // f(p) = p², g = 2p; oracle is an independent scalar Adam in f64
        let tc = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut params = one_param(1.0);
        let mut state = OptState::new(&params);
        let (mut om, mut ov, mut op) = (0.0f64, 0.0f64, 1.0f64);
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        for t in 1..=200 {
            let p = params[0].1.item();
            optimizer_step(&mut params, &grad(2.0 * p), &mut state, &tc);

            let og = 2.0 * op;
            om = b1 * om + (1.0 - b1) * og;
            ov = b2 * ov + (1.0 - b2) * og * og;
            let m_hat = om / (1.0 - b1.powi(t));
            let v_hat = ov / (1.0 - b2.powi(t));
            op -= 0.1 * m_hat / (v_hat.sqrt() + eps);

            assert!(
                (params[0].1.item() as f64 - op).abs() < 1e-4,
                "step {t}: {} vs oracle {op}",
                params[0].1.item()
            );
        }
        assert!(params[0].1.item().abs() < 1e-2, "{}", params[0].1.item());
    }

    #[test]
    fn adam_with_zero_gradient_leaves_parameters_fixed() {
        let mut params = one_param(0.7);
        let mut state = OptState::new(&params);
        let tc = TrainConfig::default();
        for _ in 0..50 {
            optimizer_step(&mut params, &grad(0.0), &mut state, &tc);
        }
        assert!((params[0].1.item() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn config_validation_flags_bad_values() {
        let bad = TrainConfig {
            epochs: 0,
            batch_size: 0,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        match bad.validate() {
            Err(Error::Config(problems)) => assert_eq!(problems.len(), 3, "{problems:?}"),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(TrainConfig::default().validate().is_ok());
    }
}
