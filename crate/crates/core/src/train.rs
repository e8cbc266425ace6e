//! Adam, the training loop with best-on-validation model selection, and
//! encoder-transfer fine-tuning.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geom::{LabeledSample, PointSet, ProbMap, RgbImage};
use crate::metrics::image_ahd;
use crate::net::{self, ModelParams};
use crate::par::{self, Exec};
use crate::postprocess::extract_centers;
use crate::whd::WhdParams;

pub const TRAIN_LEARNING_RATE: f64 = 1e-4;
pub const FINE_TUNE_LEARNING_RATE: f64 = 1e-5;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_count: f64,
    pub seed: u64,
    pub whd_params: WhdParams,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: TRAIN_LEARNING_RATE,
            batch_size: 16,
            epochs: 50,
            lambda_count: 1.0,
            seed: 0,
            whd_params: WhdParams::default(),
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn fine_tune() -> Self {
        Self {
            learning_rate: FINE_TUNE_LEARNING_RATE,
            ..Self::default()
        }
    }

    /// Parses a JSON config. Fields left out take their defaults, except
    /// that a missing `learning_rate` becomes `default_lr`.
    pub fn from_json(text: &str, default_lr: f64) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let has_lr = value.get("learning_rate").is_some();
        let mut cfg: Self = serde_json::from_value(value)?;
        if !has_lr {
            cfg.learning_rate = default_lr;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return domain(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return domain("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return domain("epochs must be at least 1");
        }
        if !(self.lambda_count >= 0.0) {
            return domain(format!("lambda_count must be nonnegative, got {}", self.lambda_count));
        }
        self.whd_params.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if !(params.same_shapes(grads) && params.same_shapes(&state.m) && params.same_shapes(&state.v)) {
        return domain("adam_step: parameter, gradient and moment shapes differ");
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let tensors = params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().iter_mut().zip(state.v.tensors_mut().iter_mut()));
    for ((p, g), (m, v)) in tensors {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
            v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m.data[i] / c1;
            let v_hat = v.data[i] / c2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mahd: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Epoch (1-based) with the lowest validation MAHD; the earliest wins ties.
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<&EpochRecord> = None;
        for r in &self.records {
            if best.map_or(true, |b| r.val_mahd < b.val_mahd) {
                best = Some(r);
            }
        }
        best.map(|r| r.epoch)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_mahd", "seconds"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_mahd.to_string(),
                format!("{:.3}", r.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Output of the inference pipeline for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub prob_map: ProbMap,
    pub centers: PointSet,
    pub count_estimate: f64,
}

/// Forward pass followed by center extraction with `K` from the count head.
pub fn predict(params: &ModelParams, image: &RgbImage) -> Result<Prediction> {
    let out = net::forward(params, image)?;
    let centers = extract_centers(&out.prob_map, Some(out.count_estimate));
    Ok(Prediction {
        prob_map: out.prob_map,
        centers,
        count_estimate: out.count_estimate,
    })
}

/// Mean average Hausdorff distance between extracted and true centers.
pub fn validation_mahd(params: &ModelParams, val_set: &[LabeledSample], exec: Exec) -> Result<f64> {
    if val_set.is_empty() {
        return domain("empty validation set");
    }
    let per = par::map(exec, val_set, |s| {
        predict(params, &s.image).map(|p| image_ahd(&p.centers, &s.centers, s.image.domain().diagonal()))
    });
    let mut sum = 0.0;
    for a in per {
        sum += a?;
    }
    Ok(sum / val_set.len() as f64)
}

pub fn train(
    params: &ModelParams,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    let exec = config.exec;
    train_with_evaluator(params, train_set, val_set, config, |p, _| validation_mahd(p, val_set, exec))
}

/// [`train`] with the per-epoch validation score supplied by `evaluate`,
/// called with the current parameters and the 1-based epoch.
pub fn train_with_evaluator<F>(
    params: &ModelParams,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    config: &TrainConfig,
    mut evaluate: F,
) -> Result<(ModelParams, TrainHistory)>
where
    F: FnMut(&ModelParams, usize) -> Result<f64>,
{
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return domain("training and validation sets must be nonempty");
    }
    let mut current = params.clone();
    let mut state = OptimizerState::new(&current);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<LabeledSample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grads) =
                net::loss_and_grad_with(&current, &batch, &config.whd_params, config.lambda_count, config.exec)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite training loss in epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            adam_step(&mut current, &grads, &mut state, config.learning_rate)?;
        }
        let val_mahd = evaluate(&current, epoch)?;
        if val_mahd.is_nan() {
            return Err(Error::Numerical(format!("validation MAHD is NaN in epoch {epoch}")));
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_mahd,
            seconds: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |(b, _)| val_mahd < *b) {
            best = Some((val_mahd, current.clone()));
        }
    }
    let (_, best_params) = best.expect("at least one epoch");
    Ok((best_params, history))
}

/// Copies the encoder of `pretrained` into `fresh`, then trains every
/// partition.
pub fn fine_tune(
    pretrained: &ModelParams,
    fresh: &ModelParams,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    let start = net::transfer_encoder(pretrained, fresh).map_err(|e| match e {
        Error::Shape(m) => Error::Domain(m),
        other => other,
    })?;
    train(&start, train_set, val_set, config)
}
