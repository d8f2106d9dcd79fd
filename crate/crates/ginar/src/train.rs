//! The training engine: L1 loss, MultiStepLR schedule, gradient clipping,
//! Adam, and the epoch loop.
//!
//! A training step records the batch's graph on the tape after a checkpoint,
//! runs one backward pass, clips and applies the gradients, then truncates
//! the tape back to the checkpoint so only the parameters persist. Loss and
//! all reported metrics are computed on de-normalized values: predictions
//! leave the model in normalized space and are mapped back to data units on
//! the tape, so gradients flow through the de-normalization.

use crate::data::{PreparedData, WindowBatch, WindowSet};
use crate::metrics::{MetricAccumulator, Metrics};
use crate::model::{model_forward, GinARModel, ModelError};
use crate::params::ParamRegistry;
use crate::tensor::{real, Real, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("train config: {msg}")]
    Config { msg: String },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Batch {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("no {what} windows")]
    NoWindows { what: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Optimization hyperparameters. The defaults are the published training
/// recipe: L1 loss under Adam at 0.006, halved at epochs 1, 15, 40, 70 and
/// 90, gradients clipped to global norm 5, batches of 16, 100 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.006,
            milestones: vec![1, 15, 40, 70, 90],
            gamma: 0.5,
            clip_norm: 5.0,
            batch_size: 16,
            epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config { msg });
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr0));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma {} must be positive", self.gamma));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return fail(format!("clip norm {} must be positive", self.clip_norm));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if self.milestones.first().is_some_and(|&m| m == 0) {
            return fail("milestones must be positive epochs".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!(
                "milestones {:?} must be strictly increasing",
                self.milestones
            ));
        }
        Ok(())
    }
}

/// Multi-step decay: the base rate times `gamma` for every milestone at or
/// before `epoch`. Halvings are exact in binary floating point, so tests
/// can compare with `==`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let crossed = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr0 * cfg.gamma.powi(crossed as i32)
}

/// Mean absolute error between two tensors of identical shape, as a scalar
/// on the tape.
pub fn l1_loss<F: Real>(tape: &mut Tape<F>, y_hat: Tensor, y: Tensor) -> Result<Tensor, TensorError> {
    if tape.shape(y_hat) != tape.shape(y) {
        return Err(TensorError::ShapeMismatch {
            op: "l1_loss",
            lhs: tape.shape(y_hat).to_vec(),
            rhs: tape.shape(y).to_vec(),
        });
    }
    let diff = tape.sub(y_hat, y)?;
    let abs = tape.abs(diff)?;
    tape.mean_all(abs)
}

/// Map normalized predictions shaped (B, N, L) back to data units:
/// variable `n` becomes `pred * scale[n] + shift[n]`.
pub fn denormalize<F: Real>(
    tape: &mut Tape<F>,
    pred: Tensor,
    scale: &[f64],
    shift: &[f64],
) -> Result<Tensor, TensorError> {
    tape.row_affine(pred, scale, shift)
}

/// Scale every parameter gradient uniformly so the global L2 norm does not
/// exceed `max_norm`. Returns the factor applied (1 when already within the
/// bound), so direction is always preserved.
pub fn clip_gradients<F: Real>(
    tape: &mut Tape<F>,
    params: &ParamRegistry,
    max_norm: f64,
) -> f64 {
    let mut sq = 0.0;
    for (_, t) in params.entries() {
        if let Some(g) = tape.grad(*t) {
            for v in g {
                let x = v.to_f64().unwrap_or(0.0);
                sq += x * x;
            }
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = max_norm / norm;
    let f = real::<F>(factor);
    for (_, t) in params.entries() {
        if let Some(g) = tape.grad_mut(*t) {
            for v in g {
                *v = *v * f;
            }
        }
    }
    factor
}

/// Adam with bias correction. Moment accumulators are kept in f64 for every
/// parameter in registry order, independent of the tape's scalar type.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Real>(tape: &Tape<F>, params: &ParamRegistry) -> Adam {
        let sizes: Vec<usize> = params
            .entries()
            .iter()
            .map(|(_, t)| tape.data(*t).len())
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter from its accumulated
    /// gradient. Parameters backward never reached are treated as having
    /// zero gradient.
    pub fn step<F: Real>(&mut self, tape: &mut Tape<F>, params: &ParamRegistry, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (_, t)) in params.entries().iter().enumerate() {
            let grad: Vec<f64> = match tape.grad(*t) {
                Some(g) => g.iter().map(|v| v.to_f64().unwrap_or(0.0)).collect(),
                None => vec![0.0; self.m[k].len()],
            };
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let data = tape.data_mut(*t);
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let delta = lr * m_hat / (v_hat.sqrt() + self.eps);
                data[i] = data[i] - real::<F>(delta);
            }
        }
    }
}

/// Anything that maps a window batch to normalized (B, N, L) predictions on
/// the tape. The training loop is written against this, so the full model
/// and the simple stand-in forecasters share one optimizer, schedule, and
/// evaluation path.
pub trait Forecaster<F: Real> {
    /// `dropout` carries the training-time RNG; evaluation passes `None`
    /// and must be deterministic.
    fn forward(
        &self,
        tape: &mut Tape<F>,
        batch: &WindowBatch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError>;
}

impl<F: Real> Forecaster<F> for GinARModel {
    fn forward(
        &self,
        tape: &mut Tape<F>,
        batch: &WindowBatch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        model_forward(tape, self, batch, dropout)
    }
}

/// Train and validation windows plus the per-variable constants that map
/// normalized predictions back to data units.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: WindowSet,
    pub val: WindowSet,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl TrainData {
    pub fn from_prepared(prep: &PreparedData) -> TrainData {
        TrainData {
            train: prep.train.clone(),
            val: prep.val.clone(),
            scale: prep.normalizer.stds.clone(),
            shift: prep.normalizer.means.clone(),
        }
    }
}

/// One epoch's row in the metric history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Metrics,
}

/// Render the metric history as CSV.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_mae,val_rmse,val_mape\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val.mae,
            r.val.rmse,
            r.val.mape_cell()
        ));
    }
    out
}

/// One pass over the shuffled training windows: forward, de-normalize, L1
/// loss, backward, clip, Adam step per batch. Returns the mean batch loss.
/// The shuffle and the dropout draws come from one stream determined by
/// `(cfg.seed, epoch)`, so a rerun reproduces the epoch exactly.
pub fn train_epoch<F: Real, M: Forecaster<F>>(
    tape: &mut Tape<F>,
    model: &M,
    params: &ParamRegistry,
    opt: &mut Adam,
    data: &TrainData,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64, TrainError> {
    if data.train.is_empty() {
        return Err(TrainError::NoWindows { what: "training" });
    }
    let lr = lr_at_epoch(cfg, epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 + epoch as u64);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut rng);

    let mut total = 0.0;
    let mut batches = 0;
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch = data.train.batch(chunk);
        let mark = tape.checkpoint();
        let run = |tape: &mut Tape<F>, rng: &mut ChaCha8Rng| -> Result<f64, TrainError> {
            let pred = model.forward(tape, &batch, Some(rng))?;
            let pred = denormalize(tape, pred, &data.scale, &data.shift)?;
            let y: Vec<F> = batch.y.iter().map(|&v| real(v)).collect();
            let target = tape.leaf(&[batch.batch, batch.n_vars, batch.horizon], y)?;
            let loss = l1_loss(tape, pred, target)?;
            let value = tape
                .scalar(loss)
                .to_f64()
                .filter(|v| v.is_finite())
                .ok_or(TensorError::NonFinite { op: "l1_loss" })?;
            tape.zero_grads();
            tape.backward(loss)?;
            Ok(value)
        };
        let value = run(tape, &mut rng).map_err(|e| TrainError::Batch {
            epoch,
            batch: bi,
            source: Box::new(e),
        })?;
        clip_gradients(tape, params, cfg.clip_norm);
        opt.step(tape, params, lr);
        tape.truncate(mark)?;
        total += value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Run the model over a window set in evaluation mode and return the
/// de-normalized predictions batch by batch.
pub fn predict<F: Real, M: Forecaster<F>>(
    tape: &mut Tape<F>,
    model: &M,
    data: &WindowSet,
    scale: &[f64],
    shift: &[f64],
    batch_size: usize,
) -> Result<Vec<(Vec<f64>, WindowBatch)>, TrainError> {
    let mut out = Vec::new();
    for batch in data.batches(batch_size) {
        let mark = tape.checkpoint();
        let pred = model.forward(tape, &batch, None)?;
        let pred = denormalize(tape, pred, scale, shift)?;
        let values: Vec<f64> = tape
            .data(pred)
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect();
        tape.truncate(mark)?;
        out.push((values, batch));
    }
    Ok(out)
}

/// Overall de-normalized metrics over a window set. With full horizons per
/// window the flat MAE equals the mean of per-horizon MAEs, so this is the
/// value used to pick the best checkpoint.
pub fn evaluate<F: Real, M: Forecaster<F>>(
    tape: &mut Tape<F>,
    model: &M,
    data: &WindowSet,
    scale: &[f64],
    shift: &[f64],
    batch_size: usize,
) -> Result<Metrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::NoWindows { what: "evaluation" });
    }
    let mut acc = MetricAccumulator::new();
    for (values, batch) in predict(tape, model, data, scale, shift, batch_size)? {
        for (p, &a) in values.iter().zip(&batch.y) {
            acc.observe(*p, a);
        }
    }
    Ok(acc.metrics().expect("window set is non-empty"))
}

/// Everything `fit` produces: the per-epoch history and which epoch's
/// parameters the model was left holding.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<Metrics>,
}

/// The full training loop: `cfg.epochs` epochs under the decay schedule,
/// tracking validation MAE after each epoch. The parameters with the lowest
/// validation MAE are restored into the tape before returning, so the model
/// ends at its best recorded state. With zero epochs the model is returned
/// untouched.
pub fn fit<F: Real, M: Forecaster<F>>(
    tape: &mut Tape<F>,
    model: &M,
    params: &ParamRegistry,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    if data.val.is_empty() && cfg.epochs > 0 {
        return Err(TrainError::NoWindows { what: "validation" });
    }
    let mut opt = Adam::new(tape, params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Metrics, Vec<Vec<F>>)> = None;
    for epoch in 0..cfg.epochs {
        let train_loss = train_epoch(tape, model, params, &mut opt, data, cfg, epoch)?;
        let val = evaluate(tape, model, &data.val, &data.scale, &data.shift, cfg.batch_size)?;
        history.push(EpochRecord {
            epoch,
            lr: lr_at_epoch(cfg, epoch),
            train_loss,
            val,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val.mae < b.mae) {
            best = Some((epoch, val, params.export_values(tape)));
        }
    }
    let (best_epoch, best_val) = match best {
        Some((epoch, val, snapshot)) => {
            params.import_values(tape, &snapshot)?;
            (Some(epoch), Some(val))
        }
        None => (None, None),
    };
    Ok(FitResult {
        history,
        best_epoch,
        best_val,
    })
}
