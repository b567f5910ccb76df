//! Mini-batch training with best-epoch selection.
//!
//! Training minimizes the mean squared reconstruction error over normal frames
//! only. After every epoch the whole training set (or an evenly spaced
//! subsample of it) is re-scored with batch-norm in inference mode, and the
//! snapshot with the lowest mean per-frame RMSE wins — ties go to the earliest
//! epoch. Snapshots travel as checkpoint bytes, so the best model costs one
//! parameter buffer, not a clone of the full training state, and at most one
//! best checkpoint ever sits on disk.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::frame_error;
use crate::error::{Error, Result};
use crate::model::{checkpoint, Model};
use crate::rng::RngState;
use crate::tensor::{mse_loss, mse_loss_backward, Element, Optimizer, OptimizerKind, Tensor};

fn default_learning_rate() -> f64 {
    0.001
}
fn default_batch_size() -> usize {
    64
}
fn default_max_epochs() -> usize {
    50
}
fn default_input_size() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// Cap on the number of frames scored for the per-epoch average (evenly
    /// spaced over the corpus). None scores every frame.
    #[serde(default)]
    pub eval_subsample: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            seed: 0,
            optimizer: OptimizerKind::default(),
            input_size: default_input_size(),
            eval_subsample: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be at least 1".into()));
        }
        if self.eval_subsample == Some(0) {
            return Err(Error::InvalidConfig("eval_subsample must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of training history; epochs are 1-based and appended in order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_mse: f64,
    pub mean_rmse: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct FitOutcome {
    /// Snapshot from the epoch with minimal mean training-set RMSE.
    pub model: Model<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Deterministic epoch schedule: a seeded shuffle of all frame indices chunked
/// into batches. Every frame appears exactly once; the last batch may be short.
pub fn make_batches(count: usize, batch_size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    let mut indices: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut indices);
    indices.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Stacks single frames `C x H x W` into a batch `B x C x H x W`.
pub fn stack_frames<T: Element>(frames: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = frames.first().ok_or(Error::EmptyInput { op: "stack_frames" })?;
    let shape = first.shape();
    if shape.len() != 3 {
        return Err(Error::shape("stack_frames", format!("frames must be CxHxW, got {shape:?}")));
    }
    let mut data = Vec::with_capacity(frames.len() * first.len());
    for f in frames {
        if f.shape() != shape {
            return Err(Error::shape(
                "stack_frames",
                format!("frame shape {:?} differs from first frame {shape:?}", f.shape()),
            ));
        }
        data.extend_from_slice(f.data());
    }
    let mut out_shape = vec![frames.len()];
    out_shape.extend_from_slice(shape);
    Tensor::new(out_shape, data)
}

/// Wraps one `C x H x W` frame as a batch of one.
pub fn frame_batch<T: Element>(frame: &Tensor<T>) -> Result<Tensor<T>> {
    stack_frames(&[frame])
}

/// Mean per-frame RMSE over `frames`, scored in batches with BN in inference
/// mode. Used for epoch selection, so it must be deterministic.
fn mean_eval_rmse(
    model: &Model<f32>,
    frames: &[Tensor<f32>],
    eval_indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0f64;
    for chunk in eval_indices.chunks(batch_size) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &frames[i]).collect();
        let batch = stack_frames(&refs)?;
        let recon = model.forward_infer(&batch)?;
        let frame_len = refs[0].len();
        for (k, &i) in chunk.iter().enumerate() {
            let slice = &recon.data()[k * frame_len..(k + 1) * frame_len];
            let out = Tensor::new(frames[i].shape().to_vec(), slice.to_vec())?;
            total += frame_error(&frames[i], &out)?;
        }
    }
    Ok(total / eval_indices.len() as f64)
}

/// Evenly spaced subsample of `0..count`, capped at `limit`.
fn eval_indices(count: usize, limit: Option<usize>) -> Vec<usize> {
    let take = limit.unwrap_or(count).min(count).max(1);
    (0..take).map(|i| i * count / take).collect()
}

/// Trains `model` on normal frames and returns the best-epoch snapshot plus
/// the full history. When `best_path` is given, the current best checkpoint is
/// (re)written there every time it improves.
pub fn fit(
    frames: &[Tensor<f32>],
    mut model: Model<f32>,
    config: &TrainConfig,
    best_path: Option<&Path>,
) -> Result<FitOutcome> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::EmptyInput { op: "fit" });
    }
    let mc = model.config().clone();
    if config.input_size != mc.input_size {
        return Err(Error::InvalidConfig(format!(
            "train input_size {} does not match model input_size {}",
            config.input_size, mc.input_size
        )));
    }
    let expected = [mc.input_channels, mc.input_size, mc.input_size];
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != expected {
            return Err(Error::shape(
                "fit",
                format!("frame {i} has shape {:?}, expected {expected:?}", f.shape()),
            ));
        }
    }

    let mut rng = RngState::new(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let eval_idx = eval_indices(frames.len(), config.eval_subsample);
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(usize, f64, Vec<u8>)> = None;
    model.zero_grads();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut mse_sum = 0.0f64;
        for (batch_no, batch) in make_batches(frames.len(), config.batch_size, &mut rng)
            .iter()
            .enumerate()
        {
            let refs: Vec<&Tensor<f32>> = batch.iter().map(|&i| &frames[i]).collect();
            let x = stack_frames(&refs)?;
            let y = model.forward_train(&x)?;
            let loss = mse_loss(&y, &x)? as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_no });
            }
            mse_sum += loss * batch.len() as f64;
            let g = mse_loss_backward(&y, &x)?;
            model.backward(&g)?;
            opt.step(&mut model.parameters_mut())?;
        }
        let mean_mse = mse_sum / frames.len() as f64;
        let mean_rmse = mean_eval_rmse(&model, frames, &eval_idx, config.batch_size)?;
        history.push(EpochStats {
            epoch,
            mean_mse,
            mean_rmse,
            seconds: started.elapsed().as_secs_f64(),
        });
        // strict improvement only: ties keep the earlier epoch
        if best.as_ref().is_none_or(|(_, rmse, _)| mean_rmse < *rmse) {
            let bytes = checkpoint::to_bytes(&model)?;
            if let Some(path) = best_path {
                std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
            }
            best = Some((epoch, mean_rmse, bytes));
        }
    }

    let (best_epoch, _, bytes) = best.expect("max_epochs >= 1 ran at least one epoch");
    Ok(FitOutcome { model: checkpoint::from_bytes(&bytes)?, best_epoch, history })
}

/// History CSV: `epoch,mean_mse,mean_rmse,seconds`. The seconds column is
/// wall-clock and expected to differ between otherwise identical runs.
pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse("history", e))?;
    w.write_record(["epoch", "mean_mse", "mean_rmse", "seconds"])
        .and_then(|_| {
            for h in history {
                w.write_record([
                    h.epoch.to_string(),
                    format!("{:.9e}", h.mean_mse),
                    format!("{:.6}", h.mean_rmse),
                    format!("{:.3}", h.seconds),
                ])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::parse("history", e))
}

/// Reads `(epoch, mean_rmse)` pairs back from a history CSV.
pub fn read_history_rmse(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut r =
        csv::Reader::from_path(path).map_err(|e| Error::parse("history", e))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| Error::parse("history", e))?;
        let epoch = row
            .get(0)
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| Error::parse("history", "bad epoch field"))?;
        let rmse = row
            .get(2)
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::parse("history", "bad mean_rmse field"))?;
        out.push((epoch, rmse));
    }
    Ok(out)
}
