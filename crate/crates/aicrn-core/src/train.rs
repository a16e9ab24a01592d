//! Training: Nadam optimizer, MSE loss, regression metrics, early stopping,
//! and the epoch loop with best-checkpoint persistence.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::checkpoint::{load_model, save_model, EvalSummary};
use crate::data::{batches, EcgRecord, TargetKind};
use crate::error::{Error, Result};
use crate::network::AicrnModel;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tape};

// ---- loss ----------------------------------------------------------------------

/// Mean squared error over equal-shaped prediction/target tensors.
pub fn mse_loss<S: Scalar>(tape: &mut Tape<S>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Dim(format!(
            "mse_loss needs equal shapes, got {:?} and {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    if tape.data(pred).is_empty() {
        return Err(Error::Dim("mse_loss on empty tensors".into()));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

// ---- metrics -------------------------------------------------------------------

/// Regression metric triple. `r2` is `None` when the target variance is zero
/// (MAE and RMSE are still meaningful there).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
}

pub fn compute_metrics(pred: &[f64], target: &[f64]) -> Result<Metrics> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Dim(format!(
            "metrics need equal nonzero lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        abs_sum += d.abs();
        sq_sum += d * d;
    }
    let mae = abs_sum / n;
    let rmse = (sq_sum / n).sqrt();
    let t_mean: f64 = target.iter().sum::<f64>() / n;
    let ss_tot: f64 = target.iter().map(|&t| (t - t_mean) * (t - t_mean)).sum();
    let r2 = if ss_tot > 0.0 {
        Some(1.0 - sq_sum / ss_tot)
    } else {
        None
    };
    Ok(Metrics { mae, rmse, r2 })
}

// ---- Nadam ---------------------------------------------------------------------

/// Nadam: Adam with a Nesterov look-ahead on the first moment. The update is
///
/// ```text
/// t <- t + 1
/// m <- b1*m + (1-b1)*g
/// v <- b2*v + (1-b2)*g^2
/// m_hat <- m / (1 - b1^(t+1))
/// g_hat <- g / (1 - b1^t)
/// v_hat <- v / (1 - b2^t)
/// theta <- theta - lr * (b1*m_hat + (1-b1)*g_hat) / (sqrt(v_hat) + eps)
/// ```
#[derive(Clone, Debug)]
pub struct Nadam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

#[derive(Clone, Copy)]
struct StepScalars<S: Scalar> {
    b1: S,
    one_minus_b1: S,
    b2: S,
    one_minus_b2: S,
    c_m: S, // 1 - b1^(t+1)
    c_g: S, // 1 - b1^t
    c_v: S, // 1 - b2^t
    lr: S,
    eps: S,
}

impl<S: Scalar> Nadam<S> {
    pub fn new(lr: f64) -> Self {
        Self::with_config(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_config(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Nadam {
            lr,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    fn begin_step(&mut self) -> StepScalars<S> {
        self.t += 1;
        let t = self.t as i32;
        StepScalars {
            b1: S::from_f64(self.beta1),
            one_minus_b1: S::from_f64(1.0 - self.beta1),
            b2: S::from_f64(self.beta2),
            one_minus_b2: S::from_f64(1.0 - self.beta2),
            c_m: S::from_f64(1.0 - self.beta1.powi(t + 1)),
            c_g: S::from_f64(1.0 - self.beta1.powi(t)),
            c_v: S::from_f64(1.0 - self.beta2.powi(t)),
            lr: S::from_f64(self.lr),
            eps: S::from_f64(self.epsilon),
        }
    }

    fn ensure_slot(&mut self, slot: usize, len: usize) {
        while self.m.len() <= slot {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[slot].is_empty() {
            self.m[slot] = vec![S::ZERO; len];
            self.v[slot] = vec![S::ZERO; len];
        }
    }

    fn update_slot(&mut self, slot: usize, theta: &mut [S], grad: &[S], sc: &StepScalars<S>) {
        debug_assert_eq!(theta.len(), grad.len());
        self.ensure_slot(slot, theta.len());
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        for i in 0..theta.len() {
            let g = grad[i];
            m[i] = sc.b1 * m[i] + sc.one_minus_b1 * g;
            v[i] = sc.b2 * v[i] + sc.one_minus_b2 * g * g;
            let m_hat = m[i] / sc.c_m;
            let g_hat = g / sc.c_g;
            let v_hat = v[i] / sc.c_v;
            theta[i] -= sc.lr * (sc.b1 * m_hat + sc.one_minus_b1 * g_hat) / (v_hat.sqrt() + sc.eps);
        }
    }

    /// One optimizer step over a single parameter buffer (slot 0).
    pub fn step_single(&mut self, theta: &mut [S], grad: &[S]) {
        let sc = self.begin_step();
        self.update_slot(0, theta, grad, &sc);
    }

    /// One optimizer step over every trainable tensor of a model, with
    /// gradients in visit order.
    pub fn step_model(&mut self, model: &mut AicrnModel<S>, grads: &[Vec<S>]) -> Result<()> {
        if grads.len() != model.param_tensor_count() {
            return Err(Error::Train(format!(
                "gradient count {} does not match {} parameter tensors",
                grads.len(),
                model.param_tensor_count()
            )));
        }
        let mut mismatch: Option<String> = None;
        let mut idx = 0usize;
        model.visit_params(&mut |p| {
            if mismatch.is_none() && p.data.len() != grads[idx].len() {
                mismatch = Some(format!(
                    "gradient for {} has {} values, parameter has {}",
                    p.name,
                    grads[idx].len(),
                    p.data.len()
                ));
            }
            idx += 1;
        });
        if let Some(m) = mismatch {
            return Err(Error::Train(m));
        }
        let sc = self.begin_step();
        // Move the parameter buffers out, update them against the moment
        // slots, and move them back; avoids aliasing the model and `self`.
        let mut bufs: Vec<Vec<S>> = Vec::with_capacity(grads.len());
        model.visit_params_mut(&mut |p| bufs.push(std::mem::take(&mut p.data)));
        for (slot, buf) in bufs.iter_mut().enumerate() {
            self.update_slot(slot, buf, &grads[slot], &sc);
        }
        let mut it = bufs.into_iter();
        model.visit_params_mut(&mut |p| p.data = it.next().expect("buffer count matches"));
        Ok(())
    }
}

// ---- early stopping --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over a score (the negated validation loss). An
/// observation improves only if it beats the best score by more than
/// `min_delta`; ties are non-improvements.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    pub best_score: f64,
    pub counter: u32,
    pub patience: u32,
    pub min_delta: f64,
}

impl EarlyStop {
    pub fn new(patience: u32, min_delta: f64) -> Self {
        EarlyStop {
            best_score: f64::NEG_INFINITY,
            counter: 0,
            patience,
            min_delta,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> StopDecision {
        let score = -val_loss;
        if score > self.best_score + self.min_delta {
            self.best_score = score;
            self.counter = 0;
            StopDecision::Improved
        } else {
            self.counter += 1;
            if self.counter > self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_val_loss(&self) -> f64 {
        -self.best_score
    }
}

// ---- training loop ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub patience: u32,
    pub min_delta: f64,
    pub target: TargetKind,
    pub checkpoint_path: PathBuf,
    /// Train on z-scored targets (statistics from the training split);
    /// predictions are mapped back to physical units for metrics.
    pub standardize_targets: bool,
    /// Suppress the per-epoch stdout line.
    pub quiet: bool,
}

impl TrainConfig {
    pub fn new(target: TargetKind, checkpoint_path: impl Into<PathBuf>) -> Self {
        TrainConfig {
            max_epochs: 1000,
            batch_size: 300,
            seed: 42,
            lr: 0.0005,
            patience: 20,
            min_delta: 0.0,
            target,
            checkpoint_path: checkpoint_path.into(),
            standardize_targets: false,
            quiet: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.min_delta < 0.0 {
            return Err(Error::Config("min_delta must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub checkpoint_path: PathBuf,
    pub history_csv_path: PathBuf,
    pub checkpoint_writes: usize,
    pub target_mean: Option<f64>,
    pub target_std: Option<f64>,
    /// Eval-mode metrics of the restored best model on the training split,
    /// in physical units.
    pub final_train_metrics: EvalSummary,
}

const DROPOUT_STREAM: u64 = 1 << 40;

/// Eval-mode raw model outputs for a record list, chunked.
pub fn predict_records(
    model: &AicrnModel<f32>,
    records: &[EcgRecord],
    chunk_size: usize,
) -> Result<Vec<f64>> {
    let len = model.config.input_len;
    let leads = model.config.in_channels;
    let mut preds = Vec::with_capacity(records.len());
    for chunk in records.chunks(chunk_size.max(1)) {
        let mut x = Vec::with_capacity(chunk.len() * leads * len);
        for rec in chunk {
            if rec.n_samples != len || rec.n_leads != leads {
                return Err(Error::Dim(format!(
                    "record {} is {} leads x {} samples, model expects {} x {}",
                    rec.id, rec.n_leads, rec.n_samples, leads, len
                )));
            }
            x.extend_from_slice(&rec.signal);
        }
        let out = model.predict(&x, chunk.len())?;
        preds.extend(out.iter().map(|&v| v as f64));
    }
    Ok(preds)
}

fn target_values(records: &[EcgRecord], target: TargetKind) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            r.label(target)
                .ok_or_else(|| Error::Data(format!("record {} is missing target {}", r.id, target)))
        })
        .collect()
}

fn check_sets(train: &[EcgRecord], val: &[EcgRecord]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Train(
            "train and validation sets must be nonempty".into(),
        ));
    }
    let mut train_ids: Vec<&str> = train.iter().map(|r| r.id.as_str()).collect();
    let mut val_ids: Vec<&str> = val.iter().map(|r| r.id.as_str()).collect();
    train_ids.sort_unstable();
    val_ids.sort_unstable();
    if train_ids == val_ids {
        // The single-batch overfit harness trains and validates on the same
        // records; identical sets are allowed.
        return Ok(());
    }
    let overlap: Vec<&&str> = val_ids
        .iter()
        .filter(|id| train_ids.binary_search(id).is_ok())
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Train(format!(
            "train and validation sets overlap on {} record(s), e.g. {}",
            overlap.len(),
            overlap[0]
        )));
    }
    Ok(())
}

/// The full training loop: seeded shuffling, minibatch Nadam steps, per-epoch
/// validation, early stopping, best-checkpoint saving, and restore-best at
/// the end.
pub fn fit(
    model: &mut AicrnModel<f32>,
    train_set: &[EcgRecord],
    val_set: &[EcgRecord],
    tc: &TrainConfig,
) -> Result<TrainRun> {
    tc.validate()?;
    check_sets(train_set, val_set)?;
    if let Some(parent) = tc.checkpoint_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }

    let input_len = model.config.input_len;
    let train_targets_raw = target_values(train_set, tc.target)?;
    let val_targets_raw = target_values(val_set, tc.target)?;

    let (t_mean, t_std) = if tc.standardize_targets {
        let n = train_targets_raw.len() as f64;
        let mean = train_targets_raw.iter().sum::<f64>() / n;
        let var = train_targets_raw
            .iter()
            .map(|&t| (t - mean) * (t - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if std <= 0.0 {
            return Err(Error::Train("cannot standardize a constant target".into()));
        }
        (Some(mean), Some(std))
    } else {
        (None, None)
    };
    let to_model_scale = |y: f64| match (t_mean, t_std) {
        (Some(m), Some(s)) => (y - m) / s,
        _ => y,
    };
    let from_model_scale = |y: f64| match (t_mean, t_std) {
        (Some(m), Some(s)) => y * s + m,
        _ => y,
    };

    let val_targets_scaled: Vec<f64> = val_targets_raw.iter().map(|&y| to_model_scale(y)).collect();

    let mut optimizer: Nadam<f32> = Nadam::new(tc.lr);
    let mut stopper = EarlyStop::new(tc.patience, tc.min_delta);
    let mut dropout_rng = Rng::substream(tc.seed, DROPOUT_STREAM);
    let param_names = model.param_names();

    let mut history: Vec<EpochStats> = Vec::new();
    let mut best_epoch = 0usize;
    let mut checkpoint_writes = 0usize;

    for epoch in 1..=tc.max_epochs {
        let epoch_batches = batches(
            train_set,
            tc.target,
            tc.batch_size,
            input_len,
            tc.seed,
            epoch,
        )?;
        let mut loss_sum = 0.0f64;
        let mut example_count = 0usize;
        for batch in &epoch_batches {
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.leaf(
                batch.x.clone(),
                &[batch.size, model.config.in_channels, input_len],
                false,
            )?;
            let y_scaled: Vec<f32> = batch
                .y
                .iter()
                .map(|&y| to_model_scale(y as f64) as f32)
                .collect();
            let y = tape.leaf(y_scaled, &[batch.size, 1], false)?;
            let (pred, bound) = model.forward_train(&mut tape, x, &mut dropout_rng)?;
            let loss = mse_loss(&mut tape, pred, y)?;
            let loss_value = tape.data(loss)[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite training loss at epoch {}",
                    epoch
                )));
            }
            tape.backward(loss)?;
            let grads = bound.grads(&tape);
            for (i, g) in grads.iter().enumerate() {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::Train(format!(
                        "non-finite gradient for parameter {} at epoch {}",
                        param_names[i], epoch
                    )));
                }
            }
            optimizer.step_model(model, &grads)?;
            loss_sum += loss_value * batch.size as f64;
            example_count += batch.size;
        }
        let train_mse = loss_sum / example_count as f64;

        let val_preds_scaled = predict_records(model, val_set, tc.batch_size)?;
        let val_mse = val_preds_scaled
            .iter()
            .zip(&val_targets_scaled)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<f64>()
            / val_targets_scaled.len() as f64;
        if !val_mse.is_finite() {
            return Err(Error::Train(format!(
                "non-finite validation loss at epoch {}",
                epoch
            )));
        }

        let decision = stopper.observe(val_mse);
        if decision == StopDecision::Improved {
            save_model(model, &tc.checkpoint_path)?;
            checkpoint_writes += 1;
            best_epoch = epoch;
        }
        if !tc.quiet {
            println!(
                "epoch={} train_mse={:.6e} val_mse={:.6e} best={:.6e} counter={}",
                epoch,
                train_mse,
                val_mse,
                stopper.best_val_loss(),
                stopper.counter
            );
        }
        history.push(EpochStats {
            epoch,
            train_mse,
            val_mse,
        });
        if decision == StopDecision::Stop {
            break;
        }
    }

    // Epoch history CSV next to the checkpoint.
    let history_csv_path = tc.checkpoint_path.with_extension("history.csv");
    let mut csv = String::from("epoch,train_mse,val_mse\n");
    for h in &history {
        let _ = writeln!(csv, "{},{:.9e},{:.9e}", h.epoch, h.train_mse, h.val_mse);
    }
    std::fs::write(&history_csv_path, csv).map_err(|e| Error::io(&history_csv_path, e))?;

    // Restore the best checkpoint so the returned model is the best model.
    *model = load_model(&tc.checkpoint_path)?;

    let train_preds: Vec<f64> = predict_records(model, train_set, tc.batch_size)?
        .into_iter()
        .map(from_model_scale)
        .collect();
    let metrics = compute_metrics(&train_preds, &train_targets_raw)?;
    let mse = train_preds
        .iter()
        .zip(&train_targets_raw)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / train_preds.len() as f64;

    Ok(TrainRun {
        history,
        best_epoch,
        best_val_mse: stopper.best_val_loss(),
        checkpoint_path: tc.checkpoint_path.clone(),
        history_csv_path,
        checkpoint_writes,
        target_mean: t_mean,
        target_std: t_std,
        final_train_metrics: EvalSummary {
            n: train_preds.len(),
            mse,
            mae: metrics.mae,
            rmse: metrics.rmse,
            r2: metrics.r2,
        },
    })
}
