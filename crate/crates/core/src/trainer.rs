//! Training loop: AdamW with decoupled weight decay, triangular cyclic
//! learning rate between the configured minimum and maximum, mean NLL over
//! two-class log-softmax outputs, dev-set EER early stopping with patience,
//! best-checkpoint retention.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{Clip, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{compute_eer, EvalRecord};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycle_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_min: 1e-7,
            lr_max: 1e-5,
            cycle_epochs: 2,
            weight_decay: 1e-4,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_min <= 0.0 || self.lr_max < self.lr_min {
            return Err(Error::Validation(format!(
                "learning-rate range [{}, {}] invalid",
                self.lr_min, self.lr_max
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Validation(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if self.cycle_epochs == 0 {
            return Err(Error::Validation("cycle_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Triangular cyclic schedule: lr_min at step 0, lr_max at the half cycle,
/// back to lr_min at the full cycle.
pub fn cyclic_lr(step: usize, steps_per_cycle: usize, lr_min: f64, lr_max: f64) -> Result<f64> {
    if steps_per_cycle < 2 {
        return Err(Error::Validation(format!(
            "steps_per_cycle {steps_per_cycle} < 2"
        )));
    }
    let phase = (step % steps_per_cycle) as f64 / steps_per_cycle as f64;
    let tri = 1.0 - (2.0 * phase - 1.0).abs();
    Ok(lr_min + (lr_max - lr_min) * tri)
}

/// Adam with decoupled weight decay: moment updates with bias correction
/// (beta1 0.9, beta2 0.999, eps 1e-8), then p <- p - lr * wd * p.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(param_count: usize) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![Vec::new(); param_count],
            v: vec![Vec::new(); param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Parameters without a populated gradient are treated as zero-gradient
    /// (they still decay).
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer built for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (name, p)) in params.iter().enumerate() {
            let n = p.numel();
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; n];
                self.v[i] = vec![0.0; n];
            }
            let grad = p.grad_vec().unwrap_or_else(|| vec![0.0; n]);
            if grad.iter().any(|g| g.is_nan()) {
                return Err(Error::NanGradient(name.clone()));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.with_data_mut(|data| {
                for j in 0..n {
                    let g = grad[j];
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                    data[j] -= lr * weight_decay * data[j];
                }
            });
        }
        Ok(())
    }

    /// Moment vectors as named tensors, for checkpoint metadata.
    pub fn state_tensors(&self, params: &[(String, Tensor)]) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, (name, p)) in params.iter().enumerate() {
            let m = if self.m[i].is_empty() {
                vec![0.0; p.numel()]
            } else {
                self.m[i].clone()
            };
            let v = if self.v[i].is_empty() {
                vec![0.0; p.numel()]
            } else {
                self.v[i].clone()
            };
            out.push((format!("opt.m.{name}"), m));
            out.push((format!("opt.v.{name}"), v));
        }
        out
    }
}

/// Stops after `patience` consecutive epochs without a strict improvement
/// of the monitored value.
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    streak: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            streak: 0,
        }
    }

    /// Returns true when this epoch improved the best value.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.streak = 0;
            true
        } else {
            self.streak += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.streak >= self.patience
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_eer: f64,
    pub lr: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,dev_eer,lr";

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.train_loss, row.dev_eer, row.lr
        ));
    }
    out
}

pub struct FitResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_eer: f64,
    pub epochs_run: usize,
}

/// Score every clip with the model in evaluation mode.
pub fn score_split(model: &Model, clips: &[&Clip]) -> Result<Vec<EvalRecord>> {
    model.set_train_mode(false);
    clips
        .iter()
        .map(|clip| {
            let score = model.score(&clip.frames_tensor())?;
            Ok(EvalRecord {
                id: clip.id.clone(),
                score,
                label: clip.label,
                family: clip.family.clone(),
                split: clip.split.clone(),
            })
        })
        .collect()
}

/// Full training protocol: seeded shuffled batches, AdamW with the cyclic
/// schedule, dev EER after every epoch, early stopping, and retention of
/// the best-epoch checkpoint.
pub fn fit(model: &Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    let train = dataset.split("train");
    let dev = dataset.split("dev");
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Validation(
            "training requires non-empty train and dev splits".into(),
        ));
    }

    let params = model.trainable_params();
    let mut opt = AdamW::new(params.len());
    let rng = Rng::new(cfg.seed);
    let mut noise_rng = rng.derive(0x4015e);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let steps_per_cycle = (cfg.cycle_epochs * steps_per_epoch).max(2);

    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut global_step = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.derive(0xe90c4 + epoch as u64).shuffle(&mut order);

        model.set_train_mode(true);
        let mut loss_sum = 0.0;
        let mut last_lr = cfg.lr_min;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cyclic_lr(global_step, steps_per_cycle, cfg.lr_min, cfg.lr_max)?;
            last_lr = lr;
            let batch: Vec<(Tensor, u8)> = chunk
                .iter()
                .map(|&i| (train[i].frames_tensor(), train[i].label.code()))
                .collect();
            let refs: Vec<(&Tensor, u8)> = batch.iter().map(|(t, l)| (t, *l)).collect();
            let loss = model.batch_nll(&refs, Some(&mut noise_rng))?;
            let loss_value = loss.item()?;
            if !loss_value.is_finite() {
                return Err(Error::Numeric {
                    site: format!("epoch {epoch} step {global_step}"),
                    detail: format!("non-finite training loss {loss_value}"),
                });
            }
            loss.backward()?;
            opt.step(&params, lr, cfg.weight_decay)?;
            model.zero_grads();
            loss_sum += loss_value * chunk.len() as f64;
            global_step += 1;
        }
        let train_loss = loss_sum / train.len() as f64;

        let dev_records = score_split(model, &dev)?;
        let (dev_eer, _) = compute_eer(&dev_records)?;
        log.push(EpochLog {
            epoch,
            train_loss,
            dev_eer,
            lr: last_lr,
        });

        if stopper.observe(epoch, dev_eer) {
            best = Some(Checkpoint::capture(
                model,
                epoch,
                dev_eer,
                opt.step_count(),
                &opt.state_tensors(&params),
            ));
        }
        if stopper.should_stop() {
            break;
        }
    }

    let (best_epoch, best_dev_eer) = stopper.best();
    Ok(FitResult {
        checkpoint: best.expect("at least one epoch ran"),
        log,
        best_epoch,
        best_dev_eer,
        epochs_run,
    })
}
