//! Optimization: the warmup/decay schedule, AdamW, and the training loop
//! shared by base training, fine-tuning and adapter adaptation.

pub mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::transducer_log_loss;
use crate::model::{ForwardCtx, Mode, TransducerModel};
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub use optim::{clip_global_norm, AdamW};

pub const DEFAULT_GRAD_CLIP: f64 = 5.0;
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.1;
pub const FINETUNE_WEIGHT_DECAY: f64 = 1e-3;
pub const ADAPTER_WEIGHT_DECAY: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Every parameter trains.
    Finetune,
    /// Only `adapter.` parameters train.
    Adapter,
}

fn default_warmup() -> f64 {
    DEFAULT_WARMUP_FRACTION
}

fn default_clip() -> f64 {
    DEFAULT_GRAD_CLIP
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    pub lr_peak: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn new(
        mode: TrainMode,
        total_steps: usize,
        lr_peak: f64,
        batch_size: usize,
        seed: u64,
    ) -> Self {
        TrainConfig {
            total_steps,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            lr_peak,
            batch_size,
            seed,
            mode,
            weight_decay: match mode {
                TrainMode::Finetune => FINETUNE_WEIGHT_DECAY,
                TrainMode::Adapter => ADAPTER_WEIGHT_DECAY,
            },
            grad_clip: DEFAULT_GRAD_CLIP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::Config(format!(
                "lr_peak {} must be positive",
                self.lr_peak
            )));
        }
        if self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::Config(
                "weight_decay must be >= 0 and grad_clip > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup to `lr_peak` over the first `warmup_fraction` of training,
/// then inverse-square-root decay:
/// `lr = lr_peak * min(step / w, sqrt(w / step))` with `w = warmup_fraction * total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_fraction * cfg.total_steps as f64;
    let s = step.max(1) as f64;
    cfg.lr_peak * (s / w).min((w / s).sqrt())
}

/// One training or evaluation utterance in model precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<S> {
    pub features: Tensor<S>,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub records: Vec<StepRecord>,
}

impl StepLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for r in &self.records {
            out.push_str(&format!("{},{:e},{}\n", r.step, r.lr, r.loss));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Training data drawn from the new domain only. Adaptation takes nothing
/// else, so original-domain data cannot reach the optimizer.
#[derive(Clone, Debug)]
pub struct AdaptationSet<S> {
    examples: Vec<Example<S>>,
}

impl<S: Scalar> AdaptationSet<S> {
    pub fn from_new_domain(examples: Vec<Example<S>>) -> Self {
        AdaptationSet { examples }
    }

    pub fn examples(&self) -> &[Example<S>] {
        &self.examples
    }
}

/// Mean transducer loss over a batch, recorded on `tape`.
pub fn batch_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &TransducerModel<S>,
    batch: &[&Example<S>],
    mode: Mode,
    seeds: &SeedTree,
    step: u64,
) -> Result<crate::tape::Var> {
    let mut losses = Vec::with_capacity(batch.len());
    for (item, ex) in batch.iter().enumerate() {
        let ctx = ForwardCtx::new(mode, *seeds, step, item);
        let lp = model.forward(tape, &ex.features, &ex.tokens, &ctx)?;
        losses.push(transducer_log_loss(tape, lp, &ex.tokens, model.blank_id())?);
    }
    let total = tape.add_scalars(&losses)?;
    tape.scale(total, S::lit(1.0 / batch.len() as f64))
}

/// Runs `cfg.total_steps` optimizer steps on batches sampled uniformly with
/// replacement from `data`. Trainability of parameters is taken from the
/// store as-is.
pub fn fit<S: Scalar>(
    model: &mut TransducerModel<S>,
    data: &[Example<S>],
    cfg: &TrainConfig,
) -> Result<StepLog> {
    fit_observed(model, data, cfg, |_, _| Ok(()))
}

/// [`fit`] with a callback run after every optimizer step.
pub fn fit_observed<S, F>(
    model: &mut TransducerModel<S>,
    data: &[Example<S>],
    cfg: &TrainConfig,
    mut observe: F,
) -> Result<StepLog>
where
    S: Scalar,
    F: FnMut(usize, &TransducerModel<S>) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training data is empty".into()));
    }
    let seeds = SeedTree::new(cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut log = StepLog::default();
    for step in 1..=cfg.total_steps {
        let mut rng = seeds.stream("batch", step as u64);
        let batch: Vec<&Example<S>> = (0..cfg.batch_size)
            .map(|_| &data[rng.gen_range(0..data.len())])
            .collect();
        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, model, &batch, Mode::Train, &seeds, step as u64)?;
        let loss_value = tape.value(loss).item().as_f64();
        let mut grads = tape.backward(loss)?.params;
        // Parameters skipped this step (stochastic depth) get a zero gradient.
        for (name, p) in model.store.iter() {
            if p.trainable && !grads.contains_key(name) {
                grads.insert(name.to_string(), Tensor::zeros(p.value.shape()));
            }
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = lr_at(step, cfg);
        opt.step(&mut model.store, &grads, lr)?;
        log.records.push(StepRecord {
            step,
            lr,
            loss: loss_value,
        });
        observe(step, model)?;
    }
    Ok(log)
}

/// Adapts `model` to a new domain.
///
/// Adapter mode freezes everything outside the adapter namespace and
/// requires adapters to be installed; finetune mode trains every parameter.
pub fn adapt<S: Scalar>(
    model: &mut TransducerModel<S>,
    data: &AdaptationSet<S>,
    cfg: &TrainConfig,
) -> Result<StepLog> {
    match cfg.mode {
        TrainMode::Adapter => {
            if model.adapters().is_empty() {
                return Err(Error::Config(
                    "adapter mode needs installed adapters".into(),
                ));
            }
            model.freeze_base();
        }
        TrainMode::Finetune => model.store.set_all_trainable(true),
    }
    fit(model, data.examples(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig::new(TrainMode::Finetune, 1000, 2e-3, 4, 0);
        let w = 100;
        assert!((lr_at(w, &cfg) - 2e-3).abs() < 1e-18);
        assert!((lr_at(w / 2, &cfg) - 1e-3).abs() < 1e-18);
        assert!((lr_at(4 * w, &cfg) - 1e-3).abs() < 1e-18);
        for s in 1..1000 {
            assert!(lr_at(s, &cfg) <= 2e-3 + 1e-18);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(TrainMode::Adapter, 10, 1e-3, 2, 0);
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.weight_decay, 0.0);
        cfg.warmup_fraction = 1.0;
        assert!(cfg.validate().is_err());
        cfg.warmup_fraction = 0.1;
        cfg.total_steps = 0;
        assert!(cfg.validate().is_err());
    }
}
