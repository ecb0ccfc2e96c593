use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use xferlab_core::model::adapter::{AdapterSpec, Position};
use xferlab_core::train::{adapt, AdaptationSet, StepLog, TrainConfig, TrainMode};
use xferlab_core::{Model64, SeedTree};

use crate::config::AdaptConfig;
use crate::error::{HarnessError, Result};

/// How a candidate adapts the base model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Finetune,
    Encoder,
    Decoder,
    Joint,
}

impl Method {
    pub fn position(self) -> Option<Position> {
        match self {
            Method::Finetune => None,
            Method::Encoder => Some(Position::Encoder),
            Method::Decoder => Some(Position::Decoder),
            Method::Joint => Some(Position::Joint),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Encoder => "encoder",
            Method::Decoder => "decoder",
            Method::Joint => "joint",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Method::Finetune),
            "encoder" => Ok(Method::Encoder),
            "decoder" => Ok(Method::Decoder),
            "joint" => Ok(Method::Joint),
            other => Err(HarnessError::Config(format!("unknown position {other:?}"))),
        }
    }
}

/// One grid cell. Adapter-only fields are zero for finetune candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub method: Method,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub stochastic_depth: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Candidate {
    pub fn finetune(steps: usize, lr: f64) -> Self {
        Candidate {
            method: Method::Finetune,
            hidden_dim: 0,
            dropout: 0.0,
            stochastic_depth: 0.0,
            steps,
            lr,
        }
    }

    pub fn id(&self) -> String {
        match self.method {
            Method::Finetune => format!("finetune-s{}-lr{}", self.steps, self.lr),
            m => format!(
                "{m}-h{}-do{}-sd{}-s{}-lr{}",
                self.hidden_dim, self.dropout, self.stochastic_depth, self.steps, self.lr
            ),
        }
    }

    pub fn adapter_spec(&self, init_scale: f64) -> Option<AdapterSpec> {
        self.method.position().map(|position| AdapterSpec {
            position,
            hidden_dim: self.hidden_dim,
            dropout: self.dropout,
            stochastic_depth: self.stochastic_depth,
            init_scale,
        })
    }

    /// Parameters this candidate trains on top of `base`.
    pub fn trainable_params(&self, base: &Model64, init_scale: f64) -> usize {
        match self.adapter_spec(init_scale) {
            Some(spec) => base.adapter_param_count(&spec),
            None => base.base_param_count(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.lr > 0.0) {
            return Err(HarnessError::Config(format!(
                "candidate {} needs positive steps and learning rate",
                self.id()
            )));
        }
        if let Some(spec) = self.adapter_spec(1e-2) {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Adapts a copy of `base` with the candidate. `seed` drives adapter
/// initialization, batch sampling, dropout and stochastic depth.
pub fn train_candidate(
    base: &Model64,
    cand: &Candidate,
    settings: &AdaptConfig,
    data: &AdaptationSet<f64>,
    seed: u64,
) -> Result<(Model64, StepLog)> {
    cand.validate()?;
    let seeds = SeedTree::new(seed);
    let mut model = base.clone();
    let (mode, weight_decay) = match cand.adapter_spec(settings.init_scale) {
        Some(spec) => {
            model.inject_adapters(&spec, &seeds.child("adapter-init"))?;
            (TrainMode::Adapter, settings.weight_decay_adapter)
        }
        None => (TrainMode::Finetune, settings.weight_decay_finetune),
    };
    let mut cfg = TrainConfig::new(
        mode,
        cand.steps,
        cand.lr,
        settings.batch_size,
        seeds.child("train").seed(),
    );
    cfg.warmup_fraction = settings.warmup_fraction;
    cfg.weight_decay = weight_decay;
    cfg.grad_clip = settings.grad_clip;
    let log = adapt(&mut model, data, &cfg)?;
    Ok((model, log))
}
