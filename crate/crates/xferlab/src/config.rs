//! The experiment config: one JSON document naming datasets, model
//! dimensions, training budgets, the selection rule and the grid.
//!
//! Relative paths are resolved against the directory holding the config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xferlab_core::data::DomainSpec;
use xferlab_core::metrics::{SelectionConfig, DEFAULT_KAPPA};
use xferlab_core::model::adapter::DEFAULT_INIT_SCALE;
use xferlab_core::model::decode::DEFAULT_MAX_SYMBOLS_PER_FRAME;
use xferlab_core::train::{
    ADAPTER_WEIGHT_DECAY, DEFAULT_GRAD_CLIP, DEFAULT_WARMUP_FRACTION, FINETUNE_WEIGHT_DECAY,
};
use xferlab_core::ModelConfig;

use crate::candidate::Method;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub id: String,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub original_train: PathBuf,
    pub original_eval: Vec<EvalSet>,
    pub new_train: PathBuf,
    pub new_eval: Vec<EvalSet>,
}

impl DataConfig {
    pub fn eval_sets(&self) -> impl Iterator<Item = &EvalSet> {
        self.original_eval.iter().chain(&self.new_eval)
    }

    /// Directories belonging to the original domain.
    pub fn original_dirs(&self) -> Vec<&Path> {
        std::iter::once(self.original_train.as_path())
            .chain(self.original_eval.iter().map(|e| e.dir.as_path()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub weight_decay_finetune: f64,
    pub weight_decay_adapter: f64,
    pub init_scale: f64,
    pub grad_clip: f64,
    pub max_symbols_per_frame: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            batch_size: 8,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            weight_decay_finetune: FINETUNE_WEIGHT_DECAY,
            weight_decay_adapter: ADAPTER_WEIGHT_DECAY,
            init_scale: DEFAULT_INIT_SCALE,
            grad_clip: DEFAULT_GRAD_CLIP,
            max_symbols_per_frame: DEFAULT_MAX_SYMBOLS_PER_FRAME,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionSection {
    pub kappa: f64,
    pub budget_fraction: f64,
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection {
            kappa: DEFAULT_KAPPA,
            budget_fraction: 0.005,
        }
    }
}

/// Grid axes. Adapter cells take the Cartesian product of every axis;
/// finetune cells only vary steps and learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub positions: Vec<Method>,
    /// Hidden sizes per adapter position, keyed by position name.
    pub hidden_dims: BTreeMap<Method, Vec<usize>>,
    pub dropout_rates: Vec<f64>,
    pub stochastic_depth_rates: Vec<f64>,
    pub step_counts: Vec<usize>,
    pub learning_rates: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDomain {
    pub spec: DomainSpec,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub train_dir: PathBuf,
    pub eval_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataConfig,
    pub base_train: BaseTrainConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub base_checkpoint: Option<PathBuf>,
    pub grid: GridSpec,
    /// Synthetic domains written by `xferlab generate`.
    #[serde(default)]
    pub generate: Vec<GeneratedDomain>,
}

fn default_warmup() -> f64 {
    DEFAULT_WARMUP_FRACTION
}

fn default_trials() -> usize {
    5
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_json(&text, base)
    }

    /// Parses a config whose relative paths are anchored at `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: HarnessConfig = serde_json::from_str(text)
            .map_err(|e| HarnessError::Config(format!("invalid config: {e}")))?;
        let d = &mut cfg.data;
        resolve(base_dir, &mut d.original_train);
        resolve(base_dir, &mut d.new_train);
        for e in d.original_eval.iter_mut().chain(d.new_eval.iter_mut()) {
            resolve(base_dir, &mut e.dir);
        }
        if let Some(p) = cfg.base_checkpoint.as_mut() {
            resolve(base_dir, p);
        }
        for g in &mut cfg.generate {
            resolve(base_dir, &mut g.train_dir);
            resolve(base_dir, &mut g.eval_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.model.validate()?;
        if self.data.original_eval.is_empty() || self.data.new_eval.is_empty() {
            return bad("need at least one original and one new eval set".into());
        }
        let mut ids: Vec<&str> = self.data.eval_sets().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("eval set ids must be unique".into());
        }
        if self.base_train.steps == 0 || self.base_train.batch_size == 0 {
            return bad("base_train needs positive steps and batch_size".into());
        }
        if !(self.base_train.lr > 0.0) {
            return bad("base_train.lr must be positive".into());
        }
        if self.adapt.batch_size == 0 || self.adapt.max_symbols_per_frame == 0 {
            return bad("adapt.batch_size and max_symbols_per_frame must be positive".into());
        }
        if !(self.adapt.init_scale > 0.0) {
            return bad("adapt.init_scale must be positive".into());
        }
        if !(self.selection.budget_fraction > 0.0 && self.selection.budget_fraction < 1.0) {
            return bad("selection.budget_fraction must lie in (0, 1)".into());
        }
        self.selection_config().validate()?;
        self.grid.validate()
    }

    pub fn selection_config(&self) -> SelectionConfig {
        SelectionConfig {
            kappa: self.selection.kappa,
            original_datasets: self
                .data
                .original_eval
                .iter()
                .map(|e| e.id.clone())
                .collect(),
            new_datasets: self.data.new_eval.iter().map(|e| e.id.clone()).collect(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(format!("grid: {m}")));
        if self.positions.is_empty()
            || self.step_counts.is_empty()
            || self.learning_rates.is_empty()
        {
            return bad("positions, step_counts and learning_rates must be non-empty");
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.step_counts.contains(&0) {
            return bad("step counts must be positive");
        }
        if self.learning_rates.iter().any(|&lr| !(lr > 0.0)) {
            return bad("learning rates must be positive");
        }
        let adapters: Vec<Method> = self
            .positions
            .iter()
            .copied()
            .filter(|m| m.position().is_some())
            .collect();
        if !adapters.is_empty() {
            if self.dropout_rates.is_empty() || self.stochastic_depth_rates.is_empty() {
                return bad("adapter positions need dropout and stochastic depth rates");
            }
            for m in adapters {
                match self.hidden_dims.get(&m) {
                    Some(h) if !h.is_empty() && !h.contains(&0) => {}
                    _ => return bad(&format!("hidden_dims for {m} missing or invalid")),
                }
            }
        }
        Ok(())
    }
}
