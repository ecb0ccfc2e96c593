//! Residual bottleneck adapters and their injection into a transducer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_uniform, ForwardCtx, TransducerModel, LN_EPS};
use crate::params::{ParamStore, ADAPTER_PREFIX};
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    /// One instance after every encoder block.
    Encoder,
    /// One instance on the prediction-network output.
    Decoder,
    /// One instance after the joint hidden activation.
    Joint,
}

impl Position {
    pub const ALL: [Position; 3] = [Position::Encoder, Position::Decoder, Position::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            Position::Encoder => "encoder",
            Position::Decoder => "decoder",
            Position::Joint => "joint",
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Position {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Position::Encoder),
            "decoder" => Ok(Position::Decoder),
            "joint" => Ok(Position::Joint),
            other => Err(Error::Config(format!("unknown adapter position {other:?}"))),
        }
    }
}

pub const DEFAULT_INIT_SCALE: f64 = 1e-2;

fn default_init_scale() -> f64 {
    DEFAULT_INIT_SCALE
}

/// Placement, size and regularization of one adapter family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub position: Position,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub stochastic_depth: f64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl AdapterSpec {
    pub fn new(position: Position, hidden_dim: usize) -> Self {
        AdapterSpec {
            position,
            hidden_dim,
            dropout: 0.0,
            stochastic_depth: 0.0,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config(
                "adapter hidden_dim must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "adapter dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(0.0..=1.0).contains(&self.stochastic_depth) {
            return Err(Error::Config(format!(
                "adapter stochastic_depth {} outside [0, 1]",
                self.stochastic_depth
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!(
                "adapter init_scale {} invalid",
                self.init_scale
            )));
        }
        Ok(())
    }
}

/// Parameters in one adapter instance acting on `d`-wide rows.
pub fn params_per_instance(d: usize, hidden: usize) -> usize {
    2 * d + d * hidden + hidden + hidden * d + d
}

/// Name prefixes of the adapter instances a spec installs.
pub fn instance_prefixes(position: Position, n_blocks: usize) -> Vec<String> {
    match position {
        Position::Encoder => (0..n_blocks)
            .map(|i| format!("{ADAPTER_PREFIX}enc.{i}"))
            .collect(),
        Position::Decoder => vec![format!("{ADAPTER_PREFIX}dec")],
        Position::Joint => vec![format!("{ADAPTER_PREFIX}joint")],
    }
}

/// Residual adapter: `x + dropout(up(swish(down(layer_norm(x)))))`.
///
/// In training mode the whole module is skipped with probability
/// `stochastic_depth`, drawn once per instance per step.
pub fn adapter_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
    spec: &AdapterSpec,
    x: Var,
    ctx: &ForwardCtx,
) -> Result<Var> {
    let train = ctx.is_train();
    if train && spec.stochastic_depth > 0.0 {
        let mut rng = ctx.seeds.stream(&format!("{prefix}.sdepth"), ctx.step);
        if rng.gen::<f64>() < spec.stochastic_depth {
            return Ok(x);
        }
    }
    let g = tape.param(store, &format!("{prefix}.ln.g"))?;
    let b = tape.param(store, &format!("{prefix}.ln.b"))?;
    let h = tape.layer_norm(x, g, b, S::lit(LN_EPS))?;
    let w = tape.param(store, &format!("{prefix}.w_down"))?;
    let bd = tape.param(store, &format!("{prefix}.b_down"))?;
    let h = tape.linear(h, w, Some(bd))?;
    let h = tape.swish(h)?;
    let w = tape.param(store, &format!("{prefix}.w_up"))?;
    let bu = tape.param(store, &format!("{prefix}.b_up"))?;
    let h = tape.linear(h, w, Some(bu))?;
    let h = if train && spec.dropout > 0.0 {
        let mut rng = ctx
            .seeds
            .stream(&format!("{prefix}.dropout.{}", ctx.item), ctx.step);
        tape.dropout(h, spec.dropout, true, &mut rng)?
    } else {
        h
    };
    tape.add(x, h)
}

fn insert_instance<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    d: usize,
    spec: &AdapterSpec,
    seeds: &SeedTree,
) -> Result<()> {
    let h = spec.hidden_dim;
    store.insert(format!("{prefix}.ln.g"), Tensor::full(&[d], S::one()), true)?;
    store.insert(format!("{prefix}.ln.b"), Tensor::zeros(&[d]), true)?;
    let w_down = init_uniform(seeds, &format!("{prefix}.w_down"), &[d, h], spec.init_scale);
    store.insert(format!("{prefix}.w_down"), w_down, true)?;
    store.insert(format!("{prefix}.b_down"), Tensor::zeros(&[h]), true)?;
    store.insert(format!("{prefix}.w_up"), Tensor::zeros(&[h, d]), true)?;
    store.insert(format!("{prefix}.b_up"), Tensor::zeros(&[d]), true)?;
    Ok(())
}

impl<S: Scalar> TransducerModel<S> {
    /// Row width seen by adapters at `position`.
    pub fn adapter_width(&self, position: Position) -> usize {
        match position {
            Position::Encoder => self.config.d_model,
            Position::Decoder => self.config.pred_hidden,
            Position::Joint => self.config.joint_hidden,
        }
    }

    /// Installs adapters at `spec.position` with a zero up-projection, so the
    /// model's outputs are unchanged until the adapters train.
    pub fn inject_adapters(&mut self, spec: &AdapterSpec, seeds: &SeedTree) -> Result<()> {
        spec.validate()?;
        if self.adapter(spec.position).is_some() {
            return Err(Error::Config(format!(
                "adapters already installed at position {}",
                spec.position
            )));
        }
        let d = self.adapter_width(spec.position);
        for prefix in instance_prefixes(spec.position, self.config.n_blocks) {
            insert_instance(&mut self.store, &prefix, d, spec, seeds)?;
        }
        self.adapters.push(*spec);
        Ok(())
    }

    pub fn adapter(&self, position: Position) -> Option<&AdapterSpec> {
        self.adapters.iter().find(|a| a.position == position)
    }

    pub fn adapters(&self) -> &[AdapterSpec] {
        &self.adapters
    }

    /// Parameters a spec would add if injected.
    pub fn adapter_param_count(&self, spec: &AdapterSpec) -> usize {
        let n = instance_prefixes(spec.position, self.config.n_blocks).len();
        n * params_per_instance(self.adapter_width(spec.position), spec.hidden_dim)
    }

    /// Parameters outside the adapter namespace.
    pub fn base_param_count(&self) -> usize {
        self.store.numel() - self.store.numel_with_prefix(ADAPTER_PREFIX)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub compliant: bool,
    pub fraction: f64,
    pub added: usize,
    pub base: usize,
}

/// Compares the parameters `spec` adds against a fraction of the base model.
pub fn check_param_budget<S: Scalar>(
    model: &TransducerModel<S>,
    spec: &AdapterSpec,
    budget_fraction: f64,
) -> Result<BudgetCheck> {
    if !(budget_fraction > 0.0 && budget_fraction < 1.0) {
        return Err(Error::Config(format!(
            "budget fraction {budget_fraction} outside (0, 1)"
        )));
    }
    spec.validate()?;
    let added = model.adapter_param_count(spec);
    let base = model.base_param_count();
    let fraction = added as f64 / base as f64;
    Ok(BudgetCheck {
        compliant: fraction <= budget_fraction,
        fraction,
        added,
        base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mode, ModelConfig};

    fn tiny() -> TransducerModel<f64> {
        let cfg = ModelConfig {
            feature_dim: 4,
            vocab_size: 3,
            d_model: 8,
            n_heads: 2,
            n_blocks: 4,
            ff_dim: 16,
            pred_hidden: 8,
            joint_hidden: 8,
        };
        TransducerModel::new(cfg, &SeedTree::new(1)).unwrap()
    }

    #[test]
    fn per_instance_count_formula() {
        assert_eq!(params_per_instance(64, 16), 2256);
    }

    #[test]
    fn encoder_spec_installs_one_instance_per_block() {
        let mut m = tiny();
        m.inject_adapters(&AdapterSpec::new(Position::Encoder, 2), &SeedTree::new(2))
            .unwrap();
        let n = m
            .store
            .iter()
            .filter(|(k, _)| k.starts_with("adapter.enc.") && k.ends_with(".w_up"))
            .count();
        assert_eq!(n, 4);
        assert_eq!(
            m.store.numel_with_prefix(ADAPTER_PREFIX),
            4 * params_per_instance(8, 2)
        );
    }

    #[test]
    fn duplicate_injection_is_rejected() {
        let mut m = tiny();
        let spec = AdapterSpec::new(Position::Joint, 3);
        m.inject_adapters(&spec, &SeedTree::new(2)).unwrap();
        assert!(matches!(
            m.inject_adapters(&spec, &SeedTree::new(3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_hidden_dim_is_a_config_error() {
        let m = tiny();
        let spec = AdapterSpec::new(Position::Decoder, 0);
        assert!(matches!(
            check_param_budget(&m, &spec, 0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn budget_fraction_is_affine_in_hidden_dim() {
        let m = tiny();
        let f = |h| {
            check_param_budget(&m, &AdapterSpec::new(Position::Decoder, h), 0.5)
                .unwrap()
                .fraction
        };
        let (f1, f2, f4) = (f(1), f(2), f(4));
        assert!(((f4 - f2) - 2.0 * (f2 - f1)).abs() < 1e-15);
        assert!(f4 < 2.0 * f2);
    }

    #[test]
    fn budget_compliance_at_four_tenths_of_a_percent() {
        let m = tiny();
        let spec = AdapterSpec::new(Position::Joint, 1);
        let added = m.adapter_param_count(&spec) as f64;
        let base = m.base_param_count() as f64;
        let check = check_param_budget(&m, &spec, added / base * 1.25).unwrap();
        assert!(check.compliant);
        let check = check_param_budget(&m, &spec, added / base * 0.8).unwrap();
        assert!(!check.compliant);
    }

    #[test]
    fn full_stochastic_depth_skips_in_training() {
        let mut m = tiny();
        let mut spec = AdapterSpec::new(Position::Decoder, 2);
        spec.stochastic_depth = 1.0;
        m.inject_adapters(&spec, &SeedTree::new(5)).unwrap();
        // Make the module non-trivial so a skip is observable.
        for name in ["adapter.dec.w_down", "adapter.dec.w_up"] {
            let w = m.store.get_mut(name).unwrap().value.data_mut();
            w.iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = (i as f64).sin());
        }
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(vec![2, 8], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap())
            .unwrap();
        let ctx = ForwardCtx::new(Mode::Train, SeedTree::new(9), 1, 0);
        let y = adapter_forward(&mut tape, &m.store, "adapter.dec", &spec, x, &ctx).unwrap();
        assert_eq!(y, x);
        let ctx = ForwardCtx::eval();
        let y = adapter_forward(&mut tape, &m.store, "adapter.dec", &spec, x, &ctx).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(x)) > 0.1);
    }
}
