//! Transducer network: a simplified Conformer-style encoder, an LSTM
//! prediction network and an additive joint network, each with an optional
//! adapter position.

pub mod adapter;
pub mod decode;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use adapter::{adapter_forward, instance_prefixes, AdapterSpec, Position};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Label count V; the blank symbol is id V.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_dim: usize,
    pub pred_hidden: usize,
    pub joint_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            vocab_size: 16,
            d_model: 64,
            n_heads: 4,
            n_blocks: 4,
            ff_dim: 256,
            pred_hidden: 64,
            joint_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feature_dim,
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_blocks,
            self.ff_dim,
            self.pred_hidden,
            self.joint_hidden,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn blank_id(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-utterance forward settings: mode plus the random streams used by
/// stochastic depth and dropout.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub seeds: SeedTree,
    pub step: u64,
    /// Position of the utterance within its batch.
    pub item: usize,
}

impl ForwardCtx {
    pub fn new(mode: Mode, seeds: SeedTree, step: u64, item: usize) -> Self {
        ForwardCtx {
            mode,
            seeds,
            step,
            item,
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, SeedTree::new(0), 0, 0)
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }
}

pub(crate) fn init_uniform<S: Scalar>(
    seeds: &SeedTree,
    name: &str,
    shape: &[usize],
    bound: f64,
) -> Tensor<S> {
    let mut rng = seeds.stream(&format!("init.{name}"), 0);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            S::lit(if bound > 0.0 {
                rng.gen_range(-bound..bound)
            } else {
                0.0
            })
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape is consistent")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    adapters: Vec<AdapterSpec>,
}

/// LSTM hidden and cell state, each `[1 x pred_hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransducerModel<S> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    adapters: Vec<AdapterSpec>,
}

impl<S: Scalar> TransducerModel<S> {
    pub fn new(config: ModelConfig, seeds: &SeedTree) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = config;
        let linear =
            |store: &mut ParamStore<S>, name: &str, fan_in: usize, fan_out: usize, bias: bool| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                store.insert(
                    format!("{name}.w"),
                    init_uniform(seeds, name, &[fan_in, fan_out], bound),
                    true,
                )?;
                if bias {
                    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]), true)?;
                }
                Ok::<_, Error>(())
            };
        let norm = |store: &mut ParamStore<S>, name: &str, d: usize| {
            store.insert(format!("{name}.g"), Tensor::full(&[d], S::one()), true)?;
            store.insert(format!("{name}.b"), Tensor::zeros(&[d]), true)
        };

        linear(&mut store, "enc.input", c.feature_dim, c.d_model, true)?;
        for i in 0..c.n_blocks {
            for ff in ["ff1", "ff2"] {
                norm(&mut store, &format!("enc.{i}.{ff}.ln"), c.d_model)?;
                linear(
                    &mut store,
                    &format!("enc.{i}.{ff}.up"),
                    c.d_model,
                    c.ff_dim,
                    true,
                )?;
                linear(
                    &mut store,
                    &format!("enc.{i}.{ff}.down"),
                    c.ff_dim,
                    c.d_model,
                    true,
                )?;
            }
            norm(&mut store, &format!("enc.{i}.att.ln"), c.d_model)?;
            for proj in ["q", "k", "v", "o"] {
                linear(
                    &mut store,
                    &format!("enc.{i}.att.{proj}"),
                    c.d_model,
                    c.d_model,
                    true,
                )?;
            }
            norm(&mut store, &format!("enc.{i}.ln"), c.d_model)?;
        }

        let h = c.pred_hidden;
        store.insert(
            "pred.embed",
            init_uniform(seeds, "pred.embed", &[c.vocab_size + 1, h], 1.0),
            true,
        )?;
        let bound = 1.0 / (h as f64).sqrt();
        store.insert(
            "pred.lstm.w_ih",
            init_uniform(seeds, "pred.lstm.w_ih", &[h, 4 * h], bound),
            true,
        )?;
        store.insert(
            "pred.lstm.w_hh",
            init_uniform(seeds, "pred.lstm.w_hh", &[h, 4 * h], bound),
            true,
        )?;
        let mut bias = vec![S::zero(); 4 * h];
        // Forget gate starts open.
        bias[h..2 * h].iter_mut().for_each(|b| *b = S::one());
        store.insert("pred.lstm.b", Tensor::new(vec![4 * h], bias)?, true)?;

        linear(&mut store, "joint.enc", c.d_model, c.joint_hidden, true)?;
        linear(&mut store, "joint.pred", h, c.joint_hidden, false)?;
        linear(
            &mut store,
            "joint.out",
            c.joint_hidden,
            c.vocab_size + 1,
            true,
        )?;

        Ok(TransducerModel {
            config,
            store,
            adapters: Vec::new(),
        })
    }

    pub fn blank_id(&self) -> usize {
        self.config.blank_id()
    }

    fn p(&self, tape: &mut Tape<S>, name: &str) -> Result<Var> {
        tape.param(&self.store, name)
    }

    fn lin(&self, tape: &mut Tape<S>, x: Var, name: &str, bias: bool) -> Result<Var> {
        let w = self.p(tape, &format!("{name}.w"))?;
        let b = if bias {
            Some(self.p(tape, &format!("{name}.b"))?)
        } else {
            None
        };
        tape.linear(x, w, b)
    }

    fn norm(&self, tape: &mut Tape<S>, x: Var, name: &str) -> Result<Var> {
        let g = self.p(tape, &format!("{name}.g"))?;
        let b = self.p(tape, &format!("{name}.b"))?;
        tape.layer_norm(x, g, b, S::lit(LN_EPS))
    }

    fn maybe_adapter(
        &self,
        tape: &mut Tape<S>,
        position: Position,
        index: usize,
        x: Var,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        match self.adapter(position) {
            Some(spec) => {
                let prefix = &instance_prefixes(position, self.config.n_blocks)[index];
                adapter_forward(tape, &self.store, prefix, spec, x, ctx)
            }
            None => Ok(x),
        }
    }

    fn feed_forward(&self, tape: &mut Tape<S>, x: Var, name: &str) -> Result<Var> {
        let h = self.norm(tape, x, &format!("{name}.ln"))?;
        let h = self.lin(tape, h, &format!("{name}.up"), true)?;
        let h = tape.swish(h)?;
        let h = self.lin(tape, h, &format!("{name}.down"), true)?;
        let h = tape.scale(h, S::lit(0.5))?;
        tape.add(x, h)
    }

    fn self_attention(&self, tape: &mut Tape<S>, x: Var, name: &str) -> Result<Var> {
        let h = self.norm(tape, x, &format!("{name}.ln"))?;
        let q = self.lin(tape, h, &format!("{name}.q"), true)?;
        let k = self.lin(tape, h, &format!("{name}.k"), true)?;
        let v = self.lin(tape, h, &format!("{name}.v"), true)?;
        let dk = self.config.d_model / self.config.n_heads;
        let scale = S::lit(1.0 / (dk as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for head in 0..self.config.n_heads {
            let qh = tape.slice_cols(q, head * dk, dk)?;
            let kh = tape.slice_cols(k, head * dk, dk)?;
            let vh = tape.slice_cols(v, head * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let o = self.lin(tape, cat, &format!("{name}.o"), true)?;
        tape.add(x, o)
    }

    fn check_features(&self, features: &Tensor<S>) -> Result<()> {
        if features.shape().len() != 2 || features.cols() != self.config.feature_dim {
            return Err(Error::Input(format!(
                "features must be [T x {}], got {:?}",
                self.config.feature_dim,
                features.shape()
            )));
        }
        Ok(())
    }

    /// Encoder output `[T x d_model]`.
    pub fn encode(
        &self,
        tape: &mut Tape<S>,
        features: &Tensor<S>,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        self.check_features(features)?;
        let x = tape.constant(features.clone())?;
        let mut x = self.lin(tape, x, "enc.input", true)?;
        for i in 0..self.config.n_blocks {
            x = self.feed_forward(tape, x, &format!("enc.{i}.ff1"))?;
            x = self.self_attention(tape, x, &format!("enc.{i}.att"))?;
            x = self.feed_forward(tape, x, &format!("enc.{i}.ff2"))?;
            x = self.norm(tape, x, &format!("enc.{i}.ln"))?;
            x = self.maybe_adapter(tape, Position::Encoder, i, x, ctx)?;
        }
        Ok(x)
    }

    pub fn initial_state(&self, tape: &mut Tape<S>) -> Result<LstmState> {
        let h = tape.constant(Tensor::zeros(&[1, self.config.pred_hidden]))?;
        let c = tape.constant(Tensor::zeros(&[1, self.config.pred_hidden]))?;
        Ok(LstmState { h, c })
    }

    /// One LSTM step given the input projection `x . W_ih + b` of the token.
    fn lstm_cell(&self, tape: &mut Tape<S>, x_proj: Var, state: LstmState) -> Result<LstmState> {
        let hd = self.config.pred_hidden;
        let w_hh = self.p(tape, "pred.lstm.w_hh")?;
        let rec = tape.matmul(state.h, w_hh)?;
        let gates = tape.add(x_proj, rec)?;
        let i = tape.slice_cols(gates, 0, hd)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_cols(gates, hd, hd)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice_cols(gates, 2 * hd, hd)?;
        let g = tape.tanh(g)?;
        let o = tape.slice_cols(gates, 3 * hd, hd)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    fn token_projection(&self, tape: &mut Tape<S>, ids: &[usize]) -> Result<Var> {
        let table = self.p(tape, "pred.embed")?;
        let emb = tape.embedding(table, ids)?;
        let w_ih = self.p(tape, "pred.lstm.w_ih")?;
        let b = self.p(tape, "pred.lstm.b")?;
        tape.linear(emb, w_ih, Some(b))
    }

    /// Advances the prediction network by one token (the blank id doubles as
    /// the start symbol). Returns the adapted output row and the new state.
    pub fn predict_step(
        &self,
        tape: &mut Tape<S>,
        token: usize,
        state: LstmState,
        ctx: &ForwardCtx,
    ) -> Result<(Var, LstmState)> {
        let xp = self.token_projection(tape, &[token])?;
        let next = self.lstm_cell(tape, xp, state)?;
        let out = self.maybe_adapter(tape, Position::Decoder, 0, next.h, ctx)?;
        Ok((out, next))
    }

    /// Prediction-network outputs `[(U+1) x pred_hidden]` for the start symbol
    /// followed by `targets`.
    pub fn predict(&self, tape: &mut Tape<S>, targets: &[usize], ctx: &ForwardCtx) -> Result<Var> {
        let v = self.config.vocab_size;
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {v}"
            )));
        }
        let ids: Vec<usize> = std::iter::once(self.blank_id())
            .chain(targets.iter().copied())
            .collect();
        let xp = self.token_projection(tape, &ids)?;
        let mut state = self.initial_state(tape)?;
        let mut outs = Vec::with_capacity(ids.len());
        for u in 0..ids.len() {
            let row = tape.slice_rows(xp, u, 1)?;
            state = self.lstm_cell(tape, row, state)?;
            outs.push(state.h);
        }
        let pred = tape.concat_rows(&outs)?;
        self.maybe_adapter(tape, Position::Decoder, 0, pred, ctx)
    }

    pub fn joint_encoder_projection(&self, tape: &mut Tape<S>, enc: Var) -> Result<Var> {
        self.lin(tape, enc, "joint.enc", true)
    }

    pub fn joint_prediction_projection(&self, tape: &mut Tape<S>, pred: Var) -> Result<Var> {
        self.lin(tape, pred, "joint.pred", false)
    }

    /// Joint logits from already-combined projections `[n x joint_hidden]`.
    pub fn joint_logits(&self, tape: &mut Tape<S>, combined: Var, ctx: &ForwardCtx) -> Result<Var> {
        let h = tape.tanh(combined)?;
        let h = self.maybe_adapter(tape, Position::Joint, 0, h, ctx)?;
        self.lin(tape, h, "joint.out", true)
    }

    /// Joint log-probabilities `[T x (U+1) x (V+1)]`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        features: &Tensor<S>,
        targets: &[usize],
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        let t = features.shape().first().copied().unwrap_or(0);
        let enc = self.encode(tape, features, ctx)?;
        let pred = self.predict(tape, targets, ctx)?;
        let ep = self.joint_encoder_projection(tape, enc)?;
        let pp = self.joint_prediction_projection(tape, pred)?;
        let combined = tape.pair_add(ep, pp)?;
        let logits = self.joint_logits(tape, combined, ctx)?;
        let lp = tape.log_softmax(logits)?;
        tape.reshape(lp, vec![t, targets.len() + 1, self.config.vocab_size + 1])
    }

    /// Freezes every non-adapter parameter.
    pub fn freeze_base(&mut self) {
        self.store.freeze_base();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(CheckpointMeta {
            model: self.config,
            adapters: self.adapters.clone(),
        })?;
        checkpoint::save(path, &self.store, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = checkpoint::load::<S>(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            msg: format!("bad model metadata: {e}"),
        })?;
        meta.model.validate()?;
        Ok(TransducerModel {
            config: meta.model,
            store,
            adapters: meta.adapters,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::adapter::{AdapterSpec, Position};

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            vocab_size: 2,
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            ff_dim: 12,
            pred_hidden: 6,
            joint_hidden: 5,
        }
    }

    fn features(t: usize, f: usize, seed: u64) -> Tensor<f64> {
        init_uniform(&SeedTree::new(seed), "feat", &[t, f], 1.0)
    }

    #[test]
    fn zero_joint_weights_give_uniform_output() {
        let mut m = TransducerModel::<f64>::new(small_config(), &SeedTree::new(3)).unwrap();
        for name in ["joint.out.w", "joint.out.b"] {
            m.store.get_mut(name).unwrap().value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let lp = m
            .forward(&mut tape, &features(3, 4, 1), &[1, 0], &ForwardCtx::eval())
            .unwrap();
        assert_eq!(tape.shape(lp), &[3, 3, 3]);
        let expect = (1.0f64 / 3.0).ln();
        assert!(tape
            .value(lp)
            .data()
            .iter()
            .all(|&v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn rows_are_normalized() {
        let m = TransducerModel::<f64>::new(small_config(), &SeedTree::new(4)).unwrap();
        let mut tape = Tape::new();
        let lp = m
            .forward(
                &mut tape,
                &features(5, 4, 2),
                &[0, 1, 1],
                &ForwardCtx::eval(),
            )
            .unwrap();
        for row in tape.value(lp).data().chunks(3) {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-10);
        }
    }

    #[test]
    fn invalid_token_is_an_input_error() {
        let m = TransducerModel::<f64>::new(small_config(), &SeedTree::new(4)).unwrap();
        let mut tape = Tape::new();
        let err = m
            .forward(&mut tape, &features(2, 4, 2), &[2], &ForwardCtx::eval())
            .unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn eval_forward_is_bit_identical() {
        let mut m = TransducerModel::<f64>::new(small_config(), &SeedTree::new(4)).unwrap();
        let mut spec = AdapterSpec::new(Position::Encoder, 2);
        spec.dropout = 0.5;
        spec.stochastic_depth = 0.5;
        m.inject_adapters(&spec, &SeedTree::new(1)).unwrap();
        let x = features(4, 4, 9);
        let run = || {
            let mut tape = Tape::new();
            let lp = m.forward(&mut tape, &x, &[1], &ForwardCtx::eval()).unwrap();
            tape.value(lp).clone()
        };
        let a = run();
        let b = run();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn checkpoint_round_trip_keeps_adapters() {
        let mut m = TransducerModel::<f64>::new(small_config(), &SeedTree::new(4)).unwrap();
        m.inject_adapters(&AdapterSpec::new(Position::Joint, 3), &SeedTree::new(1))
            .unwrap();
        m.freeze_base();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = TransducerModel::<f64>::load(&path).unwrap();
        assert_eq!(back, m);
    }
}
