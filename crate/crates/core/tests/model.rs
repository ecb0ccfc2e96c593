use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xferlab_core::loss::{brute_force_log_loss, transducer_log_loss, uniform_lattice_loss};
use xferlab_core::model::decode::greedy_decode;
use xferlab_core::train::{adapt, batch_loss, fit, AdaptationSet, Example, TrainConfig, TrainMode};
use xferlab_core::{
    AdapterSpec, ForwardCtx, Mode, ModelConfig, Position, SeedTree, Tape, Tensor, TransducerModel,
};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        vocab_size: 3,
        d_model: 8,
        n_heads: 2,
        n_blocks: 2,
        ff_dim: 12,
        pred_hidden: 6,
        joint_hidden: 7,
    }
}

fn features(t: usize, f: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![t, f],
        (0..t * f).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn example(t: usize, tokens: &[usize], seed: u64) -> Example<f64> {
    Example {
        features: features(t, 4, seed),
        tokens: tokens.to_vec(),
    }
}

fn random_lattice(t: usize, u: usize, v: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let k = v + 1;
    let mut data = Vec::new();
    for _ in 0..t * (u + 1) {
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        data.extend(logits.iter().map(|x| x - lse));
    }
    Tensor::new(vec![t, u + 1, k], data).unwrap()
}

fn dp_loss(lp: &Tensor<f64>, target: &[usize], blank: usize) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(lp.clone()).unwrap();
    let l = transducer_log_loss(&mut tape, x, target, blank).unwrap();
    tape.value(l).item()
}

#[test]
fn recursion_matches_path_enumeration_on_random_lattices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let t = rng.gen_range(1..=6);
        let u = rng.gen_range(0..=(12 - t).min(5));
        let v = rng.gen_range(1..=4);
        let lp = random_lattice(t, u, v, &mut rng);
        let target: Vec<usize> = (0..u).map(|_| rng.gen_range(0..v)).collect();
        let dp = dp_loss(&lp, &target, v);
        let bf = brute_force_log_loss(&lp, &target, v).unwrap();
        assert!(
            (dp - bf).abs() <= 1e-9 * bf.abs().max(1.0),
            "T={t} U={u}: {dp} vs {bf}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_non_negative(seed in 0u64..10_000, t in 1usize..6, u in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = random_lattice(t, u, 3, &mut rng);
        let target: Vec<usize> = (0..u).map(|_| rng.gen_range(0..3)).collect();
        prop_assert!(dp_loss(&lp, &target, 3) >= -1e-12);
    }

    #[test]
    fn uniform_lattice_closed_form(t in 1usize..10, u in 0usize..8, v in 1usize..10) {
        let k = v + 1;
        let lp = Tensor::full(&[t, u + 1, k], -(k as f64).ln());
        let target: Vec<usize> = (0..u).map(|i| i % v).collect();
        let closed = uniform_lattice_loss(t, u, v);
        prop_assert!((dp_loss(&lp, &target, v) - closed).abs() < 1e-9 * closed.max(1.0));
    }

    #[test]
    fn joint_rows_are_distributions(seed in 0u64..1000, t in 1usize..5, u in 0usize..4) {
        let m = TransducerModel::<f64>::new(tiny_config(), &SeedTree::new(seed)).unwrap();
        let mut tape = Tape::new();
        let target: Vec<usize> = (0..u).map(|i| (i + seed as usize) % 3).collect();
        let lp = m.forward(&mut tape, &features(t, 4, seed), &target, &ForwardCtx::eval()).unwrap();
        let v = tape.value(lp);
        prop_assert_eq!(v.shape(), &[t, u + 1, 4][..]);
        for row in v.data().chunks(4) {
            let s: f64 = row.iter().map(|x| x.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

/// Perturbs every parameter element of the model and compares the loss change
/// with the tape gradient.
fn model_gradcheck(model: &mut TransducerModel<f64>, ex: &Example<f64>) {
    let seeds = SeedTree::new(0);
    let loss_of = |m: &TransducerModel<f64>| {
        let mut tape = Tape::new();
        let l = batch_loss(&mut tape, m, &[ex], Mode::Eval, &seeds, 0).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let l = batch_loss(&mut tape, model, &[ex], Mode::Eval, &seeds, 0).unwrap();
    let grads = tape.backward(l).unwrap().params;
    let names: Vec<String> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let h = 1e-5;
    for name in names {
        let g = grads
            .get(&name)
            .unwrap_or_else(|| panic!("no gradient for {name}"))
            .clone();
        let n = g.len();
        for j in 0..n {
            let orig = model.store.value(&name).unwrap().data()[j];
            model.store.get_mut(&name).unwrap().value.data_mut()[j] = orig + h;
            let up = loss_of(model);
            model.store.get_mut(&name).unwrap().value.data_mut()[j] = orig - h;
            let down = loss_of(model);
            model.store.get_mut(&name).unwrap().value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = g.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(err < 1e-4, "{name}[{j}]: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    let mut m = TransducerModel::<f64>::new(tiny_config(), &SeedTree::new(3)).unwrap();
    model_gradcheck(&mut m, &example(5, &[0, 2, 1], 1));
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let mut m = TransducerModel::<f64>::new(tiny_config(), &SeedTree::new(3)).unwrap();
    for position in Position::ALL {
        m.inject_adapters(&AdapterSpec::new(position, 3), &SeedTree::new(4))
            .unwrap();
    }
    // Give the up-projections non-zero values so every adapter path is live.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (name, p) in m.store.iter_mut() {
        if name.ends_with(".w_up") {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    m.freeze_base();
    model_gradcheck(&mut m, &example(4, &[1, 0], 2));
}

#[test]
fn zero_initialized_adapters_are_the_identity() {
    let base = TransducerModel::<f64>::new(tiny_config(), &SeedTree::new(5)).unwrap();
    let ex = example(6, &[2, 0, 1], 3);
    let mut tape = Tape::new();
    let before = base
        .forward(&mut tape, &ex.features, &ex.tokens, &ForwardCtx::eval())
        .unwrap();
    let before = tape.value(before).clone();
    for position in Position::ALL {
        let mut m = base.clone();
        m.inject_adapters(&AdapterSpec::new(position, 4), &SeedTree::new(6))
            .unwrap();
        let mut tape = Tape::new();
        let after = m
            .forward(&mut tape, &ex.features, &ex.tokens, &ForwardCtx::eval())
            .unwrap();
        assert_eq!(tape.value(after).data(), before.data(), "{position}");
    }
}

#[test]
fn adapter_training_leaves_base_bit_identical() {
    let mut m = TransducerModel::<f64>::new(tiny_config(), &SeedTree::new(5)).unwrap();
    let base = m.store.clone();
    let mut spec = AdapterSpec::new(Position::Joint, 3);
    spec.dropout = 0.1;
    spec.stochastic_depth = 0.2;
    m.inject_adapters(&spec, &SeedTree::new(6)).unwrap();
    let data = AdaptationSet::from_new_domain(vec![example(5, &[1, 2], 1), example(4, &[0], 2)]);
    let cfg = TrainConfig::new(TrainMode::Adapter, 20, 1e-2, 2, 9);
    adapt(&mut m, &data, &cfg).unwrap();
    for (name, p) in base.iter() {
        let after = m.store.value(name).unwrap();
        let same = p
            .value
            .data()
            .iter()
            .zip(after.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{name} changed");
    }
    let moved = m
        .store
        .value("adapter.joint.w_up")
        .unwrap()
        .data()
        .iter()
        .any(|&v| v != 0.0);
    assert!(moved);
}

#[test]
fn adapter_mode_without_adapters_is_rejected() {
    let mut m = TransducerModel::<f64>::new(tiny_config(), &SeedTree::new(5)).unwrap();
    let data = AdaptationSet::from_new_domain(vec![example(5, &[1, 2], 1)]);
    let cfg = TrainConfig::new(TrainMode::Adapter, 2, 1e-2, 1, 9);
    assert!(adapt(&mut m, &data, &cfg).is_err());
}

#[test]
fn overfits_a_single_utterance() {
    let mut m = TransducerModel::<f64>::new(tiny_config(), &SeedTree::new(11)).unwrap();
    let ex = example(8, &[2, 0, 1, 0], 4);
    let cfg = TrainConfig::new(TrainMode::Finetune, 200, 1e-2, 1, 1);
    let log = fit(&mut m, std::slice::from_ref(&ex), &cfg).unwrap();
    let first = log.records[0].loss;
    let last = log.final_loss().unwrap();
    assert!(last < 0.05 * first, "loss {first} -> {last}");
    assert_eq!(greedy_decode(&m, &ex.features, 10).unwrap(), ex.tokens);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut m = TransducerModel::<f64>::new(tiny_config(), &SeedTree::new(11)).unwrap();
        let mut spec = AdapterSpec::new(Position::Encoder, 2);
        spec.dropout = 0.2;
        spec.stochastic_depth = 0.3;
        m.inject_adapters(&spec, &SeedTree::new(1)).unwrap();
        let data =
            AdaptationSet::from_new_domain(vec![example(5, &[1, 2], 1), example(6, &[0, 1], 2)]);
        adapt(
            &mut m,
            &data,
            &TrainConfig::new(TrainMode::Adapter, 10, 5e-3, 2, 4),
        )
        .unwrap();
        m.store
    };
    let (a, b) = (run(), run());
    for ((n, p), (_, q)) in a.iter().zip(b.iter()) {
        assert_eq!(p.value.data(), q.value.data(), "{n}");
    }
}

#[test]
fn single_precision_model_runs() {
    let m = TransducerModel::<f32>::new(tiny_config(), &SeedTree::new(1)).unwrap();
    let ex = example(5, &[1, 0], 3);
    let f32_feats = ex.features.cast::<f32>();
    let mut tape = Tape::new();
    let lp = m
        .forward(
            &mut tape,
            &f32_feats,
            &ex.tokens,
            &ForwardCtx::new(Mode::Eval, SeedTree::new(0), 0, 0),
        )
        .unwrap();
    let l = transducer_log_loss(&mut tape, lp, &ex.tokens, 3).unwrap();
    assert!(tape.value(l).item().is_finite());
    assert!(tape.backward(l).unwrap().params.len() > 10);
}
