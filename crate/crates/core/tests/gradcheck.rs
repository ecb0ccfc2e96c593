//! Tape gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xferlab_core::loss::transducer_log_loss;
use xferlab_core::{Tape, Tensor, Var};

const H: f64 = 1e-5;
const REL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Contracts the op output with fixed random weights so every output element
/// contributes to the checked scalar.
fn reduce(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    if tape.value(y).len() == 1 {
        return y;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(w).unwrap();
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

fn check<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| tape.input(x.clone(), false).unwrap())
            .collect();
        let y = f(&mut tape, &vars);
        let l = reduce(&mut tape, y, 99);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.input(x.clone(), true).unwrap())
        .collect();
    let y = f(&mut tape, &vars);
    let l = reduce(&mut tape, y, 99);
    let grads = tape.backward(l).unwrap();

    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .unwrap_or_else(|| panic!("{name}: no grad for input {i}"));
        for j in 0..x.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                err < REL,
                "{name}: input {i}[{j}] analytic {a} numeric {numeric}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn matmul_and_transpose() {
    let mut r = rng();
    check(
        "matmul",
        vec![random(&[3, 4], &mut r), random(&[4, 2], &mut r)],
        |t, v| t.matmul(v[0], v[1]).unwrap(),
    );
    check("transpose", vec![random(&[3, 4], &mut r)], |t, v| {
        t.transpose(v[0]).unwrap()
    });
}

#[test]
fn elementwise_binary() {
    let mut r = rng();
    let ins = vec![random(&[2, 3], &mut r), random(&[2, 3], &mut r)];
    check("add", ins.clone(), |t, v| t.add(v[0], v[1]).unwrap());
    check("sub", ins.clone(), |t, v| t.sub(v[0], v[1]).unwrap());
    check("mul", ins, |t, v| t.mul(v[0], v[1]).unwrap());
}

#[test]
fn broadcasts() {
    let mut r = rng();
    check(
        "add_row",
        vec![random(&[3, 4], &mut r), random(&[4], &mut r)],
        |t, v| t.add_row(v[0], v[1]).unwrap(),
    );
    check(
        "pair_add",
        vec![random(&[3, 4], &mut r), random(&[2, 4], &mut r)],
        |t, v| t.pair_add(v[0], v[1]).unwrap(),
    );
}

#[test]
fn activations() {
    let mut r = rng();
    let x = random(&[3, 5], &mut r);
    check("scale", vec![x.clone()], |t, v| {
        t.scale(v[0], -1.7).unwrap()
    });
    check("sigmoid", vec![x.clone()], |t, v| t.sigmoid(v[0]).unwrap());
    check("tanh", vec![x.clone()], |t, v| t.tanh(v[0]).unwrap());
    check("swish", vec![x], |t, v| t.swish(v[0]).unwrap());
}

#[test]
fn normalizers() {
    let mut r = rng();
    let x = random(&[3, 6], &mut r);
    check(
        "layer_norm",
        vec![x.clone(), random(&[6], &mut r), random(&[6], &mut r)],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
    );
    check("softmax", vec![x.clone()], |t, v| t.softmax(v[0]).unwrap());
    check("log_softmax", vec![x], |t, v| t.log_softmax(v[0]).unwrap());
}

#[test]
fn structural_ops() {
    let mut r = rng();
    check("embedding", vec![random(&[5, 3], &mut r)], |t, v| {
        t.embedding(v[0], &[4, 0, 4, 2]).unwrap()
    });
    check(
        "concat_cols",
        vec![random(&[2, 3], &mut r), random(&[2, 2], &mut r)],
        |t, v| t.concat_cols(&[v[0], v[1]]).unwrap(),
    );
    check(
        "concat_rows",
        vec![random(&[2, 3], &mut r), random(&[1, 3], &mut r)],
        |t, v| t.concat_rows(&[v[0], v[1]]).unwrap(),
    );
    check("slice_cols", vec![random(&[3, 5], &mut r)], |t, v| {
        t.slice_cols(v[0], 1, 3).unwrap()
    });
    check("slice_rows", vec![random(&[4, 2], &mut r)], |t, v| {
        t.slice_rows(v[0], 1, 2).unwrap()
    });
    check("reshape", vec![random(&[2, 6], &mut r)], |t, v| {
        t.reshape(v[0], vec![3, 4]).unwrap()
    });
}

#[test]
fn scalar_ops() {
    let mut r = rng();
    check("pick", vec![random(&[2, 3], &mut r)], |t, v| {
        t.pick(v[0], 4).unwrap()
    });
    check(
        "log_add_exp",
        vec![random(&[1], &mut r), random(&[1], &mut r)],
        |t, v| t.log_add_exp(v[0], v[1]).unwrap(),
    );
    check("sum", vec![random(&[3, 3], &mut r)], |t, v| {
        t.sum(v[0]).unwrap()
    });
    check(
        "add_scalars",
        vec![random(&[1], &mut r), random(&[1], &mut r)],
        |t, v| {
            let a = t.scale(v[0], 2.0).unwrap();
            t.add_scalars(&[a, v[1], v[0]]).unwrap()
        },
    );
}

#[test]
fn dropout_is_a_fixed_mask_under_a_seed() {
    let mut r = rng();
    check("dropout", vec![random(&[4, 4], &mut r)], |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        t.dropout(v[0], 0.3, true, &mut rng).unwrap()
    });
}

#[test]
fn transducer_loss_through_log_softmax() {
    let mut r = rng();
    check("transducer", vec![random(&[4, 3, 4], &mut r)], |t, v| {
        let flat = t.reshape(v[0], vec![12, 4]).unwrap();
        let lp = t.log_softmax(flat).unwrap();
        let lp = t.reshape(lp, vec![4, 3, 4]).unwrap();
        transducer_log_loss(t, lp, &[1, 0], 3).unwrap()
    });
}

#[test]
fn dropout_keeps_expected_fraction_and_scale() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[200, 100], 1.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y = tape.dropout(x, 0.25, true, &mut rng).unwrap();
    let vals = tape.value(y).data();
    let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / vals.len() as f64;
    assert!((kept - 0.75).abs() < 0.01, "kept fraction {kept}");
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    assert!(vals
        .iter()
        .all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    let same = tape.dropout(x, 0.25, false, &mut rng).unwrap();
    assert_eq!(same, x);
}

#[test]
fn non_scalar_backward_is_rejected() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.input(Tensor::zeros(&[2]), true).unwrap();
    assert!(tape.backward(x).is_err());
}
