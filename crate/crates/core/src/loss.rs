//! Transducer negative log-likelihood over the alignment lattice.

use crate::error::{Error, Result};
use crate::scalar::{log_add_exp, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest `T + U` the exhaustive oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 12;

/// Geometry of a `[T x (U+1) x (V+1)]` log-probability lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dims {
    frames: usize,
    states: usize,
    symbols: usize,
}

impl Dims {
    fn of(shape: &[usize], target: &[usize], blank: usize) -> Result<Self> {
        if shape.len() != 3 {
            return Err(Error::shape(
                "transducer loss",
                format!("expected [T, U+1, V+1], got {shape:?}"),
            ));
        }
        let dims = Dims {
            frames: shape[0],
            states: shape[1],
            symbols: shape[2],
        };
        if dims.states != target.len() + 1 {
            return Err(Error::shape(
                "transducer loss",
                format!(
                    "lattice has {} label states for {} targets",
                    dims.states,
                    target.len()
                ),
            ));
        }
        if blank >= dims.symbols {
            return Err(Error::Input(format!("blank id {blank} out of range")));
        }
        if let Some(&bad) = target.iter().find(|&&y| y >= dims.symbols || y == blank) {
            return Err(Error::Input(format!("target id {bad} is not a label")));
        }
        Ok(dims)
    }

    fn index(&self, t: usize, u: usize, k: usize) -> usize {
        (t * self.states + u) * self.symbols + k
    }
}

/// `-log P(target | features)` by the forward recursion in log space:
///
/// ```text
/// alpha(0, 0) = 0
/// alpha(t, u) = logsumexp(alpha(t-1, u) + blank(t-1, u),
///                         alpha(t, u-1) + label(t, u-1, y_u))
/// loss        = -(alpha(T-1, U) + blank(T-1, U))
/// ```
///
/// Every step is recorded on the tape, so gradients reach `log_probs`.
pub fn transducer_log_loss<S: Scalar>(
    tape: &mut Tape<S>,
    log_probs: Var,
    target: &[usize],
    blank: usize,
) -> Result<Var> {
    let d = Dims::of(tape.shape(log_probs), target, blank)?;
    let mut alpha: Vec<Option<Var>> = vec![None; d.frames * d.states];
    let at = |t: usize, u: usize| t * d.states + u;
    for t in 0..d.frames {
        for u in 0..d.states {
            let from_blank = if t > 0 {
                let prev = alpha[at(t - 1, u)].expect("computed");
                let lp = tape.pick(log_probs, d.index(t - 1, u, blank))?;
                Some(tape.add(prev, lp)?)
            } else {
                None
            };
            let from_label = if u > 0 {
                let prev = alpha[at(t, u - 1)].expect("computed");
                let lp = tape.pick(log_probs, d.index(t, u - 1, target[u - 1]))?;
                Some(tape.add(prev, lp)?)
            } else {
                None
            };
            alpha[at(t, u)] = Some(match (from_blank, from_label) {
                (Some(a), Some(b)) => tape.log_add_exp(a, b)?,
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => tape.constant(Tensor::scalar(S::zero()))?,
            });
        }
    }
    let last = alpha[at(d.frames - 1, d.states - 1)].expect("computed");
    let exit = tape.pick(log_probs, d.index(d.frames - 1, d.states - 1, blank))?;
    let total = tape.add(last, exit)?;
    tape.scale(total, -S::one())
}

/// Exhaustive oracle for small lattices: sums the score of every monotonic
/// path that emits all labels and ends with a blank on the last frame.
pub fn brute_force_log_loss(
    log_probs: &Tensor<f64>,
    target: &[usize],
    blank: usize,
) -> Result<f64> {
    let d = Dims::of(log_probs.shape(), target, blank)?;
    let (t_len, u_len) = (d.frames, target.len());
    if t_len + u_len > BRUTE_FORCE_LIMIT {
        return Err(Error::Contract(format!(
            "brute force refuses T + U = {} > {BRUTE_FORCE_LIMIT}",
            t_len + u_len
        )));
    }
    let lp = log_probs.data();
    // Paths are the placements of U labels among the first T+U-1 moves; the
    // final move is always the closing blank.
    let moves = t_len + u_len - 1;
    let mut total = f64::NEG_INFINITY;
    for mask in 0u32..(1 << moves) {
        if mask.count_ones() as usize != u_len {
            continue;
        }
        let (mut t, mut u, mut score) = (0usize, 0usize, 0.0f64);
        for m in 0..moves {
            if mask & (1 << m) != 0 {
                score += lp[d.index(t, u, target[u])];
                u += 1;
            } else {
                score += lp[d.index(t, u, blank)];
                t += 1;
            }
        }
        debug_assert_eq!((t, u), (t_len - 1, u_len));
        score += lp[d.index(t, u, blank)];
        total = log_add_exp(total, score);
    }
    Ok(-total)
}

/// Loss of a lattice whose every distribution is uniform over `V+1` symbols:
/// `-[log C(T-1+U, U) + (T+U) log(1/(V+1))]`.
pub fn uniform_lattice_loss(frames: usize, labels: usize, vocab: usize) -> f64 {
    let n = frames - 1 + labels;
    let log_paths: f64 = (1..=labels)
        .map(|i| ((n - labels + i) as f64 / i as f64).ln())
        .sum();
    -(log_paths + (frames + labels) as f64 * (1.0 / (vocab as f64 + 1.0)).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(t: usize, u: usize, v: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let k = v + 1;
        let mut data = Vec::with_capacity(t * (u + 1) * k);
        for cell in 0..t * (u + 1) {
            let logits: Vec<f64> = (0..k).map(|j| f(cell * k + j)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            data.extend(logits.iter().map(|x| x - lse));
        }
        Tensor::new(vec![t, u + 1, k], data).unwrap()
    }

    fn dp(lp: &Tensor<f64>, target: &[usize], blank: usize) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(lp.clone()).unwrap();
        let l = transducer_log_loss(&mut tape, x, target, blank).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn single_frame_no_label_is_blank_only() {
        let lp = lattice(1, 0, 2, |i| i as f64 * 0.3);
        let expect = -lp.at(&[0, 0, 2]);
        assert!((dp(&lp, &[], 2) - expect).abs() < 1e-14);
        assert!((brute_force_log_loss(&lp, &[], 2).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn two_frames_one_label_has_two_paths() {
        let lp = lattice(2, 1, 2, |i| (i as f64 * 1.3).sin());
        let b = 2;
        // y at t0 then blanks at (0,1), (1,1); or blank at (0,0), y at t1, blank at (1,1).
        let p1 = lp.at(&[0, 0, 1]) + lp.at(&[0, 1, b]) + lp.at(&[1, 1, b]);
        let p2 = lp.at(&[0, 0, b]) + lp.at(&[1, 0, 1]) + lp.at(&[1, 1, b]);
        let expect = -log_add_exp(p1, p2);
        assert!((dp(&lp, &[1], b) - expect).abs() < 1e-12);
    }

    #[test]
    fn uniform_three_by_two_matches_closed_form() {
        let lp = lattice(3, 2, 2, |_| 0.0);
        let closed = uniform_lattice_loss(3, 2, 2);
        // C(4, 2) = 6 paths of 5 moves at probability 1/3 each.
        assert!((closed - -(6.0f64.ln() + 5.0 * (1.0f64 / 3.0).ln())).abs() < 1e-12);
        assert!((brute_force_log_loss(&lp, &[0, 1], 2).unwrap() - closed).abs() < 1e-12);
        assert!((dp(&lp, &[0, 1], 2) - closed).abs() < 1e-12);
    }

    #[test]
    fn brute_force_guard() {
        let lp = lattice(10, 3, 1, |_| 0.0);
        assert!(matches!(
            brute_force_log_loss(&lp, &[0, 0, 0], 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn blank_in_target_is_rejected() {
        let lp = lattice(2, 1, 2, |_| 0.0);
        let mut tape = Tape::new();
        let x = tape.constant(lp).unwrap();
        assert!(matches!(
            transducer_log_loss(&mut tape, x, &[2], 2),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn raising_the_only_path_lowers_the_loss() {
        // T = 1: the only path for target [y] is label then blank.
        for boost in [0.5, 1.0, 3.0] {
            let base = lattice(1, 1, 3, |i| (i as f64).cos());
            let boosted = lattice(1, 1, 3, |i| {
                (i as f64).cos() + if i == 1 { boost } else { 0.0 }
            });
            assert!(dp(&boosted, &[1], 3) <= dp(&base, &[1], 3));
        }
    }
}
