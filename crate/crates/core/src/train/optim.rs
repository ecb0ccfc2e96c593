use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BETAS: (f64, f64) = (0.9, 0.98);
pub const DEFAULT_EPS: f64 = 1e-9;

/// Adam with decoupled weight decay.
///
/// Moment buffers are created lazily for trainable parameters only.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: IndexMap<String, Vec<S>>,
    second: IndexMap<String, Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            betas: DEFAULT_BETAS,
            eps: DEFAULT_EPS,
            weight_decay,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moment_names(&self) -> impl Iterator<Item = &str> {
        self.first.keys().map(String::as_str)
    }

    /// Applies one update at learning rate `lr`.
    ///
    /// Every trainable parameter must have a gradient; frozen parameters are
    /// never touched. A non-finite gradient aborts the step before any
    /// parameter changes.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &IndexMap<String, Tensor<S>>,
        lr: f64,
    ) -> Result<()> {
        for (name, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            let g = grads.get(name).ok_or_else(|| {
                Error::Contract(format!("no gradient for trainable parameter {name}"))
            })?;
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!("gradient for {name} has wrong shape"),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }

        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1s, b2s) = (S::lit(b1), S::lit(b2));
        let (one_b1, one_b2) = (S::lit(1.0 - b1), S::lit(1.0 - b2));
        let step_size = S::lit(lr / bc1);
        let bc2_sqrt = S::lit(bc2.sqrt());
        let eps = S::lit(self.eps);
        let decay = S::lit(1.0 - lr * self.weight_decay);

        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let g = grads[name].data();
            let n = g.len();
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| vec![S::zero(); n]);
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| vec![S::zero(); n]);
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1s * *mi + one_b1 * gi;
                *vi = b2s * *vi + one_b2 * gi * gi;
                *w *= decay;
                *w -= step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut IndexMap<String, Tensor<S>>, max_norm: f64) -> f64 {
    let total: f64 = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let k = S::lit(max_norm / total);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64, trainable: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v), trainable).unwrap();
        s
    }

    fn grad(v: f64) -> IndexMap<String, Tensor<f64>> {
        let mut g = IndexMap::new();
        g.insert("w".to_string(), Tensor::scalar(v));
        g
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = one_param(0.7, true);
        let mut opt = AdamW::new(0.0);
        for _ in 0..3 {
            opt.step(&mut s, &grad(0.0), 0.1).unwrap();
        }
        assert_eq!(s.value("w").unwrap().item(), 0.7);
    }

    #[test]
    fn two_steps_match_hand_arithmetic() {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.98, 1e-9);
        let mut s = one_param(1.0, true);
        let mut opt = AdamW::new(0.0);
        opt.step(&mut s, &grad(0.5), lr).unwrap();
        opt.step(&mut s, &grad(-0.2), lr).unwrap();

        let mut w = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [(1, 0.5f64), (2, -0.2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((s.value("w").unwrap().item() - w).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_shrinks_multiplicatively() {
        let (lr, wd) = (0.1, 0.5);
        let mut s = one_param(2.0, true);
        let mut opt = AdamW::new(wd);
        for _ in 0..3 {
            opt.step(&mut s, &grad(0.0), lr).unwrap();
        }
        let expect = 2.0 * (1.0f64 - lr * wd).powi(3);
        assert!((s.value("w").unwrap().item() - expect).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_are_untouched_and_unbuffered() {
        let mut s = one_param(3.0, false);
        let mut opt = AdamW::new(0.1);
        opt.step(&mut s, &IndexMap::new(), 1.0).unwrap();
        assert_eq!(s.value("w").unwrap().item().to_bits(), 3.0f64.to_bits());
        assert_eq!(opt.moment_names().count(), 0);
    }

    #[test]
    fn nan_gradient_aborts_before_update() {
        let mut s = one_param(1.0, true);
        let mut opt = AdamW::new(0.0);
        let mut g = grad(0.0);
        g["w"].data_mut()[0] = f64::NAN;
        assert!(matches!(
            opt.step(&mut s, &g, 0.1),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(s.value("w").unwrap().item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = IndexMap::new();
        g.insert(
            "a".to_string(),
            Tensor::new(vec![2], vec![3.0, 0.0]).unwrap(),
        );
        g.insert("b".to_string(), Tensor::scalar(4.0f64));
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
        assert!((g["b"].item() - 0.8).abs() < 1e-15);
    }
}
