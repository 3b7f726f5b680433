//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    /// Updates applied to this parameter so far.
    pub step: u64,
}

/// Moment accumulators keyed by parameter name. Parameters enter on their
/// first update, so frozen ones never get an entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState<T> {
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new() -> Self {
        Self {
            moments: BTreeMap::new(),
        }
    }
}

/// One update of every parameter in `params` that has a gradient:
///
/// ```text
/// θ ← θ − lr·wd·θ
/// m ← β1·m + (1 − β1)·g        v ← β2·v + (1 − β2)·g²
/// θ ← θ − lr · (m / (1 − β1^t)) / (√(v / (1 − β2^t)) + ε)
/// ```
///
/// Parameters without a gradient entry are left alone, moments included.
pub fn optimizer_step<'a, T: Real>(
    params: impl IntoIterator<Item = (String, &'a mut Tensor<T>)>,
    grads: &BTreeMap<String, Tensor<T>>,
    optim: &mut OptimState<T>,
    hp: &AdamW,
    lr: f64,
) {
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let (one, eps) = (T::one(), T::lit(hp.eps));
    let decay = T::lit(1.0 - lr * hp.weight_decay);
    let lr_t = T::lit(lr);
    for (name, theta) in params {
        let Some(g) = grads.get(&name) else { continue };
        assert_eq!(g.shape(), theta.shape(), "gradient shape of `{name}`");
        let entry = optim.moments.entry(name).or_insert_with(|| Moments {
            m: Tensor::zeros(theta.shape().to_vec()),
            v: Tensor::zeros(theta.shape().to_vec()),
            step: 0,
        });
        entry.step += 1;
        let t = entry.step as i32;
        let c1 = T::lit(1.0 - hp.beta1.powi(t));
        let c2 = T::lit(1.0 - hp.beta2.powi(t));
        let data = theta.data_mut();
        let m = entry.m.data_mut();
        let v = entry.v.data_mut();
        for (((p, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *p *= decay;
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            *p -= lr_t * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(theta: &mut Tensor<f64>, grad: Vec<f64>, optim: &mut OptimState<f64>, hp: &AdamW, lr: f64) {
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(theta.shape().to_vec(), grad).unwrap())]);
        optimizer_step([("w".to_string(), theta)], &grads, optim, hp, lr);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let hp = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let mut theta = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = theta.clone();
        let mut optim = OptimState::new();
        for _ in 0..3 {
            step(&mut theta, vec![0.0; 3], &mut optim, &hp, 1e-3);
        }
        assert_eq!(theta, before);
    }

    #[test]
    fn first_step_descends_by_lr() {
        let hp = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let mut theta = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut optim = OptimState::new();
        // f = θ²/2, so g = θ.
        step(&mut theta, vec![1.0], &mut optim, &hp, 0.1);
        let moved = theta.data()[0];
        assert!(moved < 1.0 && moved > 0.0);
        assert!((moved - 0.9).abs() < 1e-6);
    }

    /// The same update, written out in scalar form.
    fn reference_trajectory(theta0: f64, steps: usize, lr: f64, hp: &AdamW) -> Vec<f64> {
        let (mut theta, mut m, mut v) = (theta0, 0.0f64, 0.0f64);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = theta;
            theta -= lr * hp.weight_decay * theta;
            m = hp.beta1 * m + (1.0 - hp.beta1) * g;
            v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
            let m_hat = m / (1.0 - hp.beta1.powi(t as i32));
            let v_hat = v / (1.0 - hp.beta2.powi(t as i32));
            theta -= lr * m_hat / (v_hat.sqrt() + hp.eps);
            out.push(theta);
        }
        out
    }

    #[test]
    fn quadratic_trajectory_matches_reference() {
        let hp = AdamW::default();
        let expected = reference_trajectory(1.0, 200, 0.01, &hp);
        let mut theta = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut optim = OptimState::new();
        for want in expected {
            let g = theta.data()[0];
            step(&mut theta, vec![g], &mut optim, &hp, 0.01);
            assert!((theta.data()[0] - want).abs() < 1e-10);
        }
        assert_eq!(optim.moments["w"].step, 200);
    }

    #[test]
    fn params_without_gradient_are_skipped() {
        let mut a = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut b = Tensor::new(vec![1], vec![1.0]).unwrap();
        let grads = BTreeMap::from([("a".to_string(), Tensor::new(vec![1], vec![1.0]).unwrap())]);
        let mut optim = OptimState::new();
        optimizer_step(
            [("a".to_string(), &mut a), ("b".to_string(), &mut b)],
            &grads,
            &mut optim,
            &AdamW::default(),
            0.1,
        );
        assert_ne!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 1.0);
        assert!(!optim.moments.contains_key("b"));
    }
}
