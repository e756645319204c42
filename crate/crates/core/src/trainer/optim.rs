//! Adam and global gradient-norm clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// L2 norm over every gradient element, accumulated in f64.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let factor = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(factor);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    /// One bias-corrected update of every parameter.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let step_size = T::lit(self.lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.eps);
        for (i, param) in store.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            if g.len() != param.len() {
                return Err(Error::invalid(format!("gradient {i} has the wrong size")));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in param.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + ob1 * g[j];
                v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                *w -= step_size * m[j] / ((v[j] * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn norm_fifty_clips_to_five() {
        // 3-4-5 triangle scaled by ten.
        let mut grads = vec![
            Tensor::<f64>::new(&[1], vec![30.0]).unwrap(),
            Tensor::new(&[1], vec![40.0]).unwrap(),
        ];
        let before = clip_global_norm(&mut grads, 5.0);
        assert_eq!(before, 50.0);
        assert_eq!(grads[0].data(), &[3.0]);
        assert_eq!(grads[1].data(), &[4.0]);
        assert_eq!(global_norm(&grads), 5.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = Adam::new(&store, 0.1);
        let g = vec![Tensor::new(&[2], vec![3.0, -0.5]).unwrap()];
        opt.update(&mut store, &g).unwrap();
        let w = store.tensors()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(&[3], vec![2.0, -3.0, 0.5]).unwrap());
        let mut opt = Adam::new(&store, 0.05);
        for _ in 0..500 {
            let g = vec![store.tensors()[0].map(|w| 2.0 * w)];
            opt.update(&mut store, &g).unwrap();
        }
        assert!(store.tensors()[0].data().iter().all(|w| w.abs() < 1e-2));
    }

    proptest! {
        #[test]
        fn clipping_never_increases_norm(
            values in proptest::collection::vec(-100.0f64..100.0, 1..40),
            max_norm in 0.01f64..50.0,
        ) {
            let split = values.len() / 2;
            let mut grads = vec![
                Tensor::new(&[split], values[..split].to_vec()).unwrap(),
                Tensor::new(&[values.len() - split], values[split..].to_vec()).unwrap(),
            ];
            let original = grads.clone();
            let before = clip_global_norm(&mut grads, max_norm);
            let after = global_norm(&grads);
            prop_assert!(after <= before + 1e-12);
            if before <= max_norm {
                prop_assert_eq!(grads, original);
            } else {
                prop_assert!((after - max_norm).abs() <= 1e-9 * max_norm);
            }
        }
    }
}
