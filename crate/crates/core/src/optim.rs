//! AdamW over a [`ParamStore`].

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    /// Moments start at zero, shaped like `params`.
    pub fn new(params: &ParamStore<T>, lr: f64, betas: (f64, f64), weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && (0.0..1.0).contains(&betas.0) && (0.0..1.0).contains(&betas.1) && weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "invalid AdamW settings lr={lr} betas={betas:?} weight_decay={weight_decay}"
            )));
        }
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(AdamW {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with bias-corrected moments and decoupled weight decay.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (r1, r2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let c1 = T::of(1.0 / (1.0 - self.beta1.powf(self.step as f64)));
        let c2 = T::of(1.0 / (1.0 - self.beta2.powf(self.step as f64)));
        let lr = T::of(self.lr);
        let decay = T::of(1.0 - self.lr * self.weight_decay);
        let eps = T::of(self.eps);
        // a zero rate leaves weights untouched, signed zeros included
        let apply = self.lr != 0.0;
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + r1 * g;
                *v = b2 * *v + r2 * g * g;
                if apply {
                    let update = (*m * c1) / ((*v * c2).sqrt() + eps);
                    *w = *w * decay - lr * update;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[v.len()], v.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        let mut p = store(&[1.5, -0.0, 3e-7]);
        let before = p.clone();
        let mut opt = AdamW::new(&p, 0.0, (0.9, 0.999), 0.0).unwrap();
        let g = [Tensor::new(&[3], vec![0.3, -2.0, 1e3]).unwrap()];
        opt.step(&mut p, &g).unwrap();
        for (a, b) in p.tensors()[0].data().iter().zip(before.tensors()[0].data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store(&[1.0, 1.0]);
        let mut opt = AdamW::new(&p, 0.01, (0.9, 0.999), 0.0).unwrap();
        opt.step(&mut p, &[Tensor::new(&[2], vec![4.0, -0.5]).unwrap()])
            .unwrap();
        let w = p.tensors()[0].data();
        assert!((w[0] - 0.99).abs() < 1e-8 && (w[1] - 1.01).abs() < 1e-8);
    }

    #[test]
    fn matches_reference_recurrence() {
        let mut p = store(&[0.7]);
        let mut opt = AdamW::new(&p, 0.1, (0.8, 0.9), 0.05).unwrap();
        let (mut w, mut m, mut v) = (0.7f64, 0.0, 0.0);
        for (k, g) in [0.3, -1.2, 0.5, 2.0].into_iter().enumerate() {
            opt.step(&mut p, &[Tensor::new(&[1], vec![g]).unwrap()]).unwrap();
            m = 0.8 * m + 0.2 * g;
            v = 0.9 * v + 0.1 * g * g;
            let t = (k + 1) as i32;
            let mh = m / (1.0 - 0.8f64.powi(t));
            let vh = v / (1.0 - 0.9f64.powi(t));
            w = w * (1.0 - 0.1 * 0.05) - 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p.tensors()[0].data()[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = store(&[3.0, -2.0]);
        let mut opt = AdamW::new(&p, 0.05, (0.9, 0.999), 0.0).unwrap();
        for _ in 0..2000 {
            let g = p.tensors()[0].map(|x| 2.0 * x);
            opt.step(&mut p, &[g]).unwrap();
        }
        assert!(p.tensors()[0].max_abs() < 1e-2);
    }

    #[test]
    fn rejects_bad_settings() {
        let p = store(&[1.0]);
        assert!(AdamW::new(&p, -1.0, (0.9, 0.999), 0.0).is_err());
        assert!(AdamW::new(&p, 1e-3, (1.0, 0.999), 0.0).is_err());
    }
}
