//! Adam optimizer over a fixed-order list of parameter tensors.

use crate::{real, Real, Tensor};

#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: T, shapes: &[Vec<usize>]) -> Self {
        Self {
            lr,
            beta1: real(0.9),
            beta2: real(0.999),
            eps: real(1e-8),
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i] == None` leaves parameter `i` untouched (its
    /// moment estimates are not advanced either, matching a frozen tensor).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<Tensor<T>>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let t = real::<T>(self.t as f64);
        let bc1 = T::one() - self.beta1.powf(t);
        let bc2 = T::one() - self.beta2.powf(t);
        for i in 0..params.len() {
            let Some(g) = &grads[i] else { continue };
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            assert_eq!(p.len(), g.numel(), "param/grad shape mismatch at {i}");
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn state(&self) -> (u64, &[Tensor<T>], &[Tensor<T>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_quadratic() {
        // minimize (x - 3)^2
        let mut p = Tensor::new(&[1], vec![0.0f64]);
        let mut adam = Adam::new(0.1, &[vec![1]]);
        for _ in 0..500 {
            let g = Tensor::new(&[1], vec![2.0 * (p.data()[0] - 3.0)]);
            adam.step(&mut [&mut p], &[Some(g)]);
        }
        assert!((p.data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn frozen_param_keeps_value() {
        let mut p = Tensor::new(&[2], vec![1.0f64, 2.0]);
        let mut adam = Adam::new(0.1, &[vec![2]]);
        adam.step(&mut [&mut p], &[None]);
        assert_eq!(p.data(), &[1.0, 2.0]);
    }
}
