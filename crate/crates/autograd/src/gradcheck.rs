//! Central finite-difference gradient checking.

use crate::{Real, Tensor};

/// Numeric gradient of `f` w.r.t. every entry of every input, by central
/// differences with step `h`.
pub fn numeric_grads<T: Real>(
    f: &mut dyn FnMut(&[Tensor<T>]) -> T,
    inputs: &[Tensor<T>],
    h: T,
) -> Vec<Tensor<T>> {
    let mut grads = Vec::with_capacity(inputs.len());
    let two_h = h + h;
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let fp = f(&plus);
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fm = f(&minus);
            g.data_mut()[j] = (fp - fm) / two_h;
        }
        grads.push(g);
    }
    grads
}

/// Worst relative error between analytic and numeric gradients, considering
/// only entries where `|analytic| > floor`.
pub fn max_rel_error<T: Real>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: T) -> T {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = T::zero();
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        if a.abs() <= floor {
            continue;
        }
        let denom = a.abs().max(n.abs());
        let rel = (a - n).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{mean_all, mul, sigmoid, sub, tanh};
    use crate::Tape;

    #[test]
    fn numeric_matches_analytic_on_composite() {
        let x0 = Tensor::new(&[3], vec![0.3f64, -0.7, 1.2]);
        let y0 = Tensor::new(&[3], vec![0.9f64, 0.1, -0.4]);

        let mut f = |inp: &[Tensor<f64>]| {
            let tape: Tape<f64> = Tape::new();
            let x = tape.leaf(inp[0].clone());
            let y = tape.leaf(inp[1].clone());
            let out = mean_all(mul(tanh(x), sigmoid(sub(x, y))));
            let v = out.value_clone().data()[0];
            v
        };
        let numeric = numeric_grads(&mut f, &[x0.clone(), y0.clone()], 1e-6);

        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(x0);
        let y = tape.leaf(y0);
        let out = mean_all(mul(tanh(x), sigmoid(sub(x, y))));
        tape.backward(out);
        let gx = tape.grad(x).unwrap();
        let gy = tape.grad(y).unwrap();

        assert!(max_rel_error(&gx, &numeric[0], 1e-10) < 1e-7);
        assert!(max_rel_error(&gy, &numeric[1], 1e-10) < 1e-7);
    }
}
