//! Adam optimizer with bias correction.

use super::{Grads, Params};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64) -> Self {
        let m = (0..params.n_tensors())
            .map(|i| vec![0.0; params.get(super::ParamId(i)).len()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ti in 0..grads.tensors.len() {
            let g = &grads.tensors[ti];
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            let p = &mut params.get_mut(super::ParamId(ti)).data;
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Tensor, Grads};

    #[test]
    fn descends_a_quadratic() {
        let mut params = Params::new();
        params.add("x", Tensor { rows: 1, cols: 1, data: vec![5.0] });
        let mut adam = Adam::new(&params, 0.1);
        for _ in 0..500 {
            let x = params.get(super::super::ParamId(0)).data[0];
            let grads = Grads { tensors: vec![vec![2.0 * x]] };
            adam.step(&mut params, &grads);
        }
        let x = params.get(super::super::ParamId(0)).data[0];
        assert!(x.abs() < 1e-3, "did not converge: {x}");
    }
}
