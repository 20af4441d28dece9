//! Adadelta: per-parameter step sizes from decaying averages of squared
//! gradients and squared updates; no global learning rate.

use crate::error::{Error, Result};
use crate::params::ParameterStore;

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    sq_grad: Vec<Vec<f64>>,
    sq_delta: Vec<Vec<f64>>,
}

impl Default for Adadelta {
    fn default() -> Self {
        Self::new(DEFAULT_RHO, DEFAULT_EPS).expect("default constants are valid")
    }
}

impl Adadelta {
    pub fn new(rho: f64, eps: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) || eps <= 0.0 {
            return Err(Error::contract(format!(
                "adadelta needs 0<rho<1, eps>0 (got {rho}, {eps})"
            )));
        }
        Ok(Self {
            rho,
            eps,
            sq_grad: Vec::new(),
            sq_delta: Vec::new(),
        })
    }

    /// Accumulated `E[g²]` for parameter `i`, if it has been stepped.
    pub fn sq_grad(&self, i: usize) -> Option<&[f64]> {
        self.sq_grad.get(i).map(Vec::as_slice)
    }

    pub fn sq_delta(&self, i: usize) -> Option<&[f64]> {
        self.sq_delta.get(i).map(Vec::as_slice)
    }

    /// Applies one update from the stored gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::contract(format!(
                "parameter {} has no gradient",
                p.name
            )));
        }
        while self.sq_grad.len() < store.len() {
            let n = store
                .get(crate::params::ParamId(self.sq_grad.len()))
                .value
                .len();
            self.sq_grad.push(vec![0.0; n]);
            self.sq_delta.push(vec![0.0; n]);
        }
        let (rho, eps) = (self.rho, self.eps);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let grad = p.grad.as_mut().expect("checked above");
            let eg = &mut self.sq_grad[i];
            let ed = &mut self.sq_delta[i];
            for (((x, g), eg), ed) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut())
                .zip(eg)
                .zip(ed)
            {
                *eg = rho * *eg + (1.0 - rho) * *g * *g;
                let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * *g;
                *ed = rho * *ed + (1.0 - rho) * delta * delta;
                *x += delta;
                *g = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> (ParameterStore, crate::params::ParamId) {
        let mut s = ParameterStore::new();
        let id = s.add("p", Group::Theta, Tensor::vector(vec![v])).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameter_and_decays_accumulators() {
        let (mut s, id) = scalar_store(0.5);
        let mut opt = Adadelta::default();
        s.accumulate_grad(id, &Tensor::vector(vec![1.0]));
        opt.step(&mut s).unwrap();
        let before = s.value(id).data()[0];
        let (eg, ed) = (opt.sq_grad(0).unwrap()[0], opt.sq_delta(0).unwrap()[0]);
        s.zero_grads();
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id).data()[0], before);
        assert!((opt.sq_grad(0).unwrap()[0] - 0.95 * eg).abs() < 1e-18);
        assert!((opt.sq_delta(0).unwrap()[0] - 0.95 * ed).abs() < 1e-18);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let (mut s, id) = scalar_store(0.0);
        let mut opt = Adadelta::new(0.95, 1e-6).unwrap();
        s.accumulate_grad(id, &Tensor::vector(vec![1.0]));
        opt.step(&mut s).unwrap();
        let expected = -(1e-6f64 / (0.05 + 1e-6)).sqrt();
        assert!((s.value(id).data()[0] - expected).abs() < 1e-15);
        assert!((expected + 4.47e-3).abs() < 1e-5);
        assert_eq!(s.get(id).grad.as_ref().unwrap().data(), &[0.0]);
    }

    #[test]
    fn identical_steps_grow() {
        let (mut s, id) = scalar_store(0.0);
        let mut opt = Adadelta::default();
        let mut prev = 0.0;
        let mut deltas = vec![];
        for _ in 0..2 {
            s.accumulate_grad(id, &Tensor::vector(vec![1.0]));
            opt.step(&mut s).unwrap();
            let now = s.value(id).data()[0];
            deltas.push((now - prev).abs());
            prev = now;
        }
        // hand trace: E[g²] = 0.05 then 0.0975; E[Δ²] after one step = 0.05·Δ1²
        let d1 = (1e-6f64 / 0.050001).sqrt();
        let d2 = ((0.05 * d1 * d1 + 1e-6) / (0.0975 + 1e-6f64)).sqrt();
        assert!((deltas[0] - d1).abs() < 1e-15);
        assert!((deltas[1] - d2).abs() < 1e-15);
        assert!(deltas[1] > deltas[0]);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let (mut s, _) = scalar_store(0.0);
        let err = Adadelta::default().step(&mut s).unwrap_err().to_string();
        assert!(err.contains("parameter p"), "{err}");
    }

    #[test]
    fn rejects_bad_constants() {
        assert!(Adadelta::new(1.0, 1e-6).is_err());
        assert!(Adadelta::new(0.9, 0.0).is_err());
    }
}
