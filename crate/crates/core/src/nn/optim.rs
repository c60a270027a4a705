use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::session::Gradients;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    t: u64,
    moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::InvalidArgument("adam betas must lie in [0, 1)".into()));
        }
        Ok(Adam {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// First and second moment of one parameter, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<(&[T], &[T])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn set_state(&mut self, t: u64, moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>) {
        self.t = t;
        self.moments = moments;
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (lr, eps) = (T::from_f64_lossy(c.lr), T::from_f64_lossy(c.eps));
        let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        let one = T::one();
        for (id, g) in grads.iter() {
            let param: &mut Tensor<T> = store.get_mut(*id);
            if param.shape() != g.shape() {
                return Err(Error::shape("adam", param.shape(), g.shape()));
            }
            let n = g.len();
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            if m.len() != n {
                return Err(Error::shape("adam state", &[m.len()], g.shape()));
            }
            for (((p, gi), mi), vi) in param.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * *gi;
                *vi = b2 * *vi + (one - b2) * *gi * *gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamKind;
    use crate::nn::session::{Mode, Session};

    fn one_param(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_f64(&[1], &[value]).unwrap(), ParamKind::Trainable).unwrap();
        (store, id)
    }

    /// Gradients of `sum(w * g)` with respect to `w`, i.e. exactly `g`.
    fn grads_of(store: &ParamStore<f64>, id: ParamId, g: f64) -> Gradients<f64> {
        let mut s = Session::new(store, Mode::Train, 0);
        let w = s.param(id);
        let c = s.input(Tensor::from_f64(&[1], &[g]).unwrap());
        let p = s.graph.mul(w, c).unwrap();
        let l = s.graph.sum(p).unwrap();
        s.backward(l).unwrap()
    }

    #[test]
    fn rejects_non_positive_lr() {
        let cfg = AdamConfig { lr: 0.0, ..Default::default() };
        assert!(Adam::<f32>::new(cfg).is_err());
        let cfg = AdamConfig { lr: -1.0, ..Default::default() };
        assert!(Adam::<f32>::new(cfg).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, id) = one_param(0.75);
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let g = grads_of(&store, id, 0.0);
        adam.step(&mut store, &g).unwrap();
        assert_eq!(store.get(id).data(), &[0.75]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = one_param(0.0);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut adam = Adam::new(cfg).unwrap();
        let g = grads_of(&store, id, 1.0);
        adam.step(&mut store, &g).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = -0.1 / (1.0 + cfg.eps);
        assert!((store.get(id).data()[0] - expected).abs() < 1e-12);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn two_steps_match_hand_rolled_adam() {
        let (mut store, id) = one_param(0.5);
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut adam = Adam::new(cfg).unwrap();
        let g = 0.3;
        for _ in 0..2 {
            let gr = grads_of(&store, id, g);
            adam.step(&mut store, &gr).unwrap();
        }
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 0.05 * mh / (vh.sqrt() + cfg.eps);
        }
        assert!((store.get(id).data()[0] - p).abs() < 1e-7);
    }
}
