use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore};

/// Gradient sums accumulated over several backward passes.
#[derive(Clone, Debug, Default)]
pub struct GradBuffer {
    grads: IndexMap<String, Vec<f64>>,
}

impl GradBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `scale · g` for every parameter that received a gradient.
    pub fn add(&mut self, g: &Gradients, scale: f64) {
        for (name, t) in g.params() {
            let slot = self
                .grads
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; t.numel()]);
            for (s, v) in slot.iter_mut().zip(t.data()) {
                *s += scale * v;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.grads.iter()
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads.values().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.l2_norm();
        if n > max_norm && n > 0.0 {
            let s = max_norm / n;
            self.grads.values_mut().flatten().for_each(|v| *v *= s);
        }
        n
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().flatten().all(|v| v.is_finite())
    }
}

/// Plain SGD with optional heavy-ball momentum: `v ← μv + g; θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: IndexMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("invalid SGD settings lr={lr} momentum={momentum}")));
        }
        Ok(Sgd { lr, momentum, velocity: IndexMap::new() })
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = store.get_mut(name)?;
            if p.numel() != g.len() {
                return Err(Error::shape("sgd_step", format!("gradient for `{name}` has wrong length")));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Init, Tensor};

    fn quad_grads(store: &ParamStore) -> GradBuffer {
        let mut g = Graph::new();
        let p = g.param(store, "p").unwrap();
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        let mut buf = GradBuffer::new();
        buf.add(&grads, 1.0);
        buf
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut store = ParamStore::new(3);
        store.register("p", &[4], Init::Glorot { fan_in: 4, fan_out: 4 }).unwrap();
        let before = store.clone();
        let mut opt = Sgd::new(0.0, 0.9).unwrap();
        for _ in 0..5 {
            let g = quad_grads(&store);
            opt.step(&mut store, &g).unwrap();
        }
        assert_eq!(before, store);
    }

    #[test]
    fn plain_step_moves_against_gradient() {
        let mut store = ParamStore::new(0);
        store.insert("p", Tensor::from_vec(vec![1.0, -2.0]));
        let mut opt = Sgd::new(0.5, 0.0).unwrap();
        let g = quad_grads(&store);
        opt.step(&mut store, &g).unwrap();
        assert_eq!(store.get("p").unwrap().data(), &[0.5, -1.0]);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = ParamStore::new(0);
        store.insert("p", Tensor::from_vec(vec![3.0, 4.0]));
        let mut g = quad_grads(&store);
        assert_eq!(g.clip_norm(1.0), 5.0);
        assert!((g.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_momentum() {
        assert!(Sgd::new(0.1, 1.0).is_err());
        assert!(Sgd::new(-0.1, 0.0).is_err());
    }
}
