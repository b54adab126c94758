use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Mat};
use super::params::{ParamId, ParamStore};

/// Adam over a fixed subset of a [`ParamStore`].
///
/// Parameters without a gradient in a given step are left untouched and
/// their moments are not advanced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    ids: Vec<ParamId>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, lr: f64) -> Self {
        let m: Vec<Mat> = ids.iter().map(|&id| Mat::zeros(store.get(id).dim())).collect();
        Self {
            v: m.clone(),
            m,
            ids,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.param(id) else { continue };
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&mut self.m[k])
                .and(&mut self.v[k])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use ndarray::array;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x.w", array![[3.0, -2.0]]);
        let mut opt = Adam::new(&store, vec![id], 0.1);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.square(x);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            opt.step(&mut store, &grads);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("x.w", array![[1.0]]);
        let mut opt = Adam::new(&store, vec![id], 1e-4);
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let loss = g.sum(x);
        let grads = g.backward(loss);
        opt.step(&mut store, &grads);
        assert!((store.get(id)[[0, 0]] - (1.0 - 1e-4)).abs() < 1e-10);
    }
}
