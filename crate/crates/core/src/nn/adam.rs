use super::params::ParamStore;
use super::tape::{Gradients, Mat};

/// Adam with bias correction. Parameters without a gradient in a step keep
/// their moments untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Option<Mat>>,
    second: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (id, g) in grads.iter() {
            let m = self.first[id.0].get_or_insert_with(|| Mat::zeros(g.raw_dim()));
            let v = self.second[id.0].get_or_insert_with(|| Mat::zeros(g.raw_dim()));
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tape;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::from_elem((1, 1), 3.0));
        let mut opt = Adam::new(0.1);
        let mut t = Tape::new();
        let x = t.param(&store, id);
        let y = t.mul(x, x);
        let g = t.backward(y);
        opt.step(&mut store, &g);
        assert!((store.get(id)[[0, 0]] - 2.9).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::from_elem((1, 2), 5.0));
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let mut t = Tape::new();
            let x = t.param(&store, id);
            let s = t.affine(x, 1.0, -1.0);
            let sq = t.mul(s, s);
            let y = t.sum_all(sq);
            let g = t.backward(y);
            opt.step(&mut store, &g);
        }
        for &v in store.get(id).iter() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
