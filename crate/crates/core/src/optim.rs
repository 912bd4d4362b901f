//! Adam with decoupled weight decay.

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Elem;
use ndarray::ArrayD;

pub struct AdamW<A: Elem> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<ArrayD<A>>>,
    v: Vec<Option<ArrayD<A>>>,
}

impl<A: Elem> AdamW<A> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn slot<'a>(
        store: &'a mut Vec<Option<ArrayD<A>>>,
        id: usize,
        shape: &[usize],
    ) -> &'a mut ArrayD<A> {
        if store.len() <= id {
            store.resize_with(id + 1, || None);
        }
        store[id].get_or_insert_with(|| ArrayD::zeros(ndarray::IxDyn(shape)))
    }

    /// Apply one update from `(param_id, grad)` pairs. Gradients for buffers
    /// or unknown ids are ignored. The decay term is decoupled from the
    /// adaptive step, applied as `p -= lr * wd * p`.
    pub fn step(&mut self, ps: &mut ParamStore<A>, grads: &[(usize, ArrayD<A>)]) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = A::from_f64(self.beta1);
        let b2 = A::from_f64(self.beta2);
        let one = A::one();
        let lr = A::from_f64(self.lr);
        let eps = A::from_f64(self.eps);
        let wd = A::from_f64(self.weight_decay);
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for (id, grad) in grads {
            let pid = ParamId(*id);
            if !ps.is_trainable(pid) {
                continue;
            }
            let shape = grad.shape().to_vec();
            let m = Self::slot(&mut self.m, *id, &shape);
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            let m = self.m[*id].clone().unwrap();
            let v = Self::slot(&mut self.v, *id, &shape);
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            let v = self.v[*id].as_ref().unwrap();
            let p = ps.value_mut(pid);
            ndarray::Zip::from(&mut *p).and(&m).and(v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
            });
        }
    }
}
