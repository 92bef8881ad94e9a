use crate::model::ParamStore;
use crate::tensor::Element;

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    /// Per group, per parameter: first and second moments.
    moments: Vec<Vec<(Vec<T>, Vec<T>)>>,
}

/// A parameter store updated with its own learning rate.
pub struct ParamGroup<'a, T> {
    pub params: &'a mut ParamStore<T>,
    pub lr: f64,
}

impl<T: Element> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its accumulated gradient.
    /// Group order and composition must not change between calls.
    pub fn step(&mut self, groups: &mut [ParamGroup<'_, T>]) {
        if self.moments.is_empty() {
            self.moments = groups
                .iter()
                .map(|g| {
                    g.params
                        .iter()
                        .map(|(_, t)| (vec![T::zero(); t.numel()], vec![T::zero(); t.numel()]))
                        .collect()
                })
                .collect();
        }
        assert_eq!(self.moments.len(), groups.len(), "parameter groups changed");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let bc1 = T::lit(1.0 - self.beta1.powi(t));
        let bc2 = T::lit(1.0 - self.beta2.powi(t));
        let eps = T::lit(self.eps);
        for (group, moments) in groups.iter_mut().zip(&mut self.moments) {
            let lr = T::lit(group.lr);
            let decay = one - lr * T::lit(self.weight_decay);
            for ((_, p), (m, v)) in group.params.iter_mut().zip(moments.iter_mut()) {
                if !p.requires_grad() {
                    continue;
                }
                let (values, grad) = p.values_and_grad();
                let Some(g) = grad else {
                    continue;
                };
                for (((w, g), m), v) in values.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = b1 * *m + (one - b1) * *g;
                    *v = b2 * *v + (one - b2) * *g * *g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(stores: &mut [&mut ParamStore<T>], max_norm: f64) -> f64 {
    let sq: f64 = stores
        .iter()
        .flat_map(|s| s.iter())
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = T::lit(max_norm / norm);
        for store in stores.iter_mut() {
            for (_, t) in store.iter_mut() {
                t.scale_grad(c);
            }
        }
    }
    norm
}
