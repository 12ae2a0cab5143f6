use crate::tensor::Tensor;

/// Adam without weight decay. Moment buffers are keyed by slot index.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advances the shared step counter; call once per iteration before
    /// [`Adam::update`].
    pub fn tick(&mut self) {
        self.step += 1;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, slot: usize, lr: f64, param: &mut Tensor, grad: &Tensor) {
        self.update_slice(slot, lr, param.data_mut(), grad.data());
    }

    pub fn update_slice(&mut self, slot: usize, lr: f64, param: &mut [f64], grad: &[f64]) {
        if self.moments.len() <= slot {
            self.moments.resize(slot + 1, None);
        }
        let (m, v) = self.moments[slot]
            .get_or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            param[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
