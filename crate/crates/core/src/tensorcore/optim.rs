use super::ParamStore;

/// SGD with heavy-ball momentum and optional L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay: 0.0,
            velocity: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// Applies accumulated grads to trainable entries, then zeroes grads.
    pub fn step(&mut self, params: &mut ParamStore) {
        if self.velocity.len() != params.len() {
            self.velocity = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        }
        for id in params.ids().collect::<Vec<_>>() {
            if !params.is_trainable(id) {
                continue;
            }
            let t = params.get_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            let v = &mut self.velocity[id.0];
            for ((w, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= self.lr * *vi;
            }
        }
        params.zero_grads();
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore) {
        if self.m.len() != params.len() {
            self.m = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in params.ids().collect::<Vec<_>>() {
            if !params.is_trainable(id) {
                continue;
            }
            let t = params.get_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        params.zero_grads();
    }
}
