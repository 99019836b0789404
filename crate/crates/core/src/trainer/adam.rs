//! Adaptive-moment optimizer with bias correction, per-parameter step counts.

use indexmap::IndexMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Adam {
    pub config: AdamConfig,
    state: IndexMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: IndexMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }

    /// One update of `param` in place.
    pub fn step(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            steps: 0,
        });
        st.steps += 1;
        let c1 = 1.0 - beta1.powi(st.steps as i32);
        let c2 = 1.0 - beta2.powi(st.steps as i32);
        for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}
