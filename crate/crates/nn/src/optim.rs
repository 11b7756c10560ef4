//! Adam with bias correction, applied element-wise in the parameter's own
//! precision.

use num_traits::Float;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Optimizer state for a fixed, ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    slots: Vec<Moments<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            slots: sizes
                .iter()
                .map(|&n| Moments {
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                })
                .collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the step counter; call once per optimization step before
    /// the per-tensor [`Adam::update`] calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates tensor `slot` in place from its gradient.
    pub fn update(&mut self, slot: usize, value: &mut [T], grad: &[T]) {
        let c = self.config;
        let t = self.step.max(1) as i32;
        let cast = |x: f64| T::from(x).expect("float cast");
        let (b1, b2, eps) = (cast(c.beta1), cast(c.beta2), cast(c.eps));
        let bias1 = T::one() - b1.powi(t);
        let bias2_sqrt = (T::one() - b2.powi(t)).sqrt();
        let step_size = cast(c.lr) / bias1;
        let Moments { m, v } = &mut self.slots[slot];
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let denom = v[i].sqrt() / bias2_sqrt + eps;
            value[i] = value[i] - step_size * m[i] / denom;
        }
    }
}
