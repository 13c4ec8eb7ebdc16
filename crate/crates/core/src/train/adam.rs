use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::model::{Dense, Head, HeadGrads};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments, updating only the head.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    params: AdamParams,
    step: i32,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Adam {
    pub fn new(head: &Head, lr: f64, params: AdamParams) -> Self {
        let zeros: Vec<Dense> = head
            .layers()
            .iter()
            .map(|d| Dense {
                kernel: d.kernel.mapv(|_| 0.0),
                bias: d.bias.mapv(|_| 0.0),
            })
            .collect();
        Self {
            lr,
            params,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, head: &mut Head, grads: &HeadGrads) {
        self.step += 1;
        let AdamParams { beta1, beta2, epsilon } = self.params;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let lr = self.lr;
        let update = |theta: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *theta -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
        };
        for (((layer, g), m), v) in head
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            Zip::from(&mut layer.kernel)
                .and(&g.kernel)
                .and(&mut m.kernel)
                .and(&mut v.kernel)
                .for_each(update);
            Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(update);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadSpec;
    use crate::nn::FeatureShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head() -> Head {
        let spec = HeadSpec {
            widths: [2, 2, 2],
            classes: 2,
            dropout_rate: 0.0,
        };
        Head::init(spec, FeatureShape::new(1, 1, 2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn grads_like(head: &Head, f: impl Fn(usize) -> f64) -> HeadGrads {
        let mut i = 0;
        let layers = head.layers().clone().map(|d| Dense {
            kernel: d.kernel.mapv(|_| {
                i += 1;
                f(i)
            }),
            bias: d.bias.mapv(|_| 0.0),
        });
        HeadGrads { layers }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut h = head();
        let before = h.clone();
        let g = grads_like(&h, |i| if i % 2 == 0 { 3.0 } else { -0.01 });
        let mut adam = Adam::new(&h, 1e-3, AdamParams::default());
        adam.step(&mut h, &g);
        for (a, (b, g)) in h.layers().iter().zip(before.layers().iter().zip(&g.layers)) {
            for ((x, y), g) in a.kernel.iter().zip(&b.kernel).zip(&g.kernel) {
                // m_hat / sqrt(v_hat) = g / |g| after one step
                let expected = y - 1e-3 * g / (g.abs() + 1e-8);
                assert!((x - expected).abs() < 1e-15);
            }
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn matches_scalar_recurrence() {
        let mut h = head();
        let mut adam = Adam::new(&h, 0.01, AdamParams::default());
        let start = h.layers()[0].kernel[[0, 0]];
        let gs = [0.5, -0.2, 0.1, 0.9];
        let (mut theta, mut m, mut v) = (start, 0.0, 0.0);
        for (t, &g) in gs.iter().enumerate() {
            let grads = grads_like(&h, |i| if i == 1 { g } else { 0.0 });
            adam.step(&mut h, &grads);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let t = t as i32 + 1;
            theta -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((h.layers()[0].kernel[[0, 0]] - theta).abs() < 1e-15);
        assert_eq!(adam.steps(), 4);
    }
}
