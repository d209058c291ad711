use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensorcore::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state; moment buffers follow the parameter visiting order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, lr: f64) -> Self {
        Self {
            config,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored on the parameters.
    pub fn step<S: Scalar>(&mut self, model: &mut (impl Parameterized<S> + ?Sized)) {
        self.step += 1;
        let lr = self.lr;
        match self.config {
            OptimizerConfig::Sgd => model.visit_params_mut(&mut |p| {
                let Some(grad) = p.value.grad().map(<[S]>::to_vec) else {
                    return;
                };
                for (w, g) in p.value.data_mut().iter_mut().zip(grad) {
                    *w -= S::of(lr) * g;
                }
            }),
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (ms, vs) = (&mut self.m, &mut self.v);
                let mut i = 0;
                model.visit_params_mut(&mut |p| {
                    if ms.len() <= i {
                        ms.push(vec![0.0; p.numel()]);
                        vs.push(vec![0.0; p.numel()]);
                    }
                    let Some(grad) = p.value.grad().map(<[S]>::to_vec) else {
                        i += 1;
                        return;
                    };
                    let (m, v) = (&mut ms[i], &mut vs[i]);
                    for (j, (w, g)) in p.value.data_mut().iter_mut().zip(grad).enumerate() {
                        let g = g.as_f64();
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        *w -= S::of(update);
                    }
                    i += 1;
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::{Param, Tensor};

    struct One(Param<f64>);

    impl Parameterized<f64> for One {
        fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f64>)) {
            f(&self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0)
        }
    }

    fn with_grad(w: f64, g: f64) -> One {
        let mut p = Param::new("w", Tensor::row(vec![w]));
        p.value.grad_mut().unwrap()[0] = g;
        One(p)
    }

    #[test]
    fn sgd_step() {
        let mut m = with_grad(1.0, 2.0);
        Optimizer::new(OptimizerConfig::Sgd, 0.1).step(&mut m);
        assert!((m.0.value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut m = with_grad(1.0, 5.0);
        Optimizer::new(OptimizerConfig::default(), 0.01).step(&mut m);
        // bias-corrected m / sqrt(v) = sign(g) on the first step
        assert!((m.0.value.data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_keeps_bits() {
        let mut m = with_grad(0.123456789, 3.0);
        let before = m.0.value.data()[0].to_bits();
        let mut opt = Optimizer::new(OptimizerConfig::default(), 0.0);
        opt.step(&mut m);
        opt.step(&mut m);
        assert_eq!(m.0.value.data()[0].to_bits(), before);
    }
}
