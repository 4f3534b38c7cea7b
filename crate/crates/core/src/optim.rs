//! SGD with momentum and Adam over lists of parameter blocks.

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64, weight_decay: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum, weight_decay }
    }

    /// Adam with the usual defaults (0.9, 0.999, 1e-8).
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    /// Same optimizer with weight decay removed (transition weights never decay).
    pub fn without_weight_decay(self) -> Self {
        match self {
            OptimizerConfig::Sgd { lr, momentum, .. } => OptimizerConfig::Sgd { lr, momentum, weight_decay: 0.0 },
            adam => adam,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    /// Momentum buffer (SGD) or first moment (Adam), one per block.
    first: Vec<Vec<f64>>,
    /// Second moment, Adam only.
    second: Vec<Vec<f64>>,
    steps: u64,
    lr_divisor: f64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, first: Vec::new(), second: Vec::new(), steps: 0, lr_divisor: 1.0 }
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn effective_lr(&self) -> f64 {
        self.config.lr() / self.lr_divisor
    }

    /// Divides the learning rate by `d` from now on (cumulative).
    pub fn divide_lr(&mut self, d: f64) {
        self.lr_divisor *= d;
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "block count mismatch");
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let lr = self.effective_lr();
        match self.config {
            OptimizerConfig::Sgd { momentum, weight_decay, .. } => {
                for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for k in 0..p.len() {
                        v[k] = momentum * v[k] + g[k] + weight_decay * p[k];
                        p[k] -= lr * v[k];
                    }
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                let t = self.steps as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for k in 0..p.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        let m_hat = m[k] / bc1;
                        let v_hat = v[k] / bc2;
                        p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.0, 0.0));
        let mut w = [1.0];
        opt.step(vec![&mut w], &[&[2.0]]);
        assert!((w[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_unrolls() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(1.0, 0.9, 0.0));
        let mut w = [0.0];
        opt.step(vec![&mut w], &[&[1.0]]);
        assert_eq!(w[0], -1.0);
        opt.step(vec![&mut w], &[&[1.0]]);
        assert!((w[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.5, 0.0, 0.1));
        let mut w = [2.0];
        opt.step(vec![&mut w], &[&[0.0]]);
        assert!((w[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
        assert_eq!(OptimizerConfig::sgd(0.5, 0.9, 0.1).without_weight_decay(), OptimizerConfig::sgd(0.5, 0.9, 0.0));
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        for g in [3.0, -0.01, 1e-3] {
            let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3));
            let mut w = [0.0];
            opt.step(vec![&mut w], &[&[g]]);
            let expected = -1e-3 * g.signum();
            assert!((w[0] - expected).abs() < 1e-3 * 1e-4, "g={g}: {}", w[0]);
            assert!(w[0].abs() < 1e-3);
        }
    }

    #[test]
    fn lr_divisor_is_cumulative() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(1.0, 0.0, 0.0));
        opt.divide_lr(10.0);
        opt.divide_lr(10.0);
        assert!((opt.effective_lr() - 0.01).abs() < 1e-15);
    }
}
