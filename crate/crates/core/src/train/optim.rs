//! Adam and the validation-plateau learning-rate schedule.

use volcast_autodiff::ParamSet;

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

    /// Forget the moment estimates and the step count.
    pub fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, params: &mut ParamSet) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                value[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        params.zero_grad();
    }
}

/// Multiply the rate by `factor` once the monitored loss has gone
/// `patience` epochs without a strict improvement; the count then restarts.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub floor: f64,
    best: f64,
    stale: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64, floor: f64) -> Self {
        Self {
            patience,
            factor,
            floor,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn reset(&mut self) {
        self.best = f64::INFINITY;
        self.stale = 0;
    }

    /// Record an epoch's loss and return the rate for the next epoch.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            return (lr * self.factor).max(self.floor);
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use volcast_autodiff::Tensor;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = ParamSet::new();
        let id = p.insert("x", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        p.get_mut(id).grad = Tensor::new(&[2], vec![3.0, -0.5]).unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&mut p);
        let x = p.get(id).value.data();
        assert!((x[0] - 0.9).abs() < 1e-7 && (x[1] + 0.9).abs() < 1e-7);
        assert_eq!(p.get(id).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn plateau_respects_floor() {
        let mut s = Plateau::new(1, 0.5, 0.3);
        let mut lr = 1.0;
        for _ in 0..5 {
            lr = s.observe(1.0, lr);
        }
        assert_eq!(lr, 0.3);
    }
}
