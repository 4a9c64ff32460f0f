//! Adam, plateau learning-rate halving and early stopping.

use serde::{Deserialize, Serialize};

use crate::kernels::{Matrix, Parameters};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
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

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        let g = grads.blocks();
        let mut p = params.blocks_mut();
        assert_eq!(p.len(), g.len(), "parameter/gradient block count");
        if self.m.is_empty() {
            self.m = g.iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, gb)) in g.iter().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gr)) in p[i].data_mut().iter_mut().zip(gb.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gr;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gr * gr;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Multiplies the rate by `factor` after `patience` consecutive epochs
/// without a strict improvement, then starts counting again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch's validation loss and returns the rate for the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr *= self.factor;
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Signals a stop once `patience` epochs pass without a new best loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Matrix;

    #[derive(Clone)]
    struct One(Matrix);

    impl Parameters for One {
        fn blocks(&self) -> Vec<(String, &Matrix)> {
            vec![("w".into(), &self.0)]
        }
        fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = One(Matrix::row_vector(&[1.0, -2.0, 0.5]));
        let g = One(Matrix::row_vector(&[0.3, -4.0, 0.0]));
        let mut opt = Adam::new(1e-3);
        opt.step(&mut p, &g);
        // m_hat = g, v_hat = g^2 after one step
        let expect = [1.0 - 1e-3 * 0.3 / (0.3 + 1e-8), -2.0 + 1e-3 * 4.0 / (4.0 + 1e-8), 0.5];
        for (a, b) in p.0.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = One(Matrix::row_vector(&[3.0, -1.5]));
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g = One(p.0.clone());
            opt.step(&mut p, &g);
        }
        assert!(p.0.data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn plateau_halves_after_patience_then_resets() {
        let mut s = PlateauScheduler::new(1e-3, 0.5, 5);
        let mut lrs = vec![s.observe(1.0)];
        for _ in 0..10 {
            lrs.push(s.observe(1.0));
        }
        assert_eq!(lrs[..5], [1e-3; 5]);
        assert_eq!(lrs[5], 5e-4);
        assert_eq!(lrs[9], 5e-4);
        assert_eq!(lrs[10], 2.5e-4);
    }

    #[test]
    fn early_stopping_counts_from_best() {
        let mut e = EarlyStopping::new(3);
        assert_eq!(e.observe(1, 2.0), (true, false));
        assert_eq!(e.observe(2, 2.5), (false, false));
        assert_eq!(e.observe(3, 1.5), (true, false));
        assert_eq!(e.observe(4, 1.5), (false, false));
        assert_eq!(e.observe(5, 1.6), (false, false));
        assert_eq!(e.observe(6, 1.7), (false, true));
        assert_eq!(e.best_epoch(), 3);
    }
}
