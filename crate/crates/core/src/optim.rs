//! Adam with bias correction, and a plateau detector for learning-rate decay.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::params::Parameters;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<DMatrix<f64>>,
    pub v: Vec<DMatrix<f64>>,
}

impl Adam {
    pub fn new<P: Parameters>(params: &P, lr: f64) -> Self {
        let zeros: Vec<_> = params
            .tensors()
            .iter()
            .map(|(_, t)| DMatrix::zeros(t.nrows(), t.ncols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g: Vec<DMatrix<f64>> = grads.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let mut p = params.tensors_mut();
        if g.len() != p.len() || g.len() != self.m.len() {
            return shape_err("optimizer state does not match parameters");
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (param, grad)) in p.iter_mut().zip(g.iter()).enumerate() {
            if param.shape() != grad.shape() || grad.shape() != self.m[i].shape() {
                return shape_err("gradient shape differs from parameter");
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..grad.len() {
                let gk = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / b1t;
                let vh = v[k] / b2t;
                param[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Divides the learning rate once the monitored error has not improved for
/// `patience` consecutive observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub best: Option<f64>,
    pub since_best: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: None,
            since_best: 0,
        }
    }

    /// Records a new value; returns the multiplier to apply to the learning
    /// rate (1 when no decay is due).
    pub fn observe(&mut self, value: f64) -> f64 {
        match self.best {
            Some(b) if value >= b => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    self.since_best = 0;
                    return self.factor;
                }
            }
            _ => {
                self.best = Some(value);
                self.since_best = 0;
            }
        }
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct One(DMatrix<f64>);

    impl Parameters for One {
        fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
            vec![("x".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = One(DMatrix::from_element(1, 2, 1.0));
        let g = One(DMatrix::from_row_slice(1, 2, &[3.0, -0.5]));
        let mut opt = Adam::new(&p, 0.1);
        opt.update(&mut p, &g).unwrap();
        assert!((p.0[0] - 0.9).abs() < 1e-7);
        assert!((p.0[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = One(DMatrix::from_element(1, 1, 5.0));
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..2000 {
            let g = One(&p.0 * 2.0);
            opt.update(&mut p, &g).unwrap();
        }
        assert!(p.0[0].abs() < 1e-3);
    }

    #[test]
    fn plateau_decays_after_patience() {
        let mut pl = Plateau::new(2, 0.1);
        assert_eq!(pl.observe(10.0), 1.0);
        assert_eq!(pl.observe(9.0), 1.0);
        assert_eq!(pl.observe(9.5), 1.0);
        assert_eq!(pl.observe(9.0), 0.1);
        assert_eq!(pl.observe(8.0), 1.0);
        assert_eq!(pl.best, Some(8.0));
    }
}
