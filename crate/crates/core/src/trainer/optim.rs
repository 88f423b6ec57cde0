//! Adam with decoupled weight decay.

use std::collections::HashMap;

use crate::error::{FsrError, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

/// Only weight matrices are decayed; biases, norm gains, and single-row
/// embeddings (mask / class tokens, weight-norm gains) are not.
pub fn decays(value: &Matrix) -> bool {
    value.rows() > 1 && value.cols() > 1
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update. Parameters without a gradient entry are left untouched
    /// (no decay either), so branches that are switched off stay frozen.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &HashMap<String, Matrix>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(FsrError::Shape(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| FsrError::Shape(format!("no moment for {name}")))?;
            let v = self
                .v
                .get_mut(name)
                .ok_or_else(|| FsrError::Shape(format!("no moment for {name}")))?;
            let wd = if decays(p) { self.weight_decay } else { 0.0 };
            for (((x, &gi), mi), vi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * *x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamStore::new();
        p.insert(
            "w",
            Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap(),
        );
        p.insert("b", Matrix::row_vector(vec![1.0]));
        let mut opt = AdamW::new(&p, 0.9, 0.999, 0.0, 0.0);
        let mut g = HashMap::new();
        g.insert(
            "w".to_string(),
            Matrix::from_rows(&[vec![0.3, -4.0], vec![-1e-3, 2.0]]).unwrap(),
        );
        opt.update(&mut p, &g, 0.1).unwrap();
        let w = p.get("w").unwrap();
        assert!((w[(0, 0)] - 0.9).abs() < 1e-12);
        assert!((w[(0, 1)] + 1.9).abs() < 1e-12);
        assert!((w[(1, 0)] - 0.6).abs() < 1e-12);
        assert_eq!(p.get("b").unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = ParamStore::new();
        p.insert("w", Matrix::filled(2, 2, 2.0));
        p.insert("b", Matrix::filled(1, 2, 2.0));
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.01);
        let mut g = HashMap::new();
        g.insert("w".to_string(), Matrix::zeros(2, 2));
        g.insert("b".to_string(), Matrix::zeros(1, 2));
        opt.update(&mut p, &g, 0.5).unwrap();
        assert!((p.get("w").unwrap()[(0, 0)] - (2.0 - 0.5 * 0.01 * 2.0)).abs() < 1e-15);
        assert_eq!(p.get("b").unwrap()[(0, 0)], 2.0);
    }

    #[test]
    fn matches_scalar_reference_over_steps() {
        let mut p = ParamStore::new();
        p.insert("w", Matrix::filled(2, 2, 0.7));
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.01);
        let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let gv = 0.1 * t as f64 - 0.25;
            let mut g = HashMap::new();
            g.insert("w".to_string(), Matrix::filled(2, 2, gv));
            opt.update(&mut p, &g, 1e-2).unwrap();
            m = 0.9 * m + 0.1 * gv;
            v = 0.999 * v + 0.001 * gv * gv;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-2 * (mh / (vh.sqrt() + 1e-8) + 0.01 * x);
        }
        assert_eq!(p.get("w").unwrap()[(1, 1)], x);
    }
}
