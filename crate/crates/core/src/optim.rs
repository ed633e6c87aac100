//! SGD and Adam parameter updates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        /// First/second moment buffers, allocated on the first step.
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update. `grads` must be keyed 1:1 to `params`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::MissingGradient {
                index: grads.len().min(params.len()),
                name: format!("{} params vs {} grads", params.len(), grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let _ = i;
        }

        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= *lr * gv;
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, step, m, v } => {
                if m.is_empty() {
                    *m = params.iter().map(|p| vec![0.0; p.len()]).collect();
                    *v = params.iter().map(|p| vec![0.0; p.len()]).collect();
                }
                *step += 1;
                let t = *step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for ((p, g), (ms, vs)) in params.iter_mut().zip(grads).zip(m.iter_mut().zip(v.iter_mut())) {
                    for ((pv, gv), (mv, vv)) in
                        p.data_mut().iter_mut().zip(g.data()).zip(ms.iter_mut().zip(vs.iter_mut()))
                    {
                        *mv = *beta1 * *mv + (1.0 - *beta1) * gv;
                        *vv = *beta2 * *vv + (1.0 - *beta2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv -= *lr * m_hat / (v_hat.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_step() {
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(2.0);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // bias correction makes the first update ≈ lr·g/(|g| + ε)
        for g0 in [1e-3, 1.0, 1e6] {
            let mut p = Tensor::scalar(0.0);
            let mut opt = Optimizer::adam(0.001);
            opt.step(&mut [&mut p], &[Tensor::scalar(g0)]).unwrap();
            let ratio = p.item().abs() / 0.001;
            assert!(
                (0.98..=1.0).contains(&ratio),
                "step/lr ratio {ratio} for g={g0}"
            );
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize f(p) = (p - 3)^2 from p = 0
        let mut p = Tensor::scalar(0.0);
        let mut opt = Optimizer::adam(0.05);
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * (p.item() - 3.0));
            opt.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!((p.item() - 3.0).abs() < 1e-2, "ended at {}", p.item());
    }

    #[test]
    fn mismatched_grads_rejected() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = Optimizer::sgd(0.1);
        assert!(opt.step(&mut [&mut p], &[]).is_err());
    }
}
