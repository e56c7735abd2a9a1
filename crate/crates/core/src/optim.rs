//! Adam with bias correction, one moment set per parameter collection.

use crate::error::{Error, Result};
use crate::networks::ParamSet;
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            beta1,
            beta2,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Gradients are checked for finiteness first, so a failed
    /// call leaves both parameters and moments untouched.
    pub fn update(
        &mut self,
        params: &mut ParamSet,
        grads: &[Tensor],
        lr: f64,
        label: &str,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::validation(format!(
                "{label}: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.entries().iter().zip(grads) {
            if g.shape() != p.shape() {
                return Err(Error::validation(format!(
                    "{label}.{name}: gradient shape mismatch"
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {label}.{name}")));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((_, p), g), (m, v)) in params
            .entries_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            for (((pv, &gv), mv), vv) in pd
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: f64) -> ParamSet {
        ParamSet::new(vec![("w".into(), Tensor::full(&[3], v))])
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = set(1.0);
        let mut opt = Adam::new(&p, 0.5, 0.999);
        opt.update(&mut p, &[Tensor::vector(vec![2.0, -3.0, 0.0])], 0.1, "t")
            .unwrap();
        let d = p.get("w").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - 1.1).abs() < 1e-6);
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn zero_lr_is_bit_exact_noop() {
        let mut p = set(0.123);
        let before = p.clone();
        let mut opt = Adam::new(&p, 0.5, 0.999);
        opt.update(&mut p, &[Tensor::vector(vec![1.0, 2.0, 3.0])], 0.0, "t")
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = set(0.0);
        let mut opt = Adam::new(&p, 0.5, 0.999);
        let err = opt
            .update(
                &mut p,
                &[Tensor::vector(vec![f64::NAN, 0.0, 0.0])],
                0.1,
                "g",
            )
            .unwrap_err();
        assert!(err.to_string().contains("g.w"), "{err}");
        assert_eq!(opt.step, 0);
    }
}
