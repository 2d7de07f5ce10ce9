//! Adam and the cosine learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for a list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One bias-corrected Adam update of `params` in place.
    ///
    /// Nothing is modified when any gradient is misshapen or non-finite.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(shape_err(
                "adam parameter count",
                &[self.m.len()],
                &[params.len(), grads.len()],
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(shape_err("adam gradient", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::OutOfRange {
                what: "learning rate",
                detail: format!("{lr}"),
            });
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
        let one = T::one();
        let c1 = T::from_f64(1.0 - num_traits::Float::powi(BETA1, t));
        let c2 = T::from_f64(1.0 - num_traits::Float::powi(BETA2, t));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(EPSILON);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` down to `lr_min` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(lr0: f64, lr_min: f64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(lr0.is_finite() && lr_min.is_finite() && lr_min >= 0.0 && lr0 >= lr_min) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr0, got lr0={lr0}, lr_min={lr_min}"
            )));
        }
        Ok(Self {
            lr0,
            lr_min,
            total_steps,
        })
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::OutOfRange {
                what: "schedule step",
                detail: format!("{step} > {}", self.total_steps),
            });
        }
        let phase = core::f64::consts::PI * step as f64 / self.total_steps as f64;
        Ok(self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + num_traits::Float::cos(phase)))
    }
}
