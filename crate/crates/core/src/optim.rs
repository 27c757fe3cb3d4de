//! SGD, AdamW and the linear learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParameterRegistry, Partition};
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// `θ ← θ − lr·g` for parameters in `partitions` that have a gradient.
pub fn sgd_step(registry: &mut ParameterRegistry, grads: &Gradients, lr: f64, partitions: &[Partition]) -> Result<()> {
    for p in registry.iter_mut() {
        if !partitions.contains(&p.partition()) {
            continue;
        }
        let Some(g) = grads.get(p.id()) else { continue };
        check_shape(p.id(), &p.value, g)?;
        for (x, d) in p.value.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

fn check_shape(id: &str, value: &Tensor, grad: &Tensor) -> Result<()> {
    if value.shape() != grad.shape() {
        return Err(Error::shape(
            "optimizer",
            format!("{id}: parameter {:?} vs gradient {:?}", value.shape(), grad.shape()),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: IndexMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: &str) -> Option<&Moments> {
        self.state.get(id)
    }

    /// One update of every parameter in `partitions` that has a gradient.
    /// Parameters without a gradient are left untouched, moments included.
    pub fn step(
        &mut self,
        registry: &mut ParameterRegistry,
        grads: &Gradients,
        lr: f64,
        partitions: &[Partition],
    ) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in registry.iter_mut() {
            if !partitions.contains(&p.partition()) {
                continue;
            }
            let Some(g) = grads.get(p.id()) else { continue };
            check_shape(p.id(), &p.value, g)?;
            let n = g.len();
            let st = self.state.entry(p.id().to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            for (((x, &d), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *x -= lr * c.weight_decay * *x;
                *m = c.beta1 * *m + (1.0 - c.beta1) * d;
                *v = c.beta2 * *v + (1.0 - c.beta2) * d * d;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *x -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Linear decay from `initial` at step 0 towards 0 at `total_steps`, no warmup.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub initial: f64,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(initial: f64, total_steps: usize) -> Self {
        Self { initial, total_steps }
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.initial;
        }
        let left = self.total_steps.saturating_sub(step) as f64;
        self.initial * left / self.total_steps as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg(x: f64) -> ParameterRegistry {
        let mut r = ParameterRegistry::new();
        r.add("a", Tensor::vector(vec![x]), Partition::Lightweight).unwrap();
        r.add("p", Tensor::vector(vec![x]), Partition::Pretrained).unwrap();
        r
    }

    fn grads(g: f64) -> Gradients {
        let mut gr = Gradients::new();
        gr.insert("a", Tensor::vector(vec![g]));
        gr.insert("p", Tensor::vector(vec![g]));
        gr
    }

    #[test]
    fn sgd_on_half_square() {
        let mut r = reg(1.0);
        sgd_step(&mut r, &grads(1.0), 0.03, &[Partition::Lightweight]).unwrap();
        assert_eq!(r.value("a").unwrap().item(), 0.97);
        assert_eq!(r.value("p").unwrap().item(), 1.0);
    }

    #[test]
    fn first_adamw_step_moves_by_lr() {
        // With bias correction the first step is lr·g/(|g|+eps) plus decay.
        let mut r = reg(2.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.step(&mut r, &grads(0.5), 0.1, &Partition::ALL).unwrap();
        let got = r.value("a").unwrap().item();
        assert!((got - (2.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        let cfg = AdamWConfig::default();
        let mut r = reg(1.5);
        let mut opt = AdamW::new(cfg);
        let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = 0.3 * t as f64 - x;
            let mut gr = Gradients::new();
            gr.insert("a", Tensor::vector(vec![g]));
            opt.step(&mut r, &gr, 1e-2, &[Partition::Lightweight]).unwrap();
            x -= 1e-2 * 0.01 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-2 * mh / (vh.sqrt() + 1e-8);
            assert_eq!(r.value("a").unwrap().item().to_bits(), x.to_bits());
        }
        assert!(opt.moments("p").is_none());
    }

    #[test]
    fn linear_schedule() {
        let s = LinearSchedule::new(5e-5, 4);
        assert_eq!(s.at(0), 5e-5);
        assert_eq!(s.at(2), 2.5e-5);
        assert_eq!(s.at(4), 0.0);
        assert_eq!(s.at(9), 0.0);
    }
}
