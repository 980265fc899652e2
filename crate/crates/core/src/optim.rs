use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var, WithDType};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed set of named variables. Moment estimates are exposed so
/// they can be checkpointed.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    vars: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: AdamConfig) -> Result<Self> {
        let vars: Vec<(String, Var)> = params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let first = vars
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self {
            cfg,
            vars,
            first,
            second,
            step: 0,
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using whatever gradients `grads` holds for this
    /// optimizer's variables. Variables without a gradient are left alone.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let bias1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for (i, (name, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            if g.dims() != var.dims() {
                return Err(Error::Shape(format!("gradient for {name} has wrong shape")));
            }
            let moments = (&self.first[i], &self.second[i]);
            let (p, m, v) = match var.dtype() {
                DType::F32 => fused_update::<f32>(var.as_tensor(), g, moments, &self.cfg, bias1, bias2)?,
                DType::F64 => fused_update::<f64>(var.as_tensor(), g, moments, &self.cfg, bias1, bias2)?,
                other => {
                    return Err(Error::InvalidInput(format!(
                        "Adam supports f32/f64 parameters, got {other:?}"
                    )))
                }
            };
            var.set(&p)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<param>` / `v.<param>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.insert(format!("m.{name}"), self.first[i].clone());
            out.insert(format!("v.{name}"), self.second[i].clone());
        }
        out
    }

    pub fn restore(&mut self, step: u64, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.first[i]), ("v", &mut self.second[i])] {
                let key = format!("{prefix}.{name}");
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer tensor {key} has wrong shape")));
                }
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

/// One Adam update in a single pass over host memory, computed in f64 and
/// stored back in the parameter's dtype. Returns `(param, m, v)`.
fn fused_update<T: WithDType>(
    param: &Tensor,
    grad: &Tensor,
    (m, v): (&Tensor, &Tensor),
    cfg: &AdamConfig,
    bias1: f64,
    bias2: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let flat = |t: &Tensor| -> Result<Vec<T>> { Ok(t.flatten_all()?.to_dtype(T::DTYPE)?.to_vec1::<T>()?) };
    let (mut p, g, mut m1, mut m2) = (flat(param)?, flat(grad)?, flat(m)?, flat(v)?);
    for i in 0..p.len() {
        let gi = g[i].to_f64();
        let a = cfg.beta1 * m1[i].to_f64() + (1.0 - cfg.beta1) * gi;
        let b = cfg.beta2 * m2[i].to_f64() + (1.0 - cfg.beta2) * gi * gi;
        let step = (a / bias1) / ((b / bias2).sqrt() + cfg.eps);
        p[i] = T::from_f64(p[i].to_f64() - cfg.learning_rate * step);
        m1[i] = T::from_f64(a);
        m2[i] = T::from_f64(b);
    }
    let (shape, dev) = (param.shape(), param.device());
    Ok((
        Tensor::from_vec(p, shape, dev)?,
        Tensor::from_vec(m1, shape, dev)?,
        Tensor::from_vec(m2, shape, dev)?,
    ))
}
