//! Adam with global-norm gradient clipping over a [`ParamStore`].

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled when their global L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

pub struct Adam {
    pub config: AdamConfig,
    pub lr: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// Serializable optimizer moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, config: AdamConfig) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            config,
            lr,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of the gradients present in `grads`.
    pub fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in params.named_vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<StepStats> {
        let grad_norm = Self::grad_norm(params, grads)?;
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {grad_norm}")));
        }
        let scale = match self.config.max_grad_norm {
            Some(max) if grad_norm > max => max / grad_norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (name, var) in params.named_vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() }.detach();
            let m = match self.m.get(&name) {
                Some(m) => ((m * b1)? + (&g * (1.0 - b1))?)?,
                None => (&g * (1.0 - b1))?,
            };
            let v = match self.v.get(&name) {
                Some(v) => ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                None => (g.sqr()? * (1.0 - b2))?,
            };
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.config.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name, v.detach());
        }
        Ok(StepStats {
            grad_norm,
            clipped: scale != 1.0,
        })
    }

    pub fn state(&self) -> Result<AdamState> {
        let dump = |map: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Vec<f64>>> {
            map.iter()
                .map(|(k, t)| {
                    let v = t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
                    Ok((k.clone(), v))
                })
                .collect()
        };
        Ok(AdamState {
            step: self.step,
            m: dump(&self.m)?,
            v: dump(&self.v)?,
        })
    }

    /// Restore moments; shapes and dtypes come from the matching parameters.
    pub fn load_state(&mut self, params: &ParamStore, state: &AdamState) -> Result<()> {
        let restore = |src: &BTreeMap<String, Vec<f64>>| -> Result<BTreeMap<String, Tensor>> {
            let mut out = BTreeMap::new();
            for (name, values) in src {
                let var = params
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
                if var.elem_count() != values.len() {
                    return Err(Error::Checkpoint(format!("optimizer state for {name} has wrong size")));
                }
                let t = Tensor::from_slice(values, var.shape(), var.device())?.to_dtype(var.dtype())?;
                out.insert(name.clone(), t);
            }
            Ok(out)
        };
        self.m = restore(&state.m)?;
        self.v = restore(&state.v)?;
        self.step = state.step;
        Ok(())
    }
}
