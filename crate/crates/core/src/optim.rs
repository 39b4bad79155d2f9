//! Named parameter storage and the Adam optimizer.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Real, Tensor, Var};

/// Parameters keyed by a dotted path, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter path `{name}`")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Register every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.values.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Register every parameter on `g` as a constant (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.values.iter().map(|t| g.constant(t.clone())).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replace all values, keeping names; shapes must match.
    pub fn load_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.values.len()
            || values
                .iter()
                .zip(&self.values)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape(
                "parameter set does not match the model layout".into(),
            ));
        }
        self.values = values;
        Ok(())
    }

    /// SHA-256 over paths, shapes and little-endian f64 values.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(Real::to_f64(v).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            schedule: LrSchedule::Constant,
        }
    }
}

/// Learning-rate multiplier as a function of the step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup, then cosine decay to `floor` at step `total`.
    WarmupCosine {
        warmup: usize,
        total: usize,
        floor: f64,
    },
}

impl LrSchedule {
    /// Multiplier for the 0-based `step`.
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine {
                warmup,
                total,
                floor,
            } => {
                if step < warmup {
                    (step + 1) as f64 / warmup as f64
                } else {
                    let span = total.saturating_sub(warmup).max(1);
                    let t = ((step - warmup) as f64 / span as f64).min(1.0);
                    floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .values
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients of the bound `vars`. Returns the
    /// global gradient norm before clipping.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        vars: &[Var],
        grads: &Gradients<T>,
    ) -> Result<f64> {
        if vars.len() != params.len() {
            return Err(Error::Config(
                "bound variables do not match the parameter store".into(),
            ));
        }
        let gs: Vec<Tensor<T>> = vars
            .iter()
            .zip(&params.values)
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect();
        let norm = gs
            .iter()
            .flat_map(|g| g.data().iter().map(|&x| Real::to_f64(x) * Real::to_f64(x)))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step: self.step as usize,
                detail: format!("non-finite gradient norm {norm}"),
            });
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let c = self.config;
        let base_lr = c.lr * c.schedule.factor(self.step as usize);
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let lr = T::from_f64(base_lr * bc2.sqrt() / bc1);
        let eps = T::from_f64(c.eps * bc2.sqrt());
        let s = T::from_f64(scale);
        for (i, g) in gs.iter().enumerate() {
            let (m, v, p) = (&mut self.m[i], &mut self.v[i], &mut params.values[i]);
            for (((pm, pv), pp), &pg) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(p.data_mut())
                .zip(g.data())
            {
                let gi = pg * s;
                *pm = b1 * *pm + (T::one() - b1) * gi;
                *pv = b2 * *pv + (T::one() - b2) * gi * gi;
                *pp = *pp - lr * *pm / (pv.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
