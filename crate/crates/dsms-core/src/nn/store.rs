//! Named parameter tensors and the Adam optimizer state that rides along
//! with them.

use std::collections::BTreeMap;

use rand::Rng;

use super::tape::Gradients;
use super::NnError;

/// Dense tensor: a shape and a flat row-major value array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} implies {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform init on `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_uniform<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameter tensors plus per-parameter optimizer moments.
///
/// Names are unique by construction (map keys) and shapes never change
/// after insertion. Iteration order is the sorted name order, which keeps
/// every downstream traversal deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), NnError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NnError::DuplicateParameter(name));
        }
        let len = tensor.len();
        self.params.insert(name.clone(), tensor);
        self.moments.insert(
            name,
            Moments {
                m: vec![0.0; len],
                v: vec![0.0; len],
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter store: missing tensor {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn optimizer_step(&self) -> u64 {
        self.step
    }

    /// One Adam step with bias correction. Parameters without a gradient
    /// entry are treated as having gradient zero, so a disconnected
    /// parameter's moments decay but a fresh one never moves.
    #[allow(clippy::needless_range_loop)] // four parallel arrays share the index
    pub fn adam_update(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<(), NnError> {
        for (name, grad) in grads.iter() {
            match self.params.get(name) {
                None => return Err(NnError::UnknownParameter(name.to_string())),
                Some(t) if t.len() != grad.len() => {
                    return Err(NnError::Shape(format!(
                        "gradient for {name} has {} values, parameter has {}",
                        grad.len(),
                        t.len()
                    )))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - cfg.beta1.powf(t);
        let bias2 = 1.0 - cfg.beta2.powf(t);
        for (name, tensor) in self.params.iter_mut() {
            let zero;
            let grad = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = vec![0.0; tensor.len()];
                    &zero
                }
            };
            let moments = self.moments.get_mut(name).expect("moments missing");
            for i in 0..tensor.len() {
                let g = grad[i];
                moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
                moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = moments.m[i] / bias1;
                let v_hat = moments.v[i] / bias2;
                tensor.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Polyak blend toward `online`: `self = (1 - rate) * self + rate * online`.
    pub fn blend_from(&mut self, online: &ParameterStore, rate: f64) -> Result<(), NnError> {
        if self.params.len() != online.params.len() {
            return Err(NnError::Shape(format!(
                "stores hold {} vs {} parameters",
                self.params.len(),
                online.params.len()
            )));
        }
        for (name, tensor) in self.params.iter_mut() {
            let src = online
                .params
                .get(name)
                .ok_or_else(|| NnError::UnknownParameter(name.clone()))?;
            if src.len() != tensor.len() {
                return Err(NnError::Shape(format!("layout mismatch at {name}")));
            }
            for (dst, s) in tensor.data.iter_mut().zip(&src.data) {
                *dst = (1.0 - rate) * *dst + rate * s;
            }
        }
        Ok(())
    }

    /// Snapshot with the same parameters and fresh (zero) optimizer state.
    pub fn target_copy(&self) -> ParameterStore {
        let mut copy = ParameterStore::new();
        for (name, tensor) in &self.params {
            copy.insert(name.clone(), tensor.clone()).expect("unique");
        }
        copy
    }

    /// Overwrite a parameter's values in place; the shape must match.
    pub fn set_data(&mut self, name: &str, data: Vec<f64>) -> Result<(), NnError> {
        let tensor = self
            .params
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))?;
        if data.len() != tensor.len() {
            return Err(NnError::Shape(format!(
                "{name}: {} values cannot fill shape {:?}",
                data.len(),
                tensor.shape
            )));
        }
        tensor.data = data;
        Ok(())
    }

    pub(crate) fn export_moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.moments
            .iter()
            .map(|(k, m)| (k.as_str(), m.m.as_slice(), m.v.as_slice()))
    }

    pub(crate) fn restore_moments(
        &mut self,
        name: &str,
        m: Vec<f64>,
        v: Vec<f64>,
        step: u64,
    ) -> Result<(), NnError> {
        let tensor = self
            .params
            .get(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))?;
        if m.len() != tensor.len() || v.len() != tensor.len() {
            return Err(NnError::Shape(format!("moment layout mismatch at {name}")));
        }
        self.moments.insert(name.to_string(), Moments { m, v });
        self.step = step;
        Ok(())
    }
}
