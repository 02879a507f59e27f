//! Named parameter storage and the Adam update.

use std::collections::HashMap;

use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

struct Entry {
    name: String,
    tensor: Tensor,
    /// First and second moment estimates; empty for buffers.
    m: Vec<f64>,
    v: Vec<f64>,
    trainable: bool,
}

/// Insertion-ordered set of named tensors plus Adam state.
///
/// Trainable entries participate in [`ParameterStore::adam_step`]; buffers
/// (normalization running statistics) are carried along, checkpointed, and
/// updated only through [`ParameterStore::blend_buffer`]. The step counter
/// is shared by all parameters of the store.
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    pub learning_rate: f64,
    step_count: u64,
}

impl ParameterStore {
    pub fn new(learning_rate: f64) -> Self {
        ParameterStore {
            entries: Vec::new(),
            index: HashMap::new(),
            learning_rate,
            step_count: 0,
        }
    }

    fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<(), TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::Invalid(format!("duplicate parameter {name}")));
        }
        let n = tensor.len();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            m: if trainable { vec![0.0; n] } else { Vec::new() },
            v: if trainable { vec![0.0; n] } else { Vec::new() },
            trainable,
        });
        Ok(())
    }

    pub fn add_parameter(&mut self, name: &str, tensor: Tensor) -> Result<(), TensorError> {
        self.insert(name, tensor, true)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor) -> Result<(), TensorError> {
        self.insert(name, tensor, false)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// (name, tensor, trainable) triples in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor, e.trainable))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Overwrite one entry's data; shape must match.
    pub fn set_data(&mut self, name: &str, data: &[f64]) -> Result<(), TensorError> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter {name}")))?;
        let t = &mut self.entries[i].tensor;
        if t.len() != data.len() {
            return Err(TensorError::BadShape(format!(
                "set_data {name}: {} values vs {}",
                data.len(),
                t.len()
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Exponential moving average update for a buffer:
    /// `buf = (1-momentum)·buf + momentum·value`.
    pub fn blend_buffer(
        &mut self,
        name: &str,
        value: &[f64],
        momentum: f64,
    ) -> Result<(), TensorError> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown buffer {name}")))?;
        let e = &mut self.entries[i];
        if e.trainable {
            return Err(TensorError::Invalid(format!("{name} is not a buffer")));
        }
        if e.tensor.len() != value.len() {
            return Err(TensorError::BadShape(format!("blend_buffer {name}: length mismatch")));
        }
        for (b, &x) in e.tensor.data_mut().iter_mut().zip(value) {
            *b = (1.0 - momentum) * *b + momentum * x;
        }
        Ok(())
    }

    /// Nudge one scalar coordinate (used by the finite-difference checker).
    pub fn nudge(&mut self, name: &str, idx: usize, delta: f64) -> Result<(), TensorError> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter {name}")))?;
        self.entries[i].tensor.data_mut()[idx] += delta;
        Ok(())
    }

    /// Insert every entry into a graph. Trainable entries become
    /// differentiable leaves when `for_training`, constants otherwise;
    /// buffers are always constants.
    pub fn bind(&self, g: &mut Graph, for_training: bool) -> Bound {
        let mut ids = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let id = if e.trainable && for_training {
                g.parameter(e.tensor.clone())
            } else {
                g.constant(e.tensor.clone())
            };
            ids.insert(e.name.clone(), id);
        }
        Bound { ids }
    }

    /// One bias-corrected Adam step over all trainable entries.
    /// Missing gradients are treated as zero (unreached parameters).
    pub fn adam_step(&mut self, grads: &Gradients) -> Result<(), TensorError> {
        for (name, g) in &grads.by_name {
            match self.index.get(name) {
                Some(&i) => {
                    let e = &self.entries[i];
                    if !e.trainable {
                        return Err(TensorError::Invalid(format!(
                            "gradient supplied for non-trainable {name}"
                        )));
                    }
                    if e.tensor.len() != g.len() {
                        return Err(TensorError::BadShape(format!(
                            "gradient for {name}: {} values vs parameter {}",
                            g.len(),
                            e.tensor.len()
                        )));
                    }
                }
                None => {
                    return Err(TensorError::Invalid(format!(
                        "gradient supplied for unknown parameter {name}"
                    )))
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        let lr = self.learning_rate;
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let zero;
            let g = match grads.by_name.get(&e.name) {
                Some(g) => g.as_slice(),
                None => {
                    zero = vec![0.0; e.tensor.len()];
                    zero.as_slice()
                }
            };
            let data = e.tensor.data_mut();
            for i in 0..data.len() {
                e.m[i] = ADAM_BETA1 * e.m[i] + (1.0 - ADAM_BETA1) * g[i];
                e.v[i] = ADAM_BETA2 * e.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = e.m[i] / bc1;
                let v_hat = e.v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// FNV-1a hash over names and value bits; detects any mutation.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for e in &self.entries {
            for b in e.name.as_bytes() {
                eat(*b);
            }
            for v in e.tensor.data() {
                for b in v.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

/// Name → graph node mapping produced by [`ParameterStore::bind`].
pub struct Bound {
    ids: HashMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    /// Node for a name that is known to exist (model-internal wiring).
    pub fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Gradients keyed by parameter name.
#[derive(Default, Debug, Clone)]
pub struct Gradients {
    by_name: HashMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, grad: Vec<f64>) {
        self.by_name.insert(name.to_string(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.by_name.get(name).map(|v| v.as_slice())
    }

    /// Collect gradients for every trainable parameter after a backward
    /// pass. Parameters the loss did not reach get zeros.
    pub fn from_graph(g: &Graph, bound: &Bound, store: &ParameterStore) -> Self {
        let mut out = Gradients::new();
        for (name, tensor, trainable) in store.iter() {
            if !trainable {
                continue;
            }
            let grad = bound
                .get(name)
                .and_then(|id| g.grad(id).map(|s| s.to_vec()))
                .unwrap_or_else(|| vec![0.0; tensor.len()]);
            out.insert(name, grad);
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64, lr: f64) -> ParameterStore {
        let mut s = ParameterStore::new(lr);
        s.add_parameter("w", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = scalar_store(0.75, 0.01);
        let before = s.get("w").unwrap().data().to_vec();
        let mut g = Gradients::new();
        g.insert("w", vec![0.0]);
        for _ in 0..5 {
            s.adam_step(&g).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data(), before.as_slice());
    }

    #[test]
    fn first_step_magnitude_follows_learning_rate() {
        // With m = v = 0 and constant gradient g, the first bias-corrected
        // update is lr·g/(|g| + eps') ≈ lr·sign(g).
        for &gval in &[3.0, -0.004, 1e6] {
            let mut s = scalar_store(1.0, 0.001);
            let mut g = Gradients::new();
            g.insert("w", vec![gval]);
            s.adam_step(&g).unwrap();
            let delta = 1.0 - s.get("w").unwrap().item();
            assert!((delta.abs() - 0.001).abs() < 1e-6, "delta {delta}");
            assert_eq!(delta.signum(), gval.signum());
        }
    }

    #[test]
    fn matches_scalar_recurrence_oracle() {
        // Independent textbook recurrence, kept deliberately separate from
        // the implementation above.
        let grads = [0.3, -1.2, 0.05, 0.9, -0.4, 0.0, 2.2, -0.7, 0.13, 1.0];
        let lr = 0.01;
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 0.5f64);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= lr * mh / (vh.sqrt() + 1e-8);
        }

        let mut s = scalar_store(0.5, lr);
        for &gv in &grads {
            let mut g = Gradients::new();
            g.insert("w", vec![gv]);
            s.adam_step(&g).unwrap();
        }
        assert!((s.get("w").unwrap().item() - theta).abs() < 1e-12);
        assert_eq!(s.step_count(), 10);
    }

    #[test]
    fn zero_learning_rate_is_bitwise_identity() {
        let mut s = ParameterStore::new(0.0);
        s.add_parameter("w", Tensor::vector(vec![0.1, -2.5, 3.33])).unwrap();
        let before: Vec<u64> = s.get("w").unwrap().data().iter().map(|x| x.to_bits()).collect();
        let mut g = Gradients::new();
        g.insert("w", vec![1.0, -2.0, 0.5]);
        s.adam_step(&g).unwrap();
        let after: Vec<u64> = s.get("w").unwrap().data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = scalar_store(0.0, 0.1);
        let mut g = Gradients::new();
        g.insert("w", vec![1.0, 2.0]);
        assert!(s.adam_step(&g).is_err());
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParameterStore::new(0.1);
        s.add_parameter("w", Tensor::scalar(0.0)).unwrap();
        assert!(s.add_parameter("w", Tensor::scalar(1.0)).is_err());
    }
}
