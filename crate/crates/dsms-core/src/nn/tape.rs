//! Reverse-mode computation trace.
//!
//! A [`Tape`] records every primitive as it executes; node ids are handed
//! back to the caller and creation order doubles as a topological order.
//! [`Tape::backward`] walks the record once in reverse, accumulating
//! adjoints, and returns gradients keyed by parameter name.
//!
//! Every forward value is checked for finiteness when it is produced; a
//! NaN or infinity aborts with the offending op named, which is the
//! cheapest possible way to localize a divergence.

use std::collections::BTreeMap;

use crate::codec;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Gradients keyed by parameter name, in the parameter store layout.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Elementwise `self += other`, used to fold per-sample gradients into
    /// a batch total in a fixed order.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, grad) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grad) {
                        *a += g;
                    }
                }
                None => {
                    self.map.insert(name.clone(), grad.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for grad in self.map.values_mut() {
            for g in grad.iter_mut() {
                *g *= factor;
            }
        }
    }

    /// Global L2 norm across every entry.
    pub fn l2_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|v| v.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    /// Data leaf: inputs, targets, frozen parameters. No gradient is kept.
    Constant,
    /// Trainable leaf; backward reports its adjoint under this name.
    Param(String),
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatVec { rows: usize, cols: usize },
    Concat,
    Slice { start: usize },
    Sum,
    Mean,
    Dot,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    SoftCeil,
    DftForward,
    ClipSpectrum,
    IdftReconstruct { original_len: usize },
}

struct Node {
    op: Op,
    inputs: Vec<ValueId>,
    value: Vec<f64>,
}

/// Recorded forward computation, replayable in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a recorded node.
    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: ValueId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "tape: node is not a scalar");
        v[0]
    }

    fn push(&mut self, op: Op, inputs: Vec<ValueId>, value: Vec<f64>) -> ValueId {
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            panic!("tape: non-finite value {bad} produced by {op:?}");
        }
        self.nodes.push(Node { op, inputs, value });
        ValueId(self.nodes.len() - 1)
    }

    /// Record a data leaf (input, target, frozen parameter).
    pub fn constant(&mut self, value: Vec<f64>) -> ValueId {
        self.push(Op::Constant, vec![], value)
    }

    pub fn constant_scalar(&mut self, value: f64) -> ValueId {
        self.constant(vec![value])
    }

    /// Record a trainable leaf. `backward` reports d(loss)/d(leaf) under
    /// `name`, matching the parameter store layout.
    pub fn param(&mut self, name: impl Into<String>, value: Vec<f64>) -> ValueId {
        self.push(Op::Param(name.into()), vec![], value)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "tape add: length mismatch");
        let value = va.iter().zip(vb).map(|(x, y)| x + y).collect();
        self.push(Op::Add, vec![a, b], value)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "tape sub: length mismatch");
        let value = va.iter().zip(vb).map(|(x, y)| x - y).collect();
        self.push(Op::Sub, vec![a, b], value)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "tape mul: length mismatch");
        let value = va.iter().zip(vb).map(|(x, y)| x * y).collect();
        self.push(Op::Mul, vec![a, b], value)
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> ValueId {
        let value = self.value(a).iter().map(|x| x * factor).collect();
        self.push(Op::Scale(factor), vec![a], value)
    }

    /// `m * v` for a row-major `rows x cols` matrix leaf.
    pub fn matvec(&mut self, m: ValueId, v: ValueId, rows: usize, cols: usize) -> ValueId {
        let (vm, vv) = (self.value(m), self.value(v));
        assert_eq!(vm.len(), rows * cols, "tape matvec: matrix shape mismatch");
        assert_eq!(vv.len(), cols, "tape matvec: vector length mismatch");
        let mut out = vec![0.0; rows];
        for (r, slot) in out.iter_mut().enumerate() {
            let row = &vm[r * cols..(r + 1) * cols];
            *slot = row.iter().zip(vv).map(|(a, b)| a * b).sum();
        }
        self.push(Op::MatVec { rows, cols }, vec![m, v], out)
    }

    pub fn concat(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty(), "tape concat: no inputs");
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        self.push(Op::Concat, parts.to_vec(), value)
    }

    pub fn slice(&mut self, a: ValueId, start: usize, len: usize) -> ValueId {
        let va = self.value(a);
        assert!(start + len <= va.len(), "tape slice: out of range");
        let value = va[start..start + len].to_vec();
        self.push(Op::Slice { start }, vec![a], value)
    }

    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let value = vec![self.value(a).iter().sum()];
        self.push(Op::Sum, vec![a], value)
    }

    pub fn mean(&mut self, a: ValueId) -> ValueId {
        let va = self.value(a);
        let value = vec![va.iter().sum::<f64>() / va.len() as f64];
        self.push(Op::Mean, vec![a], value)
    }

    pub fn dot(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "tape dot: length mismatch");
        let value = vec![va.iter().zip(vb).map(|(x, y)| x * y).sum()];
        self.push(Op::Dot, vec![a, b], value)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu, vec![a], value)
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh, vec![a], value)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let value = self
            .value(a)
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(Op::Sigmoid, vec![a], value)
    }

    pub fn activation(&mut self, a: ValueId, act: Activation) -> ValueId {
        match act {
            Activation::Linear => a,
            Activation::Relu => self.relu(a),
            Activation::Tanh => self.tanh(a),
            Activation::Sigmoid => self.sigmoid(a),
        }
    }

    /// Numerically stable softmax (max subtracted before exponentiation).
    pub fn softmax(&mut self, a: ValueId) -> ValueId {
        let value = crate::scheduler::softmax(self.value(a));
        self.push(Op::Softmax, vec![a], value)
    }

    /// Straight-through ceiling: forward `ceil(x)`, backward identity.
    pub fn soft_ceil(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).iter().map(|x| x.ceil()).collect();
        self.push(Op::SoftCeil, vec![a], value)
    }

    /// One-sided DFT of a real vector, interleaved `(re, im)` output of
    /// length `2 * (floor(p/2) + 1)`.
    pub fn dft_forward(&mut self, a: ValueId) -> ValueId {
        let coeffs = codec::dft_forward_slice(self.value(a));
        let mut value = Vec::with_capacity(2 * coeffs.len());
        for c in coeffs {
            value.push(c.re);
            value.push(c.im);
        }
        self.push(Op::DftForward, vec![a], value)
    }

    /// Keep the first `keep` complex coefficients of an interleaved
    /// spectrum. Dropped coefficients receive zero gradient.
    pub fn clip_spectrum(&mut self, a: ValueId, keep: usize) -> ValueId {
        let va = self.value(a);
        assert!(2 * keep <= va.len(), "tape clip: keep exceeds spectrum");
        assert!(keep >= 1, "tape clip: must keep at least one coefficient");
        let value = va[..2 * keep].to_vec();
        self.push(Op::ClipSpectrum, vec![a], value)
    }

    /// Inverse transform of an interleaved clipped spectrum back to
    /// `original_len` real samples.
    pub fn idft_reconstruct(&mut self, a: ValueId, original_len: usize) -> ValueId {
        let va = self.value(a);
        assert!(va.len().is_multiple_of(2), "tape idft: odd interleaved length");
        assert!(
            va.len() / 2 <= codec::one_sided_len(original_len),
            "tape idft: more coefficients than the one-sided spectrum"
        );
        let value = codec::idft_reconstruct_slice(va, original_len);
        self.push(Op::IdftReconstruct { original_len }, vec![a], value)
    }

    /// Reverse pass from a scalar loss. Visits each node exactly once in
    /// reverse creation order (a valid reverse topological order) and
    /// returns the adjoints of every `param` leaf. Parameters that the
    /// loss does not reach are simply absent, which callers treat as zero.
    pub fn backward(&self, loss: ValueId) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "tape backward: loss must be scalar"
        );
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(vec![1.0]);

        let mut grads = Gradients::default();
        for idx in (0..self.nodes.len()).rev() {
            let Some(upstream) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => match grads.map.get_mut(name) {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&upstream) {
                            *a += g;
                        }
                    }
                    None => {
                        grads.map.insert(name.clone(), upstream);
                    }
                },
                Op::Add => {
                    self.bump(&mut adjoints, node.inputs[0], &upstream);
                    self.bump(&mut adjoints, node.inputs[1], &upstream);
                }
                Op::Sub => {
                    self.bump(&mut adjoints, node.inputs[0], &upstream);
                    let neg: Vec<f64> = upstream.iter().map(|g| -g).collect();
                    self.bump(&mut adjoints, node.inputs[1], &neg);
                }
                Op::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let da: Vec<f64> = upstream
                        .iter()
                        .zip(self.value(b))
                        .map(|(g, y)| g * y)
                        .collect();
                    let db: Vec<f64> = upstream
                        .iter()
                        .zip(self.value(a))
                        .map(|(g, x)| g * x)
                        .collect();
                    self.bump(&mut adjoints, a, &da);
                    self.bump(&mut adjoints, b, &db);
                }
                Op::Scale(factor) => {
                    let da: Vec<f64> = upstream.iter().map(|g| g * factor).collect();
                    self.bump(&mut adjoints, node.inputs[0], &da);
                }
                Op::MatVec { rows, cols } => {
                    let (m, v) = (node.inputs[0], node.inputs[1]);
                    let (vm, vv) = (self.value(m), self.value(v));
                    let mut dm = vec![0.0; rows * cols];
                    let mut dv = vec![0.0; *cols];
                    for r in 0..*rows {
                        let g = upstream[r];
                        for c in 0..*cols {
                            dm[r * cols + c] += g * vv[c];
                            dv[c] += g * vm[r * cols + c];
                        }
                    }
                    self.bump(&mut adjoints, m, &dm);
                    self.bump(&mut adjoints, v, &dv);
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &input in &node.inputs {
                        let len = self.value(input).len();
                        self.bump(&mut adjoints, input, &upstream[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Slice { start } => {
                    let input = node.inputs[0];
                    let mut da = vec![0.0; self.value(input).len()];
                    da[*start..*start + upstream.len()].copy_from_slice(&upstream);
                    self.bump(&mut adjoints, input, &da);
                }
                Op::Sum => {
                    let input = node.inputs[0];
                    let da = vec![upstream[0]; self.value(input).len()];
                    self.bump(&mut adjoints, input, &da);
                }
                Op::Mean => {
                    let input = node.inputs[0];
                    let len = self.value(input).len();
                    let da = vec![upstream[0] / len as f64; len];
                    self.bump(&mut adjoints, input, &da);
                }
                Op::Dot => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let g = upstream[0];
                    let da: Vec<f64> = self.value(b).iter().map(|y| g * y).collect();
                    let db: Vec<f64> = self.value(a).iter().map(|x| g * x).collect();
                    self.bump(&mut adjoints, a, &da);
                    self.bump(&mut adjoints, b, &db);
                }
                Op::Relu => {
                    let input = node.inputs[0];
                    let da: Vec<f64> = upstream
                        .iter()
                        .zip(self.value(input))
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.bump(&mut adjoints, input, &da);
                }
                Op::Tanh => {
                    let da: Vec<f64> = upstream
                        .iter()
                        .zip(&node.value)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    self.bump(&mut adjoints, node.inputs[0], &da);
                }
                Op::Sigmoid => {
                    let da: Vec<f64> = upstream
                        .iter()
                        .zip(&node.value)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    self.bump(&mut adjoints, node.inputs[0], &da);
                }
                Op::Softmax => {
                    // dx_i = y_i * (g_i - sum_j g_j y_j)
                    let y = &node.value;
                    let inner: f64 = upstream.iter().zip(y).map(|(g, yi)| g * yi).sum();
                    let da: Vec<f64> = upstream
                        .iter()
                        .zip(y)
                        .map(|(g, yi)| yi * (g - inner))
                        .collect();
                    self.bump(&mut adjoints, node.inputs[0], &da);
                }
                Op::SoftCeil => {
                    // Straight-through: the ceiling is treated as identity.
                    self.bump(&mut adjoints, node.inputs[0], &upstream);
                }
                Op::DftForward => {
                    let input = node.inputs[0];
                    let p = self.value(input).len();
                    let da = codec::dft_forward_adjoint(&upstream, p);
                    self.bump(&mut adjoints, input, &da);
                }
                Op::ClipSpectrum => {
                    let input = node.inputs[0];
                    let mut da = vec![0.0; self.value(input).len()];
                    da[..upstream.len()].copy_from_slice(&upstream);
                    self.bump(&mut adjoints, input, &da);
                }
                Op::IdftReconstruct { original_len } => {
                    let input = node.inputs[0];
                    let k = self.value(input).len() / 2;
                    let da = codec::idft_reconstruct_adjoint(&upstream, k, *original_len);
                    self.bump(&mut adjoints, input, &da);
                }
            }
        }
        grads
    }

    fn bump(&self, adjoints: &mut [Option<Vec<f64>>], target: ValueId, delta: &[f64]) {
        match &mut adjoints[target.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }
}
