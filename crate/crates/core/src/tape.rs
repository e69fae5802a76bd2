//! Linear record of kernel applications for reverse-mode differentiation.
//!
//! Modules build their forward pass against a [`Tape`]; every call evaluates
//! the kernel immediately and appends one node. [`Tape::backward`] replays
//! the nodes in reverse through [`ops::vjp_with_output`]. Only the registered
//! kernels can be recorded, so there is no general graph machinery here.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::ops::{self, Band, Conv2dSpec, FocalSpec, Op};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Source {
    Leaf,
    Param,
    Apply { op: Op, inputs: Vec<Var> },
}

struct Node {
    value: Tensor,
    source: Source,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Grads {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, materializing zeros when unreached.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    /// Parameter gradients keyed by name, for parameters the tape read.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.as_str(), self.grads[v.0].as_ref()))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            source: Source::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reads parameter `name` from `store`; repeated reads share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        self.nodes.push(Node {
            value,
            source: Source::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = ops::forward(&op, &values)?;
        self.nodes.push(Node {
            value,
            source: Source::Apply {
                op,
                inputs: inputs.to_vec(),
            },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as `output`).
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Grads> {
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Source::Apply { op, inputs } = &self.nodes[i].source {
                let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let parts = ops::vjp_with_output(op, &values, &self.nodes[i].value, &g)?;
                for (v, part) in inputs.iter().zip(parts) {
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&part),
                        slot => *slot = Some(part),
                    }
                }
            }
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Grads {
            grads,
            params: self.params.clone(),
        })
    }

    /// Gradients of a one-element output.
    pub fn backward(&self, output: Var) -> Result<Grads> {
        let shape = self.value(output).shape().to_vec();
        self.backward_with(output, Tensor::ones(&shape))
    }

    // Thin wrappers so module code reads as arithmetic.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Maximum, &[a, b])
    }
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Minimum, &[a, b])
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[x])
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::AddScalar(c), &[x])
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Abs, &[x])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[x])
    }
    pub fn logit(&mut self, x: Var, bound: f64) -> Result<Var> {
        self.apply(Op::Logit { bound }, &[x])
    }
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[x])
    }
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul, &[a, b])
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Op::Permute(perm.to_vec()), &[x])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[x])
    }
    pub fn index_select(&mut self, x: Var, axis: usize, indices: Vec<usize>) -> Result<Var> {
        self.apply(Op::IndexSelect { axis, indices }, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SumAll, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::SumAxis { axis }, &[x])
    }
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::MeanPool, &[x])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        self.apply(Op::Conv2d(spec), &[x, w])
    }
    pub fn pad_replicate(&mut self, x: Var, pad: usize) -> Result<Var> {
        self.apply(Op::PadReplicate { pad }, &[x])
    }
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::UpsampleNearest2x, &[x])
    }
    pub fn haar_band(&mut self, x: Var, band: Band) -> Result<Var> {
        self.apply(Op::HaarBand(band), &[x])
    }
    pub fn bilinear_sample(&mut self, x: Var, points: Var) -> Result<Var> {
        self.apply(Op::BilinearSample, &[x, points])
    }
    pub fn orientation_energy(&mut self, gx: Var, gy: Var, eps: f64) -> Result<Var> {
        self.apply(Op::OrientationEnergy { eps }, &[gx, gy])
    }
    pub fn sigmoid_focal(&mut self, logits: Var, spec: FocalSpec) -> Result<Var> {
        self.apply(Op::SigmoidFocal(spec), &[logits])
    }
}
