//! Operation tape for reverse-mode differentiation over the fixed op set.
//!
//! The forward pass records each op with the node ids it read and wrote;
//! `backward` replays the list in reverse, accumulating gradients additively
//! whenever a node or parameter feeds several consumers.

use super::matrix::{Matrix, Scalar};
use super::ops;
use crate::error::{Error, Result};

/// Index of a learnable parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter storage. Ids are stable, names are unique and used for
/// checkpoints and diagnostics.
#[derive(Clone, Debug)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix<T>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|m| m.cast()).collect(),
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }
}

/// Index of a value node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum TapeOp<T: Scalar> {
    Affine {
        x: NodeId,
        w: ParamId,
        b: ParamId,
        out: NodeId,
    },
    Relu {
        x: NodeId,
        out: NodeId,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        cache: ops::BnCache<T>,
        x: NodeId,
        out: NodeId,
    },
    Bilinear {
        x: NodeId,
        y: NodeId,
        mats: Vec<ParamId>,
        bias: ParamId,
        out: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
        widths: Vec<usize>,
        out: NodeId,
    },
}

/// Per-parameter gradients produced by [`OpTape::backward`]. Entries stay
/// `None` for parameters the recorded graph never touched.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    fn new(n: usize) -> Self {
        Gradients {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    /// Assembles gradients directly; used by optimizer tests.
    pub fn from_raw(grads: Vec<Option<Matrix<T>>>) -> Self {
        Gradients { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, id: ParamId, g: Matrix<T>) -> Result<()> {
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

pub struct OpTape<T: Scalar> {
    values: Vec<Matrix<T>>,
    ops: Vec<TapeOp<T>>,
}

impl<T: Scalar> Default for OpTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> OpTape<T> {
    pub fn new() -> Self {
        OpTape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    fn push_value(&mut self, m: Matrix<T>) -> NodeId {
        self.values.push(m);
        NodeId(self.values.len() - 1)
    }

    /// Registers an input (no producing op; receives no gradient).
    pub fn leaf(&mut self, m: Matrix<T>) -> NodeId {
        self.push_value(m)
    }

    pub fn affine(
        &mut self,
        params: &ParamSet<T>,
        x: NodeId,
        w: ParamId,
        b: ParamId,
    ) -> Result<NodeId> {
        let out = ops::affine_forward(self.value(x), params.value(w), params.value(b))?;
        let out = self.push_value(out);
        self.ops.push(TapeOp::Affine { x, w, b, out });
        Ok(out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = ops::relu_forward(self.value(x));
        let out = self.push_value(out);
        self.ops.push(TapeOp::Relu { x, out });
        out
    }

    pub fn batchnorm_train(
        &mut self,
        params: &ParamSet<T>,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        state: &mut ops::BnState<T>,
    ) -> Result<NodeId> {
        let (out, cache) = ops::batchnorm_train_forward(
            self.value(x),
            params.value(gamma),
            params.value(beta),
            state,
        )?;
        let out = self.push_value(out);
        self.ops.push(TapeOp::BatchNorm {
            gamma,
            beta,
            cache,
            x,
            out,
        });
        Ok(out)
    }

    pub fn bilinear(
        &mut self,
        params: &ParamSet<T>,
        x: NodeId,
        y: NodeId,
        mats: &[ParamId],
        bias: ParamId,
    ) -> Result<NodeId> {
        let mat_values: Vec<Matrix<T>> = mats.iter().map(|&id| params.value(id).clone()).collect();
        let out = ops::bilinear_forward(
            self.value(x),
            self.value(y),
            &mat_values,
            params.value(bias),
        )?;
        let out = self.push_value(out);
        self.ops.push(TapeOp::Bilinear {
            x,
            y,
            mats: mats.to_vec(),
            bias,
            out,
        });
        Ok(out)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let refs: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_forward(&refs)?;
        let out = self.push_value(out);
        self.ops.push(TapeOp::Concat {
            parts: parts.to_vec(),
            widths,
            out,
        });
        Ok(out)
    }

    /// Reverse replay from the seeded output gradients. Every recorded op is
    /// visited exactly once; fan-out gradients accumulate additively.
    pub fn backward(
        &self,
        params: &ParamSet<T>,
        seeds: Vec<(NodeId, Matrix<T>)>,
    ) -> Result<Gradients<T>> {
        let mut node_grads: Vec<Option<Matrix<T>>> = (0..self.values.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if g.shape() != self.value(id).shape() {
                return Err(Error::shape(
                    "backward seed",
                    self.value(id).shape(),
                    g.shape(),
                ));
            }
            match &mut node_grads[id.0] {
                Some(existing) => existing.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
        let mut grads = Gradients::new(params.len());

        let add_node =
            |slot: &mut Vec<Option<Matrix<T>>>, id: NodeId, g: Matrix<T>| -> Result<()> {
                match &mut slot[id.0] {
                    Some(existing) => existing.add_assign(&g),
                    empty => {
                        *empty = Some(g);
                        Ok(())
                    }
                }
            };

        for op in self.ops.iter().rev() {
            match op {
                TapeOp::Affine { x, w, b, out } => {
                    let Some(g) = node_grads[out.0].take() else {
                        continue;
                    };
                    let (dx, dw, db) = ops::affine_backward(self.value(*x), params.value(*w), &g)?;
                    add_node(&mut node_grads, *x, dx)?;
                    grads.accumulate(*w, dw)?;
                    grads.accumulate(*b, db)?;
                }
                TapeOp::Relu { x, out } => {
                    let Some(g) = node_grads[out.0].take() else {
                        continue;
                    };
                    let dx = ops::relu_backward(self.value(*x), &g);
                    add_node(&mut node_grads, *x, dx)?;
                }
                TapeOp::BatchNorm {
                    gamma,
                    beta,
                    cache,
                    x,
                    out,
                } => {
                    let Some(g) = node_grads[out.0].take() else {
                        continue;
                    };
                    let (dx, dgamma, dbeta) =
                        ops::batchnorm_backward(cache, params.value(*gamma), &g)?;
                    add_node(&mut node_grads, *x, dx)?;
                    grads.accumulate(*gamma, dgamma)?;
                    grads.accumulate(*beta, dbeta)?;
                }
                TapeOp::Bilinear {
                    x,
                    y,
                    mats,
                    bias,
                    out,
                } => {
                    let Some(g) = node_grads[out.0].take() else {
                        continue;
                    };
                    let mat_values: Vec<Matrix<T>> =
                        mats.iter().map(|&id| params.value(id).clone()).collect();
                    let (dx, dy, dmats, dbias) =
                        ops::bilinear_backward(self.value(*x), self.value(*y), &mat_values, &g)?;
                    add_node(&mut node_grads, *x, dx)?;
                    add_node(&mut node_grads, *y, dy)?;
                    for (&id, dm) in mats.iter().zip(dmats) {
                        grads.accumulate(id, dm)?;
                    }
                    grads.accumulate(*bias, dbias)?;
                }
                TapeOp::Concat { parts, widths, out } => {
                    let Some(g) = node_grads[out.0].take() else {
                        continue;
                    };
                    let part_grads = ops::concat_backward(widths, &g)?;
                    for (&p, pg) in parts.iter().zip(part_grads) {
                        add_node(&mut node_grads, p, pg)?;
                    }
                }
            }
        }
        Ok(grads)
    }
}
