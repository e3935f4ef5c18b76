//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Tape`] appends a node holding its forward value and,
//! when any input needs a gradient, a closure computing the vector-Jacobian
//! product for its inputs. [`Tape::backward`] replays the nodes in exact
//! reverse recording order.
//!
//! ```
//! use trigen_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Inputs handed to a backward closure.
pub struct BackwardArgs<'a> {
    /// Gradient of the root with respect to this node's output.
    pub grad: &'a Tensor,
    /// Forward values of the node's inputs, in recording order.
    pub inputs: Vec<&'a Tensor>,
    /// Forward value of the node itself.
    pub output: &'a Tensor,
    /// Which inputs require a gradient.
    pub needs: &'a [bool],
}

impl BackwardArgs<'_> {
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Single-owner recording of a computation graph.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(NumError::ForeignVar);
        }
        Ok(v.index)
    }

    /// Forward value of `v`.
    ///
    /// Panics if `v` was recorded on another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.index].op
    }

    /// Records a custom operation.
    ///
    /// The closure receives the upstream gradient plus the forward values and
    /// must return one entry per input (`None` for inputs it does not need to
    /// differentiate). It is dropped without being called when no input
    /// requires a gradient.
    pub fn record<F>(&mut self, op: &'static str, value: Tensor, inputs: &[Var], backward: F) -> Result<Var>
    where
        F: Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        value.ensure_finite(op)?;
        let mut parents = Vec::with_capacity(inputs.len());
        for &v in inputs {
            parents.push(self.check(v)?);
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Back-propagates from a single-element root.
    ///
    /// A tape can run backward once; a second call returns
    /// [`NumError::BackwardConsumed`].
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        self.backward_with(root, None)
    }

    /// Back-propagates from `root` seeded with an explicit upstream gradient
    /// of the same shape as the root (a vector-Jacobian product).
    pub fn backward_seeded(&mut self, root: Var, seed: Tensor) -> Result<Gradients> {
        self.backward_with(root, Some(seed))
    }

    fn backward_with(&mut self, root: Var, seed: Option<Tensor>) -> Result<Gradients> {
        if self.consumed {
            return Err(NumError::BackwardConsumed);
        }
        let r = self.check(root)?;
        let root_shape = self.nodes[r].value.shape().to_vec();
        let seed = match seed {
            Some(s) => {
                if s.shape() != root_shape.as_slice() {
                    return Err(NumError::ShapeMismatch {
                        op: "backward",
                        lhs: root_shape,
                        rhs: s.shape().to_vec(),
                    });
                }
                s
            }
            None => {
                if self.nodes[r].value.numel() != 1 {
                    return Err(NumError::NonScalarRoot(root_shape));
                }
                Tensor::ones(&root_shape)
            }
        };
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[r] = Some(seed);
        for i in (0..=r).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].as_ref() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let args = BackwardArgs {
                grad: g,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: &needs,
            };
            let input_grads = backward(&args);
            debug_assert_eq!(input_grads.len(), node.parents.len(), "op {}", node.op);
            for (k, ig) in input_grads.into_iter().enumerate() {
                let p = node.parents[k];
                let Some(ig) = ig else { continue };
                if !needs[k] {
                    continue;
                }
                debug_assert_eq!(
                    ig.shape(),
                    self.nodes[p].value.shape(),
                    "gradient shape from op {}",
                    node.op
                );
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

/// Result of a backward pass.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.tape, "variable belongs to a different tape");
        self.grads[v.index].as_ref()
    }

    /// Gradient of `v`, exactly zero when `v` did not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.index]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "variable belongs to a different tape");
        self.grads[v.index]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.index]))
    }
}
