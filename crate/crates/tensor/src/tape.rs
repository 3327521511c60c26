//! Define-by-run gradient tape.
//!
//! Every differentiable op checks whether any of its inputs is tracked. If
//! none is, the op just returns an untracked value and records nothing; this
//! is what keeps a frozen network completely off the tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{DType, Tensor};

/// Maps the output gradient of a node to one optional gradient per input.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
    len: usize,
}

/// A value produced during a forward pass, optionally linked to a tape node.
#[derive(Clone)]
pub struct Var {
    value: Arc<Tensor>,
    node: Option<usize>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node)
            .finish()
    }
}

impl Var {
    /// An untracked value.
    pub fn constant(value: Tensor) -> Self {
        Var {
            value: Arc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn dtype(&self) -> DType {
        self.value.dtype()
    }

    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<usize> {
        self.node
    }

    pub fn into_tensor(self) -> Tensor {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }
}

impl From<Tensor> for Var {
    fn from(t: Tensor) -> Self {
        Var::constant(t)
    }
}

/// Ordered record of differentiable operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaves: RefCell<HashMap<ParamId, Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes (parameter leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of parameter leaves on the tape.
    pub fn leaf_count(&self) -> usize {
        self.leaves.borrow().len()
    }

    /// Whether the named parameter has a leaf node on this tape.
    pub fn has_leaf(&self, id: ParamId) -> bool {
        self.leaves.borrow().contains_key(&id)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        Var::constant(t)
    }

    /// Reads a parameter into the forward pass. Frozen parameters come back as
    /// untracked constants; trainable ones get (at most) one leaf node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        if p.frozen() {
            return Var {
                value: p.shared(),
                node: None,
            };
        }
        if let Some(v) = self.leaves.borrow().get(&id) {
            return v.clone();
        }
        let value = p.shared();
        let node = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                inputs: Vec::new(),
                backward: None,
                param: Some(id),
                len: value.len(),
            });
            nodes.len() - 1
        };
        let v = Var {
            value,
            node: Some(node),
        };
        self.leaves.borrow_mut().insert(id, v.clone());
        v
    }

    /// Whether each input is tracked, or `None` if no input is.
    pub(crate) fn needs(inputs: &[&Var]) -> Option<Vec<bool>> {
        let needs: Vec<bool> = inputs.iter().map(|v| v.tracked()).collect();
        needs.iter().any(|&n| n).then_some(needs)
    }

    /// Records an op whose output is `value`. Callers must have checked
    /// [`Tape::needs`] first so that untracked work is never recorded.
    pub(crate) fn record(&self, value: Tensor, inputs: &[&Var], backward: BackwardFn) -> Var {
        let len = value.len();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: inputs.iter().map(|v| v.node()).collect(),
            backward: Some(backward),
            param: None,
            len,
        });
        Var {
            value: Arc::new(value),
            node: Some(nodes.len() - 1),
        }
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to the store's
    /// buffers (so repeated calls accumulate); every trainable parameter ends
    /// up with a buffer, zero if the loss does not depend on it.
    pub fn backward(&self, loss: &Var, store: &mut ParamStore) -> Result<()> {
        if loss.value().len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        store.ensure_grads();
        let Some(root) = loss.node() else {
            return Ok(());
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            debug_assert_eq!(g.len(), node.len);
            if let Some(id) = node.param {
                store.accumulate_grad(id, &g);
                continue;
            }
            let Some(backward) = &node.backward else { continue };
            let input_grads = backward(&g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(j), Some(ig)) = (slot, ig) else { continue };
                debug_assert!(*j < i, "tape is not topologically ordered");
                match &mut grads[*j] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&ig) {
                            *a += b;
                        }
                    }
                    empty => *empty = Some(ig),
                }
            }
        }
        Ok(())
    }
}
