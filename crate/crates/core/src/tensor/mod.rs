//! Reverse-mode automatic differentiation over `f64` n-d arrays.
//!
//! A [`Tape`] records every operation; [`Tensor`] is a cheap handle into it.
//! Tapes are built per forward pass and dropped afterwards. Everything is
//! single-threaded and deterministic: node ids are creation-ordered, which is
//! also a valid topological order for the backward sweep.

mod conv;
mod ops;

pub mod check;

pub use conv::{avg_pool2d_arr, upsample_nearest_arr};
pub use ops::stable_sigmoid;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

/// Dense `f64` array with dynamic rank, the only value type on the tape.
pub type Arr = ArrayD<f64>;

type GradFn = Box<dyn Fn(&Arr) -> Vec<Option<Arr>>>;

struct Node {
    value: Arr,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
}

/// Recording tape for one forward pass.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that does not require gradients.
    pub fn constant(&self, value: Arr) -> Tensor {
        self.push(value, Vec::new(), None, false)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.constant(Arr::from_elem(IxDyn(&[]), value))
    }

    /// A leaf that accumulates gradients (model parameter or checked input).
    pub fn leaf(&self, value: Arr) -> Tensor {
        self.push(value, Vec::new(), None, true)
    }

    fn push(
        &self,
        value: Arr,
        parents: Vec<usize>,
        grad_fn: Option<GradFn>,
        needs_grad: bool,
    ) -> Tensor {
        let mut nodes = self.inner.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            grad_fn,
            needs_grad,
        });
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.inner.borrow()[id].needs_grad
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl Tensor {
    /// Node id, unique per tape and stable across the pass. Used by tests
    /// that check two consumers received the *same* activation.
    pub fn node_id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.inner.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Arr {
        self.tape.inner.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Arr) -> R) -> R {
        f(&self.tape.inner.borrow()[self.id].value)
    }

    /// Scalar value of a 0-d (or single-element) tensor.
    pub fn scalar_value(&self) -> f64 {
        self.with_value(|v| {
            debug_assert_eq!(v.len(), 1);
            v.sum()
        })
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        self.tape.constant(self.value())
    }
}

/// Gradients of one scalar root with respect to every grad-requiring leaf.
pub struct Gradients {
    grads: HashMap<usize, Arr>,
}

impl Gradients {
    pub fn wrt(&self, t: &Tensor) -> Option<&Arr> {
        self.grads.get(&t.id)
    }

    /// Global L2 norm over the given leaves; absent gradients count as zero.
    pub fn global_norm(&self, leaves: &[Tensor]) -> f64 {
        let mut acc = 0.0;
        for t in leaves {
            if let Some(g) = self.grads.get(&t.id) {
                acc += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        acc.sqrt()
    }

    pub fn any_non_finite(&self, leaves: &[Tensor]) -> bool {
        leaves.iter().any(|t| {
            self.grads
                .get(&t.id)
                .is_some_and(|g| g.iter().any(|v| !v.is_finite()))
        })
    }
}

/// Reverse sweep from a scalar root. Only gradients of grad-requiring
/// leaves are retained; intermediates are freed as soon as consumed.
pub fn backward(root: &Tensor) -> Gradients {
    let nodes = root.tape.inner.borrow();
    assert_eq!(
        nodes[root.id].value.len(),
        1,
        "backward root must be scalar"
    );
    let mut pending: Vec<Option<Arr>> = (0..=root.id).map(|_| None).collect();
    pending[root.id] = Some(Arr::ones(nodes[root.id].value.raw_dim()));
    let mut grads = HashMap::new();

    for id in (0..=root.id).rev() {
        let Some(g) = pending[id].take() else {
            continue;
        };
        let node = &nodes[id];
        match &node.grad_fn {
            Some(f) => {
                for (slot, contrib) in f(&g).into_iter().enumerate() {
                    let Some(contrib) = contrib else { continue };
                    let pid = node.parents[slot];
                    if !nodes[pid].needs_grad {
                        continue;
                    }
                    match &mut pending[pid] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            None => {
                if node.needs_grad {
                    grads.insert(id, g);
                }
            }
        }
    }
    Gradients { grads }
}
