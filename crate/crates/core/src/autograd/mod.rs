//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every backward rule is itself written with differentiable [`Var`] ops, so
//! gradients can be differentiated again (`create_graph = true`), which the
//! R1 penalty needs. Nodes are reference counted and immutable; a graph lives
//! for one forward/backward pass.

mod conv;
mod ops;
mod resize;
mod tensor;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use conv::ConvGeometry;
pub use resize::resize_tensor;
pub use tensor::{broadcast_shape, numel, Float, Tensor};


static NEXT_NODE: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether newly created ops record their backward rule.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` with graph recording switched off.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _restore = Restore(prev);
    f()
}

/// Backward rule: given the output gradient, the op's parents and a mask of
/// which parents need a gradient, return one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Var<T>, &[Var<T>], &[bool]) -> Vec<Option<Var<T>>>>;

struct Node<T: Float> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A tensor value in a differentiable computation graph.
pub struct Var<T: Float>(Rc<Node<T>>);

impl<T: Float> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

impl<T: Float> Var<T> {
    /// A constant: no gradient flows into it.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    /// A leaf whose gradient can be requested.
    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: NEXT_NODE.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub(crate) fn from_op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Var<T>, &[Var<T>], &[bool]) -> Vec<Option<Var<T>>> + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: NEXT_NODE.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad: true,
            parents,
            backward: Some(Box::new(backward)),
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }
}

/// Gradients of `output` (seeded with ones) with respect to each of `inputs`.
///
/// With `create_graph` the returned gradients are themselves differentiable.
/// Inputs unreachable from `output` get `None`.
pub fn grad<T: Float>(output: &Var<T>, inputs: &[&Var<T>], create_graph: bool) -> Vec<Option<Var<T>>> {
    let wanted: Vec<u64> = inputs.iter().map(|v| v.id()).collect();
    let mut found = run_backward(output, Some(&wanted), create_graph);
    wanted.iter().map(|id| found.remove(id)).collect()
}

/// Gradients of `output` with respect to every reachable leaf that requires
/// a gradient, keyed by node id.
pub fn backward<T: Float>(output: &Var<T>) -> HashMap<u64, Tensor<T>> {
    run_backward(output, None, false)
        .into_iter()
        .map(|(id, v)| (id, v.value().clone()))
        .collect()
}

fn run_backward<T: Float>(
    output: &Var<T>,
    targets: Option<&[u64]>,
    create_graph: bool,
) -> HashMap<u64, Var<T>> {
    let mut result = HashMap::new();
    if !output.requires_grad() {
        return result;
    }
    // Collect reachable nodes. Ids grow monotonically, so a child always has
    // a larger id than its parents and descending id order is topological.
    let mut nodes: Vec<Var<T>> = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![output.clone()];
    seen.insert(output.id());
    while let Some(v) = stack.pop() {
        for p in &v.0.parents {
            if p.requires_grad() && seen.insert(p.id()) {
                stack.push(p.clone());
            }
        }
        nodes.push(v);
    }
    nodes.sort_unstable_by_key(|v| v.id());

    // Which nodes lead to a requested target (or to any leaf when no target
    // list is given); only those receive gradients.
    let target_set: Option<HashSet<u64>> = targets.map(|t| t.iter().copied().collect());
    let mut relevant: HashSet<u64> = HashSet::new();
    for v in &nodes {
        let is_target = match &target_set {
            Some(t) => t.contains(&v.id()),
            None => v.0.parents.is_empty(),
        };
        if is_target || v.0.parents.iter().any(|p| relevant.contains(&p.id())) {
            relevant.insert(v.id());
        }
    }

    with_grad_mode(create_graph, || {
        let mut grads: HashMap<u64, Var<T>> = HashMap::new();
        grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
        for v in nodes.iter().rev() {
            if !relevant.contains(&v.id()) {
                continue;
            }
            let Some(g) = grads.remove(&v.id()) else { continue };
            let is_target = match &target_set {
                Some(t) => t.contains(&v.id()),
                None => v.0.parents.is_empty(),
            };
            if is_target {
                result.insert(v.id(), g.clone());
            }
            let Some(bw) = &v.0.backward else { continue };
            let mask: Vec<bool> = v.0.parents.iter().map(|p| relevant.contains(&p.id())).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let pgrads = bw(&g, &v.0.parents, &mask);
            for ((p, pg), need) in v.0.parents.iter().zip(pgrads).zip(mask) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                let acc = match grads.remove(&p.id()) {
                    Some(prev) => prev.add(&pg),
                    None => pg,
                };
                grads.insert(p.id(), acc);
            }
        }
    });
    result
}
