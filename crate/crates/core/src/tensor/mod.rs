//! Dense `f64` arrays with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Every forward op
//! whose inputs require gradients records its parents together with a
//! backward closure; [`Tensor::backward`] walks that graph once in reverse
//! topological order and returns the gradients of all tracked leaves.
//! When no input is tracked nothing is recorded, so inference builds no
//! graph at all.

mod gemm;
pub mod nn;
mod ops;
mod params;

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub(crate) use gemm::{gemm_nn, gemm_nt, gemm_tn};
pub use ops::concat;
pub use params::{ParamKind, ParamStore, ParamValue};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward rule: given the upstream gradient, the op inputs and the op
/// output values, produce one optional gradient per input.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor], &[f64]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.name))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Untracked tensor from raw data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {:?} needs {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Tracked leaf: gradients flow into it.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(t.with_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::leaf(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(Vec::new(), vec![value], false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad_fn: None,
        }))
    }

    /// Same values as a fresh leaf, tracked or not.
    pub fn with_grad(&self, requires_grad: bool) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), requires_grad)
    }

    pub fn detach(&self) -> Self {
        self.with_grad(false)
    }

    /// Result of an op. Records the graph edge only if some parent is tracked.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{name}");
        let tracked = parents.iter().any(|p| p.requires_grad());
        let grad_fn = tracked.then(|| GradFn {
            name,
            parents: parents.iter().map(|&p| p.clone()).collect(),
            backward,
        });
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad: tracked,
            grad_fn,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the op that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("shape {:?} is not scalar", self.shape())));
        }
        Ok(self.0.data[0])
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let mut grads = Gradients::default();
        if !self.requires_grad() {
            return Ok(grads);
        }

        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(upstream) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    grads.insert(node.id(), node.shape().to_vec(), upstream);
                }
                Some(gf) => {
                    let parent_grads = (gf.backward)(&upstream, &gf.parents, node.data());
                    debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.name);
                    for (parent, g) in gf.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), parent.numel(), "{}", gf.name);
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Tracked nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(gf) = &node.0.grad_fn {
                for p in gf.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Leaf gradients keyed by tensor identity.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<u64, (Vec<usize>, Vec<f64>)>,
}

impl Gradients {
    fn insert(&mut self, id: u64, shape: Vec<usize>, grad: Vec<f64>) {
        self.map.insert(id, (shape, grad));
    }

    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(|(_, g)| g.as_slice())
    }

    /// Gradient, or zeros when the tensor did not influence the loss.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::param(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        let g = x.sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gives_twice() {
        let vals = vec![1.0, -2.0, 3.5, 0.25];
        let x = Tensor::param(&[4], vals.clone()).unwrap();
        let g = x.mul(&x).unwrap().sum().backward().unwrap();
        let want: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(&x).unwrap(), want.as_slice());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let err = x.scale(2.0).backward().unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        let g = x.mul(&c).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(&c).is_none());
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // y = x*x used twice: loss = sum(y + y) => grad 4x
        let x = Tensor::param(&[3], vec![1.0, 2.0, -1.0]).unwrap();
        let y = x.mul(&x).unwrap();
        let g = y.add(&y).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[4.0, 8.0, -4.0]);
    }

    #[test]
    fn no_graph_without_tracked_inputs() {
        let a = Tensor::ones(&[2, 2]);
        let b = a.add(&a).unwrap();
        assert!(b.op_name().is_none());
        assert!(!b.requires_grad());
    }
}
