//! Tape that records forward evaluations and replays them in reverse.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

use super::Tensor4;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Reverse-mode rule for one recorded operation.
///
/// `inputs` are the forward input values in recording order and `output` is
/// the forward result. Returns one optional cotangent per input.
pub trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor4<T>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// A value together with its accumulated cotangent.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTensor<T> {
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
}

impl<T: Scalar> DualTensor<T> {
    pub fn new(value: Tensor4<T>) -> Self {
        let grad = Tensor4::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Cotangents produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recorded forward computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by recorded ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn add_macs(&mut self, n: u64) {
        self.macs += n;
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable or differentiated leaf.
    pub fn param(&mut self, value: Tensor4<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor4<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an operation whose forward value has already been computed.
    pub fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor4<T>,
        op: impl Backward<T> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            op: if requires_grad { Some(Box::new(op)) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagate `seed` from `root` back to every leaf that requires a
    /// gradient.
    pub fn backward(&self, root: Var, seed: Tensor4<T>) -> Result<Gradients<T>> {
        let root_node = self.nodes.get(root.0).ok_or(Error::NoForward)?;
        if seed.shape() != root_node.value.shape() {
            return Err(shape_err!(
                "seed {:?} does not match root {:?}",
                seed.shape(),
                root_node.value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..=root.0).map(|_| None).collect();
        if !root_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor4<T>> =
                node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = op.backward(&inputs, &node.value, &g);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for (&i, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[i].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.nodes[i].value.shape(), "{}", op.name());
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Backward from a scalar root with unit seed.
    pub fn backward_scalar(&self, root: Var) -> Result<Gradients<T>> {
        let shape = self.shape(root);
        if shape.iter().product::<usize>() != 1 {
            return Err(shape_err!("backward_scalar on non-scalar {:?}", shape));
        }
        self.backward(root, Tensor4::full(shape, T::one()))
    }
}
