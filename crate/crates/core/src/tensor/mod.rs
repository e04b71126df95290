//! Dense reverse-mode differentiable tensors.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer. Operations on
//! tensors that require gradients record the producing operation and its
//! inputs, forming an acyclic graph that [`Tensor::backward`] walks in
//! reverse topological order. Tensors produced from inputs that do not
//! require gradients carry no graph at all, so inference passes free their
//! intermediates eagerly.

mod adam;
mod conv;
mod loss;
mod ops;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use adam::{adam_update, Adam, AdamState};
pub use conv::{conv2d, conv3d, conv_output_extent, conv_transpose2d};
pub use loss::weighted_masked_cross_entropy;
pub use ops::{
    add, concat, maxpool2d, mul, nearest_upsample2d, permute, relu, reshape, scale, split, sum,
};

pub(crate) use conv::ConvGeom;

/// Operation that produced a tensor, with whatever it saved for the reverse pass.
pub(crate) enum Op<T> {
    Conv(ConvGeom),
    ConvTranspose(ConvGeom),
    MaxPool { argmax: Vec<usize> },
    Relu,
    Concat { axis: usize },
    Upsample { factor: usize },
    Reshape,
    Permute { perm: Vec<usize> },
    Add,
    Mul,
    Scale(T),
    Sum,
    CrossEntropy { dlogits: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Conv(_) => "conv",
            Op::ConvTranspose(_) => "conv_transpose",
            Op::MaxPool { .. } => "maxpool",
            Op::Relu => "relu",
            Op::Concat { .. } => "concat",
            Op::Upsample { .. } => "upsample",
            Op::Reshape => "reshape",
            Op::Permute { .. } => "permute",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<Tensor<T>>,
}

struct Inner<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

/// N-dimensional row-major array with an optional gradient buffer.
pub struct Tensor<T>(Arc<Inner<T>>);

impl<T> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op.name()))
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Trainable leaf: gradients accumulate into it during [`Tensor::backward`].
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", "data length", numel, data.len()));
        }
        Ok(Self::from_parts(data, shape.to_vec(), requires_grad, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(vec![T::zero(); numel], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(vec![value; numel], shape.to_vec(), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![value], Vec::new(), false, None)
    }

    fn from_parts(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Result of an operation; the graph node is kept only if some input
    /// participates in differentiation.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: Op<T>,
        inputs: Vec<Tensor<T>>,
    ) -> Self {
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then_some(Node { op, inputs });
        Self::from_parts(data, shape, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.0.data[0]
    }

    /// Copy of the accumulated gradient, if any has been written.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    pub fn into_data(self) -> Vec<T> {
        match Arc::try_unwrap(self.0) {
            Ok(inner) => inner.data,
            Err(shared) => shared.data.clone(),
        }
    }

    fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse pass from a scalar root.
    ///
    /// Gradients land in every reachable trainable leaf and add to whatever
    /// is already stored there.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::dim(
                "backward",
                "root element count",
                1,
                self.numel(),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Post-order DFS; reversed it is a valid reverse topological order.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.insert(t.id(), ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains_key(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }

        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            let Some(node) = &t.0.node else {
                t.accumulate_grad(&g);
                continue;
            };
            let input_grads = backward_op(node, t, g)?;
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !input.requires_grad() {
                    continue;
                }
                match pending.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                    None => {
                        pending.insert(input.id(), ig);
                    }
                }
            }
        }
        Ok(())
    }
}

fn backward_op<T: Scalar>(
    node: &Node<T>,
    out: &Tensor<T>,
    g: Vec<T>,
) -> Result<Vec<Option<Vec<T>>>> {
    let want = |i: usize| node.inputs[i].requires_grad();
    Ok(match &node.op {
        Op::Conv(geom) => conv::conv_backward(geom, &node.inputs, &g, [want(0), want(1), want(2)]),
        Op::ConvTranspose(geom) => {
            conv::conv_transpose_backward(geom, &node.inputs, &g, [want(0), want(1), want(2)])
        }
        Op::MaxPool { argmax } => vec![Some(ops::maxpool_backward(&node.inputs[0], argmax, &g))],
        Op::Relu => vec![Some(ops::relu_backward(&node.inputs[0], &g))],
        Op::Concat { axis } => ops::concat_backward(&node.inputs, *axis, &g),
        Op::Upsample { factor } => vec![Some(ops::upsample_backward(&node.inputs[0], *factor, &g))],
        Op::Reshape => vec![Some(g)],
        Op::Permute { perm } => vec![Some(ops::permute_backward(out.shape(), perm, &g))],
        Op::Add => vec![Some(g.clone()), Some(g)],
        Op::Mul => {
            let (a, b) = (node.inputs[0].data(), node.inputs[1].data());
            vec![
                want(0).then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
                want(1).then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
            ]
        }
        Op::Scale(s) => vec![Some(g.iter().map(|&v| v * *s).collect())],
        Op::Sum => {
            let n = node.inputs[0].numel();
            vec![Some(vec![g[0]; n])]
        }
        Op::CrossEntropy { dlogits } => {
            let s = g[0];
            vec![Some(dlogits.iter().map(|&d| d * s).collect())]
        }
    })
}

/// Named trainable leaf of a model.
#[derive(Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Cloning gives an independent leaf (with a copy of any stored gradient),
/// so backward passes through a clone never touch the original.
impl<T: Scalar> Clone for Parameter<T> {
    fn clone(&self) -> Self {
        let value = Tensor::param(self.value.data().to_vec(), self.shape()).expect("same shape");
        if let Some(g) = self.value.grad() {
            value.accumulate_grad(&g);
        }
        Parameter {
            name: self.name.clone(),
            value,
        }
    }
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Ok(Parameter {
            name: name.into(),
            value: Tensor::param(data, shape)?,
        })
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Replace the stored values with a fresh leaf (gradient cleared).
    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        self.value = Tensor::param(data, &self.value.0.shape)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f64>::new(vec![1.0; 5], &[2, 3]).is_err());
        let t = Tensor::<f64>::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        sum(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::param(vec![0.5, 1.5], &[2]).unwrap();
        let y = sum(&scale(&x, 3.0));
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, 6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn shared_input_grads_add_up() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = sum(&add(&x, &x).unwrap());
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(relu(&x).backward(), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cloned_parameter_has_its_own_gradient() {
        let p = Parameter::new("w", vec![1.0f64, 2.0], &[2]).unwrap();
        let q = p.clone();
        sum(&q.value).backward().unwrap();
        assert!(p.value.grad().is_none());
        assert_eq!(q.clone().value.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn constants_carry_no_graph() {
        let x = Tensor::<f64>::new(vec![1.0, -1.0], &[2]).unwrap();
        let y = relu(&x);
        assert!(y.is_leaf());
        assert!(!y.requires_grad());
    }
}
