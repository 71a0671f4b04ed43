use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{IbtError, Result};

/// Vector-Jacobian product of one graph node: maps the output gradient to one
/// optional gradient per parent (in parent order).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Node {
    pub(crate) op: &'static str,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    /// Shared between a tensor and its reshaped views.
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Dense row-major `f64` array that can take part in a reverse-mode
/// differentiation graph.
///
/// Cloning is cheap (reference counted). The data of a tensor never changes
/// after construction; parameter updates replace the tensor.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        if let Some(node) = &self.0.node {
            s.field("op", &node.op);
        }
        s.field("requires_grad", &self.0.requires_grad).finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor that collects gradients during `backward`.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(IbtError::dim(format!(
                "shape {shape:?} holds {} elements but {} values were given",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::from_parts(data, shape.to_vec(), requires_grad, None))
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![v], vec![], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(vec![0.0; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(vec![v; numel_of(shape)], shape.to_vec(), false, None)
    }

    fn from_parts(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self::from_storage(Rc::new(data), shape, requires_grad, node)
    }

    fn from_storage(data: Rc<Vec<f64>>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Rc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            node,
        }))
    }

    /// Result of a differentiable op. Parents that do not require gradients
    /// are still passed so the backward closure sees a stable parent order,
    /// but no node is recorded when none of them requires a gradient.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        op: &'static str,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| Node {
            op,
            parents,
            backward: Box::new(backward),
        });
        Self::from_parts(data, shape, requires_grad, node)
    }

    /// Differentiable op whose output reuses this tensor's storage under a
    /// new shape of the same size.
    pub(crate) fn view_op(
        &self,
        shape: Vec<usize>,
        op: &'static str,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        let requires_grad = self.requires_grad();
        let node = requires_grad.then(|| Node {
            op,
            parents: vec![self.clone()],
            backward: Box::new(backward),
        });
        Self::from_storage(Rc::clone(&self.0.data), shape, requires_grad, node)
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
        self.0.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the op that produced this tensor, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.0.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(IbtError::Contract(format!(
                "item() needs a single-element tensor, got shape {:?}",
                self.0.shape
            ))),
        }
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = Some(vec![0.0; self.numel()]);
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::from_storage(Rc::clone(&self.0.data), self.0.shape.clone(), false, None)
    }

    fn key(&self) -> *const () {
        Rc::as_ptr(&self.0) as *const ()
    }

    /// Reverse-mode sweep from a scalar loss. Leaf tensors that require
    /// gradients accumulate into their gradient buffer; repeated calls keep
    /// accumulating until the buffers are cleared.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(IbtError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topological_order();
        let mut grads: HashMap<*const (), Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            match &t.0.node {
                Some(node) => {
                    let parent_grads = (node.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{}", node.op);
                        match grads.get_mut(&p.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.key(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require gradients (parents before children).
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const ()> = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    if p.requires_grad() && !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
