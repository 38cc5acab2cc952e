//! Reverse-mode tape.
//!
//! Every differentiable op produces a [`Var`]. When at least one input is
//! tracked on a [`Tape`], the op appends a node holding a backward closure;
//! otherwise the closure is dropped on the spot and the result is a plain
//! constant, so inference never retains activations.

use std::cell::RefCell;
use std::rc::Rc;

use crate::{Float, Tensor};

/// Maps the output gradient to one optional gradient per op input. The flag
/// slice says which inputs are tracked; untracked inputs may return `None`.
pub type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>>;

struct Node<F> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<F>>,
}

pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Float> Tape<F> {
    pub fn new() -> Rc<Self> {
        Rc::new(Self {
            nodes: RefCell::new(Vec::new()),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<F>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Back-propagates from `output`, seeding it with ones. Consumes the
    /// recorded nodes; a tape supports a single backward pass.
    pub fn backward(&self, output: &Var<F>) -> Gradients<F> {
        let (tape, out_id) = output
            .tracked
            .as_ref()
            .expect("backward from an untracked value");
        assert!(
            std::ptr::eq(Rc::as_ptr(tape), self),
            "output recorded on another tape"
        );
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        nodes.truncate(out_id + 1);
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[*out_id] = Some(Tensor::ones(output.value.shape().to_vec()));
        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            let Some(backward) = node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let outs = backward(&g, &needs);
            debug_assert_eq!(outs.len(), node.parents.len());
            for (parent, out) in node.parents.iter().zip(outs) {
                if let (Some(pid), Some(gp)) = (parent, out) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&gp),
                        slot => *slot = Some(gp),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of leaf nodes after a backward pass.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: &Var<F>) -> Option<&Tensor<F>> {
        let (_, id) = v.tracked.as_ref()?;
        self.grads.get(*id)?.as_ref()
    }

    pub fn take(&mut self, v: &Var<F>) -> Option<Tensor<F>> {
        let (_, id) = v.tracked.as_ref()?;
        self.grads.get_mut(*id)?.take()
    }
}

/// A value, optionally tracked on a tape.
#[derive(Clone)]
pub struct Var<F: Float> {
    value: Rc<Tensor<F>>,
    tracked: Option<(Rc<Tape<F>>, usize)>,
}

impl<F: Float> std::fmt::Debug for Var<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.value)
            .field("node", &self.tracked.as_ref().map(|(_, id)| *id))
            .finish()
    }
}

impl<F: Float> Var<F> {
    pub fn constant(value: Tensor<F>) -> Self {
        Self {
            value: Rc::new(value),
            tracked: None,
        }
    }

    pub fn constant_rc(value: Rc<Tensor<F>>) -> Self {
        Self {
            value,
            tracked: None,
        }
    }

    /// A leaf that receives a gradient.
    pub fn leaf(tape: &Rc<Tape<F>>, value: Rc<Tensor<F>>) -> Self {
        let id = tape.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Self {
            value,
            tracked: Some((tape.clone(), id)),
        }
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn shared_value(&self) -> Rc<Tensor<F>> {
        self.value.clone()
    }

    pub fn into_value(self) -> Tensor<F> {
        drop(self.tracked);
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.value.dims4()
    }

    pub fn is_tracked(&self) -> bool {
        self.tracked.is_some()
    }

    pub fn detach(&self) -> Self {
        Self {
            value: self.value.clone(),
            tracked: None,
        }
    }

    pub fn tape(&self) -> Option<&Rc<Tape<F>>> {
        self.tracked.as_ref().map(|(t, _)| t)
    }

    /// Records a new op. `backward` receives the output gradient and returns
    /// one gradient per entry of `inputs`.
    pub fn from_op(
        inputs: &[&Var<F>],
        value: Tensor<F>,
        backward: impl Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>> + 'static,
    ) -> Self {
        let tape = inputs.iter().find_map(|v| v.tape().cloned());
        let Some(tape) = tape else {
            return Self::constant(value);
        };
        let parents = inputs
            .iter()
            .map(|v| {
                v.tracked.as_ref().map(|(t, id)| {
                    assert!(Rc::ptr_eq(t, &tape), "inputs recorded on different tapes");
                    *id
                })
            })
            .collect();
        let id = tape.push(Node {
            parents,
            backward: Some(Box::new(backward)),
        });
        Self {
            value: Rc::new(value),
            tracked: Some((tape, id)),
        }
    }
}
