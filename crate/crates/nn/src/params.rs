use std::cell::RefCell;
use std::rc::Rc;

use rand::RngCore;

use crate::{Float, Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<F>>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: String, value: Tensor<F>) -> ParamId {
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    /// Mutable access; clones the tensor if a live binding still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Rc::new(v.cast())).collect(),
        }
    }

    /// Binds every parameter as a tracked leaf on `tape`.
    pub fn bind(&self, tape: &Rc<Tape<F>>) -> Binding<F> {
        Binding {
            vars: self.values.iter().map(|v| Var::leaf(tape, v.clone())).collect(),
        }
    }

    /// Binds every parameter as a constant (inference).
    pub fn bind_const(&self) -> Binding<F> {
        Binding {
            vars: self
                .values
                .iter()
                .map(|v| Var::constant_rc(v.clone()))
                .collect(),
        }
    }
}

/// Parameters made available to a forward pass.
pub struct Binding<F: Float> {
    vars: Vec<Var<F>>,
}

impl<F: Float> Binding<F> {
    /// Binding over caller-made variables, one per parameter in store order.
    /// Gradient checks use it to differentiate with respect to parameters.
    pub fn from_vars(vars: Vec<Var<F>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> &Var<F> {
        &self.vars[id.0]
    }

    /// Per-parameter gradients in store order; missing gradients are zeros.
    pub fn collect_grads(&self, grads: &mut Gradients<F>) -> Vec<Tensor<F>> {
        self.vars
            .iter()
            .map(|v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
            })
            .collect()
    }
}

/// Weight initialization laws.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in ±1/sqrt(fan_in), the PyTorch default for conv/linear.
    FanInUniform { fan_in: usize },
}

/// Registers parameters under hierarchical names while drawing initial
/// values from one seeded stream.
pub struct Builder<'a, F> {
    store: &'a RefCell<ParamStore<F>>,
    rng: &'a RefCell<dyn RngCore + 'a>,
    prefix: String,
}

impl<'a, F: Float> Builder<'a, F> {
    pub fn new(store: &'a RefCell<ParamStore<F>>, rng: &'a RefCell<dyn RngCore + 'a>) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::ones(shape.to_vec()),
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = self.rng.borrow_mut();
                Tensor::uniform(shape.to_vec(), bound, &mut *rng)
            }
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.borrow_mut().push(full, value)
    }
}
