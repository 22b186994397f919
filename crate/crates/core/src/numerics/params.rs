use std::collections::BTreeMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    has_grad: bool,
}

impl Parameter {
    pub fn has_grad(&self) -> bool {
        self.has_grad
    }
}

/// Ordered, name-addressable collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Usage(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
            has_grad: false,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
            p.has_grad = false;
        }
    }

    pub fn any_grad(&self) -> bool {
        self.params.iter().any(|p| p.has_grad)
    }

    /// Appends rows to a matrix parameter (e.g. a growing embedding table);
    /// the gradient buffer grows with it.
    pub fn grow_rows(&mut self, id: ParamId, extra: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        p.value.append_rows(extra)?;
        p.grad.append_rows(&Tensor::zeros(extra.shape()))?;
        Ok(())
    }

    /// Copies every parameter onto `tape` as a leaf. Leaves require grad
    /// whenever the tape records gradients.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .iter()
                .map(|(id, p)| tape.param(id, p.value.clone()))
                .collect(),
        }
    }

    /// Adds the gradients of every parameter leaf on the tape into the
    /// parameter gradient buffers.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (node, id) in tape.param_leaves() {
            let Some(g) = grads.get_id(node) else { continue };
            let p = &mut self.params[id.0];
            if g.len() != p.grad.len() {
                return Err(Error::dim(
                    "accumulate",
                    format!("gradient for {} has {} values", p.name, g.len()),
                ));
            }
            for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                *dst += src;
            }
            p.has_grad = true;
        }
        Ok(())
    }
}

/// Parameter leaves bound onto a tape, indexed by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Substitutes the leaf used for `id`, e.g. with an externally created
    /// variable during gradient checking.
    pub fn replace(&mut self, id: ParamId, var: Var<'t>) {
        self.vars[id.0] = var;
    }
}
