use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug)]
pub(crate) struct ParamSlot {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    /// Set by backward, cleared by the optimizer.
    pub grad_ready: bool,
}

/// A trainable tensor. Clones are handles to the same storage, so two layers
/// holding the same `Param` share value, gradient and optimizer state.
#[derive(Clone, Debug)]
pub struct Param(Rc<RefCell<ParamSlot>>);

impl Param {
    pub fn new(id: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self(Rc::new(RefCell::new(ParamSlot {
            id: id.into(),
            grad: Tensor::zeros(&shape),
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            value,
            grad_ready: false,
        })))
    }

    pub fn id(&self) -> String {
        self.0.borrow().id.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.0.borrow(), |s| &s.value)
    }

    pub fn grad(&self) -> Ref<'_, Tensor> {
        Ref::map(self.0.borrow(), |s| &s.grad)
    }

    pub fn grad_ready(&self) -> bool {
        self.0.borrow().grad_ready
    }

    pub fn set_value(&self, value: Tensor) -> Result<()> {
        let mut slot = self.0.borrow_mut();
        if slot.value.shape() != value.shape() {
            return Err(Error::shape("set_value", slot.value.shape(), value.shape()));
        }
        slot.value = value;
        Ok(())
    }

    pub fn value_mut(&self) -> RefMut<'_, Tensor> {
        RefMut::map(self.0.borrow_mut(), |s| &mut s.value)
    }

    pub fn zero_grad(&self) {
        let mut slot = self.0.borrow_mut();
        slot.grad.data_mut().fill(0.0);
        slot.grad_ready = false;
    }

    pub fn shares_storage_with(&self, other: &Param) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn accumulate_grad(&self, g: &Tensor) {
        let mut slot = self.0.borrow_mut();
        slot.grad.add_assign(g);
        slot.grad_ready = true;
    }

    pub(crate) fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub(crate) fn slot_mut(&self) -> RefMut<'_, ParamSlot> {
        self.0.borrow_mut()
    }
}

/// Non-trainable state carried alongside parameters (normalization running
/// statistics). Cloned handles alias the same tensor.
#[derive(Clone, Debug)]
pub struct Buffer(Rc<RefCell<Tensor>>);

impl Buffer {
    pub fn get(&self) -> Ref<'_, Tensor> {
        self.0.borrow()
    }

    pub fn get_mut(&self) -> RefMut<'_, Tensor> {
        self.0.borrow_mut()
    }
}

/// Registry of parameters keyed by share id. Requesting an existing id
/// returns the already-registered storage, which is how weight sharing is
/// expressed.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    buffers: Vec<(String, Buffer)>,
    buffer_index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the parameter registered under `id`, creating it with `init`
    /// when absent. A shape disagreement with an existing entry is an error.
    pub fn get_or_init(
        &mut self,
        id: &str,
        shape: &[usize],
        init: impl FnOnce() -> Tensor,
    ) -> Result<Param> {
        if let Some(&i) = self.index.get(id) {
            let p = &self.params[i];
            if p.shape() != shape {
                return Err(Error::Config(format!(
                    "shared parameter {id:?} reused with shape {shape:?}, registered as {:?}",
                    p.shape()
                )));
            }
            return Ok(p.clone());
        }
        let value = init();
        if value.shape() != shape {
            return Err(Error::shape("param init", shape, value.shape()));
        }
        let p = Param::new(id, value);
        self.index.insert(id.to_string(), self.params.len());
        self.params.push(p.clone());
        Ok(p)
    }

    pub fn buffer(&mut self, id: &str, init: impl FnOnce() -> Tensor) -> Buffer {
        if let Some(&i) = self.buffer_index.get(id) {
            return self.buffers[i].1.clone();
        }
        let b = Buffer(Rc::new(RefCell::new(init())));
        self.buffer_index.insert(id.to_string(), self.buffers.len());
        self.buffers.push((id.to_string(), b.clone()));
        b
    }

    pub fn get(&self, id: &str) -> Option<&Param> {
        self.index.get(id).map(|&i| &self.params[i])
    }

    pub fn get_buffer(&self, id: &str) -> Option<&Buffer> {
        self.buffer_index.get(id).map(|&i| &self.buffers[i].1)
    }

    /// Unique parameters in registration order.
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Buffer)> {
        self.buffers.iter().map(|(k, b)| (k.as_str(), b))
    }

    /// Total trainable scalars, each shared group counted once.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
