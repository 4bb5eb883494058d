//! Named trainable parameters and gradient sinks.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{GradBuf, Tensor};
use crate::error::{Error, Result};

/// A named, mutable tensor tracked by the optimizer.
///
/// `leaf()` hands the current value to the graph as a gradient-carrying leaf;
/// repeated calls within one step share the same node so gradients from every
/// use accumulate once. Mutating the value invalidates the cached leaf.
pub struct Parameter {
    name: String,
    shape: Vec<usize>,
    value: RefCell<Vec<f32>>,
    grad: Rc<RefCell<GradBuf>>,
    cached_leaf: RefCell<Option<Tensor>>,
}

pub type ParamRef = Rc<Parameter>;

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<f32>) -> ParamRef {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "parameter data/shape mismatch");
        Rc::new(Parameter {
            name: name.into(),
            shape: shape.to_vec(),
            value: RefCell::new(value),
            grad: Rc::new(RefCell::new(GradBuf {
                data: vec![0.0; n],
                touched: false,
            })),
            cached_leaf: RefCell::new(None),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn value(&self) -> Vec<f32> {
        self.value.borrow().clone()
    }

    pub fn grad(&self) -> Vec<f32> {
        self.grad.borrow().data.clone()
    }

    /// True once backward has reached this parameter since the last zero_grad.
    pub fn grad_touched(&self) -> bool {
        self.grad.borrow().touched
    }

    /// Manually add a gradient (used by tests and by optimizer plumbing).
    pub fn accumulate_grad(&self, g: &[f32]) {
        let mut buf = self.grad.borrow_mut();
        buf.touched = true;
        for (a, b) in buf.data.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn set_value(&self, v: Vec<f32>) {
        assert_eq!(v.len(), self.numel());
        *self.value.borrow_mut() = v;
        self.cached_leaf.borrow_mut().take();
    }

    /// In-place update through a closure; invalidates the cached leaf.
    pub fn update(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.value.borrow_mut());
        self.cached_leaf.borrow_mut().take();
    }

    pub fn zero_grad(&self) {
        let mut buf = self.grad.borrow_mut();
        buf.data.fill(0.0);
        buf.touched = false;
    }

    pub fn leaf(&self) -> Tensor {
        let mut cache = self.cached_leaf.borrow_mut();
        if let Some(t) = cache.as_ref() {
            return t.clone();
        }
        let t = Tensor::leaf_with_sink(
            self.value.borrow().clone(),
            self.shape.clone(),
            Rc::clone(&self.grad),
        );
        *cache = Some(t.clone());
        t
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<ParamRef>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, p: ParamRef) -> Result<()> {
        if self.by_name.contains_key(p.name()) {
            return Err(Error::Invalid(format!("duplicate parameter `{}`", p.name())));
        }
        self.by_name.insert(p.name().to_string(), self.params.len());
        self.params.push(p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamRef> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamRef> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name().to_string()).collect()
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn extend(&mut self, other: &ParamSet) -> Result<()> {
        for p in other.iter() {
            self.register(Rc::clone(p))?;
        }
        Ok(())
    }
}
