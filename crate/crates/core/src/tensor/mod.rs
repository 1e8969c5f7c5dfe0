//! Dense row-major `f64` tensors, named parameters, and the reverse-mode tape.

mod ops;
mod tape;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Error, Result};

pub use tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows in Tensor::from_rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension {
                op: "dims2",
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&0);
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Adds `g` into the gradient buffer. No-op when `requires_grad` is off.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Ordered, uniquely named parameters.
///
/// Each store carries a process-unique id so a [`Tape`] can tell which
/// store its gradient leaves belong to.
#[derive(Debug)]
pub struct ParameterStore {
    uid: u64,
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParameterStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a parameter. Trainable parameters record gradients; frozen
    /// ones do not.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_requires_grad(!frozen),
            frozen,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    /// Switches a parameter between trainable and frozen. Affects tapes
    /// built afterwards.
    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        let p = &mut self.params[id.0];
        p.frozen = frozen;
        p.tensor = p.tensor.clone().with_requires_grad(!frozen);
        if frozen {
            p.tensor.zero_grad();
        }
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar entries across trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.tensor.len()).sum()
    }

    pub fn frozen_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.frozen).map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Pulls gradients for this store's parameters out of a finished tape.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for (id, g) in tape.param_grads(self.uid) {
            self.params[id.0].tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Copies of every parameter value, in store order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.tensor.data().to_vec()).collect()
    }

    pub fn restore(&mut self, values: &[Vec<f64>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::contract("snapshot does not match store"));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if v.len() != p.tensor.len() {
                return Err(Error::contract(format!("snapshot size mismatch for `{}`", p.name)));
            }
            p.tensor.data_mut().copy_from_slice(v);
        }
        Ok(())
    }
}
