use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major `f32` array.
///
/// `data` is reference counted so that binding a parameter onto a tape does
/// not copy it; mutation goes through [`Tensor::data_mut`], which clones only
/// while a tape still holds the old buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
    /// Whether AdamW applies decoupled weight decay to this tensor.
    pub decay: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
            decay: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zeros shape")
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("filled shape")
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar shape")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.data)
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }
}

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameters.
///
/// Every store carries a process-unique id; cloning a store (e.g. to create
/// a teacher) assigns a fresh id so tapes never confuse the two.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for t in &mut self.tensors {
            t.requires_grad = on;
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_isomorphic(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            let first = self
                .names
                .iter()
                .zip(&other.names)
                .position(|(a, b)| a != b)
                .unwrap_or(self.len().min(other.len()));
            let name = self
                .names
                .get(first)
                .or_else(|| other.names.get(first))
                .cloned()
                .unwrap_or_default();
            return Err(Error::contract(format!(
                "parameter structures differ ({} vs {} entries), first divergence at `{name}`",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self
            .names
            .iter()
            .zip(&self.tensors)
            .zip(other.names.iter().zip(&other.tensors))
        {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::contract(format!(
                    "parameter structures diverge at `{na}` {:?} vs `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Bitwise equality of names, shapes and values (ignores grads and ids).
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| {
                    a.shape() == b.shape()
                        && a.data()
                            .iter()
                            .zip(b.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}
