use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub usize);

/// A named dense parameter block and its gradient buffer.
#[derive(Clone, Debug)]
pub struct Block {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

/// Every trainable tensor, addressed by name or id. Ids are stable for the
/// lifetime of the store; blocks are never removed.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    blocks: Vec<Block>,
    index: HashMap<String, BlockId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<BlockId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter block {name:?}")));
        }
        let id = BlockId(self.blocks.len());
        let grad = Array2::zeros(value.raw_dim());
        self.blocks.push(Block {
            name: name.clone(),
            value,
            grad,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<BlockId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id.0]
    }

    pub fn blocks(&self) -> impl Iterator<Item = (BlockId, &Block)> {
        self.blocks.iter().enumerate().map(|(i, b)| (BlockId(i), b))
    }

    pub fn value(&self, id: BlockId) -> &Array2<f64> {
        &self.blocks[id.0].value
    }

    pub fn value_mut(&mut self, id: BlockId) -> &mut Array2<f64> {
        &mut self.blocks[id.0].value
    }

    pub fn grad(&self, id: BlockId) -> &Array2<f64> {
        &self.blocks[id.0].grad
    }

    pub fn grad_mut(&mut self, id: BlockId) -> &mut Array2<f64> {
        &mut self.blocks[id.0].grad
    }

    pub fn value_and_grad_mut(&mut self, id: BlockId) -> (&mut Array2<f64>, &Array2<f64>) {
        let b = &mut self.blocks[id.0];
        (&mut b.value, &b.grad)
    }

    /// Replaces a block's value (possibly with a new shape) and resets its
    /// gradient.
    pub fn replace(&mut self, id: BlockId, value: Array2<f64>) {
        let b = &mut self.blocks[id.0];
        b.grad = Array2::zeros(value.raw_dim());
        b.value = value;
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.grad.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }
}
