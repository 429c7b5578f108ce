//! The unified, column-growing linear decision layer.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::nsm::uniform_fan_in;
use crate::seed;

/// Where a global class lives in the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClassSlot {
    pub class: usize,
    pub task: usize,
    pub column: usize,
    pub local: usize,
}

/// `W_cls` of shape `d_h × C`, one column per registered class. Columns of
/// a finished task are frozen and never written again.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    weight: Array2<f64>,
    frozen: Vec<bool>,
    slots: Vec<ClassSlot>,
    by_class: BTreeMap<usize, usize>,
}

impl ClassifierHead {
    pub fn new(hidden_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((hidden_dim, 0)),
            frozen: Vec::new(),
            slots: Vec::new(),
            by_class: BTreeMap::new(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.slots.len()
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn slots(&self) -> &[ClassSlot] {
        &self.slots
    }

    pub fn slot(&self, class: usize) -> Option<&ClassSlot> {
        self.by_class.get(&class).map(|&c| &self.slots[c])
    }

    pub fn is_frozen(&self, class: usize) -> bool {
        self.by_class.get(&class).is_some_and(|&c| self.frozen[c])
    }

    /// Classes of `task`, ordered by task-local index.
    pub fn task_classes(&self, task: usize) -> Vec<usize> {
        self.slots.iter().filter(|s| s.task == task).map(|s| s.class).collect()
    }

    pub fn all_classes(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.class).collect()
    }

    /// Appends one column per class, uniform in `±1/sqrt(d_h)`.
    pub fn extend(&mut self, task: usize, classes: &[usize], seed: u64) -> Result<()> {
        for (i, c) in classes.iter().enumerate() {
            if self.by_class.contains_key(c) || classes[..i].contains(c) {
                return Err(Error::contract(format!("class {c} is already registered")));
            }
        }
        let d_h = self.hidden_dim();
        let mut rng = seed::rng(seed);
        let cols = uniform_fan_in(&mut rng, d_h, classes.len(), d_h);
        let start = self.slots.len();
        self.weight.append(Axis(1), cols.view()).expect("row count matches");
        for (local, &class) in classes.iter().enumerate() {
            let column = start + local;
            self.slots.push(ClassSlot {
                class,
                task,
                column,
                local,
            });
            self.frozen.push(false);
            self.by_class.insert(class, column);
        }
        Ok(())
    }

    /// Restores a head from stored parts (checkpoint loading).
    pub fn from_parts(weight: Array2<f64>, slots: Vec<ClassSlot>, frozen: Vec<bool>) -> Result<Self> {
        if weight.ncols() != slots.len() || frozen.len() != slots.len() {
            return Err(Error::contract("classifier parts disagree on class count"));
        }
        let mut by_class = BTreeMap::new();
        for (i, s) in slots.iter().enumerate() {
            if s.column != i || by_class.insert(s.class, i).is_some() {
                return Err(Error::contract("classifier registry is not a bijection"));
            }
        }
        Ok(Self {
            weight,
            frozen,
            slots,
            by_class,
        })
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen
    }

    pub fn freeze_task(&mut self, task: usize) {
        for (s, f) in self.slots.iter().zip(self.frozen.iter_mut()) {
            if s.task == task {
                *f = true;
            }
        }
    }

    fn task_range(&self, task: usize) -> Result<std::ops::Range<usize>> {
        let cols: Vec<usize> = self.slots.iter().filter(|s| s.task == task).map(|s| s.column).collect();
        match (cols.first(), cols.last()) {
            (Some(&a), Some(&b)) if b - a + 1 == cols.len() => Ok(a..b + 1),
            _ => Err(Error::contract(format!("task {task} has no contiguous columns"))),
        }
    }

    /// The `d_h × |C_task|` block of one task's columns.
    pub fn task_block(&self, task: usize) -> Result<Array2<f64>> {
        let r = self.task_range(task)?;
        Ok(self.weight.slice(s![.., r]).to_owned())
    }

    /// Writes back a trained block. Fails if any target column is frozen.
    pub fn set_task_block(&mut self, task: usize, block: &Array2<f64>) -> Result<()> {
        let r = self.task_range(task)?;
        if r.clone().any(|c| self.frozen[c]) {
            return Err(Error::contract(format!("columns of task {task} are frozen")));
        }
        if block.dim() != (self.hidden_dim(), r.len()) {
            return Err(Error::Shape {
                op: "set_task_block",
                left: vec![self.hidden_dim(), r.len()],
                right: block.shape().to_vec(),
            });
        }
        self.weight.slice_mut(s![.., r]).assign(block);
        Ok(())
    }

    /// Replaces every column (the finetuning baseline trains all of them).
    pub fn set_weight(&mut self, weight: Array2<f64>) -> Result<()> {
        if self.frozen.iter().any(|&f| f) {
            return Err(Error::contract("head has frozen columns"));
        }
        if weight.dim() != self.weight.dim() {
            return Err(Error::Shape {
                op: "set_weight",
                left: self.weight.shape().to_vec(),
                right: weight.shape().to_vec(),
            });
        }
        self.weight = weight;
        Ok(())
    }

    /// Columns of `classes`, in the given order.
    pub fn columns_for(&self, classes: &[usize]) -> Result<Array2<f64>> {
        let cols = classes
            .iter()
            .map(|c| {
                self.by_class
                    .get(c)
                    .copied()
                    .ok_or_else(|| Error::contract(format!("class {c} is not registered")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.weight.select(Axis(1), &cols))
    }

    /// `embeddings · W_cls[:, classes]`.
    pub fn logits(&self, embeddings: &Array2<f64>, classes: &[usize]) -> Result<Array2<f64>> {
        if embeddings.ncols() != self.hidden_dim() {
            return Err(Error::Shape {
                op: "logits",
                left: embeddings.shape().to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        Ok(embeddings.dot(&self.columns_for(classes)?))
    }

    /// Argmax over `classes`, mapped back to global IDs. Ties go to the lower
    /// global class ID.
    pub fn predict(&self, embeddings: &Array2<f64>, classes: &[usize]) -> Result<Vec<usize>> {
        let z = self.logits(embeddings, classes)?;
        Ok(argmax_classes(&z, classes))
    }

    pub fn fingerprint_task(&self, task: usize) -> Result<[u8; 32]> {
        Ok(crate::fingerprint([&self.task_block(task)?]))
    }
}

/// Row-wise argmax of `z` whose columns are labelled by `classes`; ties go
/// to the lower class ID.
pub fn argmax_classes(z: &Array2<f64>, classes: &[usize]) -> Vec<usize> {
    z.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..classes.len() {
                let better = row[j] > row[best] || (row[j] == row[best] && classes[j] < classes[best]);
                if better {
                    best = j;
                }
            }
            classes[best]
        })
        .collect()
}
