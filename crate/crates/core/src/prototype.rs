//! Task prototypes and the bank of frozen modulators they index.
//!
//! A prototype is the mean K-hop aggregated raw feature vector of a node
//! set. The same nearest-prototype rule picks the warm-start donor when a
//! task arrives and picks the expert modulator at inference.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::graph::{propagate_graph, SparseGraph};
use crate::nsm::Modulator;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    vector: Array1<f64>,
    nodes: usize,
}

impl Prototype {
    pub fn new(vector: Array1<f64>, nodes: usize) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "Prototype::new",
                row: 0,
            });
        }
        Ok(Self { vector, nodes })
    }

    /// Mean of the given rows of already-propagated features.
    pub fn from_rows(propagated: &Array2<f64>, nodes: &[usize]) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::contract("prototype of an empty node set"));
        }
        if let Some(&bad) = nodes.iter().find(|&&i| i >= propagated.nrows()) {
            return Err(Error::contract(format!(
                "node {bad} is outside 0..{}",
                propagated.nrows()
            )));
        }
        let mut sum = Array1::zeros(propagated.ncols());
        for &i in nodes {
            sum += &propagated.row(i);
        }
        Self::new(sum / nodes.len() as f64, nodes.len())
    }

    pub fn vector(&self) -> &Array1<f64> {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Number of nodes averaged.
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn distance(&self, other: &Prototype) -> f64 {
        self.vector
            .iter()
            .zip(other.vector.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Propagates `g`'s raw features `hops` times and averages `nodes`.
pub fn compute_prototype(g: &SparseGraph, nodes: &[usize], hops: usize) -> Result<Prototype> {
    if nodes.is_empty() {
        return Err(Error::contract("prototype of an empty node set"));
    }
    let x = propagate_graph(g, hops)?;
    Prototype::from_rows(x.matrix(), nodes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub task: usize,
    pub prototype: Prototype,
    pub modulator: Modulator,
}

/// How a new task's modulator was initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub modulator: Modulator,
    /// Task whose structure was copied, if any.
    pub donor: Option<usize>,
}

/// Append-only list of `(prototype, frozen modulator)` pairs with task IDs
/// `1..=len`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrototypeBank {
    entries: Vec<BankEntry>,
}

impl PrototypeBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn get(&self, task: usize) -> Option<&BankEntry> {
        task.checked_sub(1).and_then(|i| self.entries.get(i))
    }

    pub fn next_task_id(&self) -> usize {
        self.entries.len() + 1
    }

    /// Euclidean nearest stored prototype; ties go to the lowest task ID.
    pub fn nearest_task(&self, query: &Prototype) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for e in &self.entries {
            if e.prototype.dim() != query.dim() {
                return Err(Error::Shape {
                    op: "nearest_task",
                    left: vec![e.prototype.dim()],
                    right: vec![query.dim()],
                });
            }
            let d = query.distance(&e.prototype);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((e.task, d));
            }
        }
        best.map(|(t, _)| t)
            .ok_or_else(|| Error::contract("nearest_task on an empty bank"))
    }

    /// Warm start for a new task: a structural copy of the nearest stored
    /// modulator with a fresh embedding, or a random modulator when the bank
    /// is empty.
    pub fn task_aware_init(
        &self,
        query: &Prototype,
        widths: &[usize],
        embedding_dim: usize,
        heads: usize,
        seed: u64,
    ) -> Result<WarmStart> {
        if self.is_empty() {
            return Ok(WarmStart {
                modulator: Modulator::init(widths, embedding_dim, heads, seed)?,
                donor: None,
            });
        }
        let donor = self.nearest_task(query)?;
        let source = &self.get(donor).expect("nearest_task returns stored IDs").modulator;
        Ok(WarmStart {
            modulator: source.clone_structural(seed)?,
            donor: Some(donor),
        })
    }

    /// Freezes `modulator` and stores it under the next task ID.
    pub fn commit(&mut self, prototype: Prototype, mut modulator: Modulator) -> Result<usize> {
        if modulator.is_frozen() {
            return Err(Error::contract("modulator is already frozen and stored"));
        }
        if let Some(first) = self.entries.first() {
            if first.prototype.dim() != prototype.dim() {
                return Err(Error::Shape {
                    op: "commit",
                    left: vec![first.prototype.dim()],
                    right: vec![prototype.dim()],
                });
            }
        }
        modulator.freeze();
        let task = self.next_task_id();
        self.entries.push(BankEntry {
            task,
            prototype,
            modulator,
        });
        Ok(task)
    }

    /// Restores an entry from a checkpoint; the modulator must be frozen and
    /// the ID must be the next one.
    pub fn restore(&mut self, entry: BankEntry) -> Result<()> {
        if entry.task != self.next_task_id() || !entry.modulator.is_frozen() {
            return Err(Error::contract("bank entries must be frozen and in task order"));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn retrieve(&self, query: &Prototype) -> Result<(usize, &Modulator)> {
        let task = self.nearest_task(query)?;
        Ok((task, &self.get(task).expect("stored").modulator))
    }

    /// Prototype of the test node set, then the nearest task and its
    /// modulator.
    pub fn retrieve_for_inference(&self, g: &SparseGraph, nodes: &[usize], hops: usize) -> Result<(usize, &Modulator)> {
        if self.is_empty() {
            return Err(Error::contract("retrieval from an empty bank"));
        }
        self.retrieve(&compute_prototype(g, nodes, hops)?)
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        let protos: Vec<Array2<f64>> = self
            .entries
            .iter()
            .map(|e| e.prototype.vector.clone().insert_axis(Axis(0)))
            .collect();
        let mut all: Vec<&Array2<f64>> = protos.iter().collect();
        for e in &self.entries {
            all.extend(e.modulator.parameters());
        }
        crate::fingerprint(all)
    }
}
