//! Task streams: grouping classes into tasks and splitting each class's
//! nodes into train, validation and test sets.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::{propagate_graph, SparseGraph, Subgraph};
use crate::seed::{self, Purpose};

pub const TRAIN_FRACTION: f64 = 0.6;
pub const VAL_FRACTION: f64 = 0.2;
pub const TEST_FRACTION: f64 = 0.2;

/// How classes are grouped into tasks.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// `n` classes per task; classes that do not fill a whole task are dropped.
    Equal(usize),
    /// A `base`-class first task followed by `step`-class tasks.
    Unequal { base: usize, step: usize },
    /// Explicit task sizes.
    Sizes(Vec<usize>),
}

impl Protocol {
    /// Task sizes for a dataset with `num_classes` classes.
    pub fn task_sizes(&self, num_classes: usize) -> Result<Vec<usize>> {
        let sizes = match self {
            Protocol::Equal(n) => {
                if *n == 0 {
                    return Err(Error::contract("classes per task must be >= 1"));
                }
                vec![*n; num_classes / n]
            }
            Protocol::Unequal { base, step } => {
                if *base == 0 || *step == 0 {
                    return Err(Error::contract("task sizes must be >= 1"));
                }
                if *base > num_classes {
                    vec![]
                } else {
                    let mut v = vec![*base];
                    v.extend(std::iter::repeat_n(*step, (num_classes - base) / step));
                    v
                }
            }
            Protocol::Sizes(v) => {
                if v.contains(&0) {
                    return Err(Error::contract("task sizes must be >= 1"));
                }
                let total: usize = v.iter().sum();
                if total > num_classes {
                    return Err(Error::contract(format!(
                        "protocol needs {total} classes, dataset has {num_classes}"
                    )));
                }
                v.clone()
            }
        };
        if sizes.is_empty() {
            return Err(Error::contract(format!(
                "{num_classes} classes cannot fill a single task under {self}"
            )));
        }
        Ok(sizes)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Equal(n) => write!(f, "equal:{n}"),
            Protocol::Unequal { base, step } => write!(f, "unequal:{base}:{step}"),
            Protocol::Sizes(v) => {
                let s: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "sizes:{}", s.join(","))
            }
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    /// `equal:2`, `unequal:20:10` or `sizes:3,2,2`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "bad protocol {s:?}; use equal:N, unequal:BASE:STEP or sizes:A,B,..."
            ))
        };
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let mut parts = s.splitn(2, ':');
        let kind = parts.next().unwrap_or_default();
        let rest = parts.next().ok_or_else(bad)?;
        match kind {
            "equal" => Ok(Protocol::Equal(num(rest)?)),
            "unequal" => {
                let (a, b) = rest.split_once(':').ok_or_else(bad)?;
                Ok(Protocol::Unequal {
                    base: num(a)?,
                    step: num(b)?,
                })
            }
            "sizes" => Ok(Protocol::Sizes(rest.split(',').map(num).collect::<Result<_>>()?)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassOrder {
    #[default]
    Ascending,
    Shuffled,
}

/// One task, in global node and class IDs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    /// 1-based.
    pub id: usize,
    pub classes: Vec<usize>,
    /// Every node of the task's classes, ascending.
    pub nodes: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskStream {
    pub tasks: Vec<TaskSpec>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Sizes `(train, val, test)` for a class of `n` nodes: floor of the val and
/// test fractions, the remainder to train.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = (n as f64 * VAL_FRACTION).floor() as usize;
    let test = (n as f64 * TEST_FRACTION).floor() as usize;
    (n - val - test, val, test)
}

pub fn build_stream(g: &SparseGraph, protocol: &Protocol, order: ClassOrder, seed: u64) -> Result<TaskStream> {
    let num_classes = g.num_classes();
    let sizes = protocol.task_sizes(num_classes)?;
    let mut classes: Vec<usize> = (0..num_classes).collect();
    if order == ClassOrder::Shuffled {
        classes.shuffle(&mut seed::rng(seed::derive(seed, Purpose::ClassOrder, 0)));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (v, &c) in g.labels().iter().enumerate() {
        by_class[c].push(v);
    }

    let mut tasks = Vec::with_capacity(sizes.len());
    let mut next = 0;
    for (t, &size) in sizes.iter().enumerate() {
        let mut task_classes = classes[next..next + size].to_vec();
        next += size;
        task_classes.sort_unstable();
        let (mut nodes, mut train, mut val, mut test) = (vec![], vec![], vec![], vec![]);
        for &c in &task_classes {
            let mut members = by_class[c].clone();
            if members.is_empty() {
                return Err(Error::contract(format!("class {c} has no nodes")));
            }
            nodes.extend_from_slice(&members);
            members.shuffle(&mut seed::rng(seed::derive(seed, Purpose::Split, c as u64)));
            let (n_train, n_val, _) = split_sizes(members.len());
            train.extend_from_slice(&members[..n_train]);
            val.extend_from_slice(&members[n_train..n_train + n_val]);
            test.extend_from_slice(&members[n_train + n_val..]);
        }
        for v in [&mut nodes, &mut train, &mut val, &mut test] {
            v.sort_unstable();
        }
        tasks.push(TaskSpec {
            id: t + 1,
            classes: task_classes,
            nodes,
            train,
            val,
            test,
        });
    }
    Ok(TaskStream { tasks })
}

/// A task's induced subgraph with propagated features, in local indices.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub id: usize,
    pub classes: Vec<usize>,
    pub subgraph: Subgraph,
    pub features: Array2<f64>,
    /// Global class of each local node.
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl PreparedTask {
    pub fn new(g: &SparseGraph, spec: &TaskSpec, hops: usize) -> Result<Self> {
        let subgraph = g.induced_subgraph(&spec.nodes)?;
        let features = propagate_graph(&subgraph.graph, hops)?.into_matrix();
        let old_to_new: std::collections::HashMap<usize, usize> =
            subgraph.new_to_old.iter().enumerate().map(|(i, &o)| (o, i)).collect();
        let local = |nodes: &[usize]| -> Vec<usize> { nodes.iter().map(|v| old_to_new[v]).collect() };
        Ok(Self {
            id: spec.id,
            classes: spec.classes.clone(),
            labels: subgraph.graph.labels().to_vec(),
            train: local(&spec.train),
            val: local(&spec.val),
            test: local(&spec.test),
            features,
            subgraph,
        })
    }

    pub fn input(&self) -> crate::trainer::TaskInput<'_> {
        crate::trainer::TaskInput {
            features: &self.features,
            labels: &self.labels,
            train: &self.train,
            val: &self.val,
            classes: &self.classes,
        }
    }

    pub fn rows(&self, nodes: &[usize]) -> Array2<f64> {
        self.features.select(ndarray::Axis(0), nodes)
    }

    pub fn test_labels(&self) -> Vec<usize> {
        self.test.iter().map(|&v| self.labels[v]).collect()
    }
}

pub fn prepare_stream(g: &SparseGraph, stream: &TaskStream, hops: usize) -> Result<Vec<PreparedTask>> {
    stream.tasks.iter().map(|t| PreparedTask::new(g, t, hops)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn labelled(labels: Vec<usize>) -> SparseGraph {
        let n = labels.len();
        SparseGraph::from_edges(Array2::zeros((n, 1)), labels, []).unwrap()
    }

    #[test]
    fn protocol_sizes() {
        assert_eq!(Protocol::Equal(2).task_sizes(6).unwrap(), vec![2, 2, 2]);
        assert_eq!(Protocol::Equal(2).task_sizes(7).unwrap(), vec![2, 2, 2]);
        assert_eq!(
            Protocol::Unequal { base: 20, step: 10 }.task_sizes(70).unwrap(),
            vec![20, 10, 10, 10, 10, 10]
        );
        assert_eq!(Protocol::Sizes(vec![3, 2, 2]).task_sizes(7).unwrap(), vec![3, 2, 2]);
        assert!(Protocol::Equal(3).task_sizes(2).is_err());
        assert!(Protocol::Sizes(vec![4, 4]).task_sizes(7).is_err());
    }

    #[test]
    fn protocol_round_trips_through_text() {
        for p in [
            Protocol::Equal(2),
            Protocol::Unequal { base: 20, step: 10 },
            Protocol::Sizes(vec![3, 2, 2]),
        ] {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
        }
        assert!("equal".parse::<Protocol>().is_err());
        assert!("thirds:3".parse::<Protocol>().is_err());
    }

    #[test]
    fn split_sizes_floor_remainder_to_train() {
        assert_eq!(split_sizes(10), (6, 2, 2));
        assert_eq!(split_sizes(7), (5, 1, 1));
        assert_eq!(split_sizes(1), (1, 0, 0));
    }

    #[test]
    fn seven_classes_drop_the_last() {
        let labels: Vec<usize> = (0..70).map(|v| v % 7).collect();
        let s = build_stream(&labelled(labels), &Protocol::Equal(2), ClassOrder::Ascending, 0).unwrap();
        let sets: Vec<Vec<usize>> = s.tasks.iter().map(|t| t.classes.clone()).collect();
        assert_eq!(sets, vec![vec![0, 1], vec![2, 3], vec![4, 5]]);
        for t in &s.tasks {
            assert_eq!(t.nodes.len(), 20);
            assert_eq!((t.train.len(), t.val.len(), t.test.len()), (12, 4, 4));
        }
    }

    #[test]
    fn stream_is_seed_deterministic_and_disjoint() {
        let labels: Vec<usize> = (0..90).map(|v| v % 6).collect();
        let g = labelled(labels);
        let a = build_stream(&g, &Protocol::Equal(2), ClassOrder::Shuffled, 3).unwrap();
        assert_eq!(
            a,
            build_stream(&g, &Protocol::Equal(2), ClassOrder::Shuffled, 3).unwrap()
        );
        let mut seen: Vec<usize> = a.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        for t in &a.tasks {
            let mut all = [t.train.clone(), t.val.clone(), t.test.clone()].concat();
            all.sort_unstable();
            assert_eq!(all, t.nodes);
        }
    }
}
