//! Per-task optimization of one modulator plus the task's new classifier
//! columns against a class-balanced cross-entropy.

use std::fmt;

use ndarray::Array2;

use crate::autodiff::{Reduction, Tape, Var};
use crate::backbone::Backbone;
use crate::classifier::{argmax_classes, ClassifierHead};
use crate::error::{Error, Result};
use crate::nsm::{ForwardHooks, Modulator, ModulatorVars, SiteVars};
use crate::prototype::{Prototype, PrototypeBank};

pub const DEFAULT_LR: f64 = 0.005;
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;
pub const DEFAULT_EPOCHS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2: added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }
}

/// Moment buffers for a fixed list of trainable tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let first: Vec<Array2<f64>> = params.into_iter().map(|p| Array2::zeros(p.dim())).collect();
        let second = first.clone();
        Self {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[&Array2<f64>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::contract(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.dim() != g.dim() || p.dim() != self.first[i].dim() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            ndarray::Zip::from(&mut **p)
                .and(*g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g + weight_decay * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// `w_c = 1 / max(N_c, 1)` for every class of the task, in `classes` order.
pub fn class_weights(labels: &[usize], classes: &[usize]) -> Vec<f64> {
    classes
        .iter()
        .map(|c| 1.0 / labels.iter().filter(|&&l| l == *c).count().max(1) as f64)
        .collect()
}

/// Weighted cross-entropy of `logits` (columns in task-local order) against
/// task-local `targets`, with `weights` indexed by task-local class.
pub fn weighted_ce(logits: &Array2<f64>, targets: &[usize], weights: &[f64], reduction: Reduction) -> Result<f64> {
    if weights.len() != logits.ncols() {
        return Err(Error::Shape {
            op: "weighted_ce",
            left: logits.shape().to_vec(),
            right: vec![weights.len()],
        });
    }
    let per_node = node_weights(targets, weights)?;
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let loss = tape.weighted_cross_entropy(z, targets, &per_node, reduction)?;
    Ok(tape.scalar(loss))
}

fn node_weights(targets: &[usize], weights: &[f64]) -> Result<Vec<f64>> {
    targets
        .iter()
        .map(|&t| {
            weights
                .get(t)
                .copied()
                .ok_or_else(|| Error::contract(format!("label {t} outside 0..{}", weights.len())))
        })
        .collect()
}

impl ModulatorVars {
    /// Rebuilds the structured view from vars laid out in
    /// [`Modulator::parameters`] order.
    pub fn from_flat(vars: &[Var], widths: &[usize], heads: usize) -> Result<Self> {
        if vars.len() != 4 * widths.len() + 1 {
            return Err(Error::contract(format!(
                "{} vars for {} sites",
                vars.len(),
                widths.len()
            )));
        }
        let sites = widths
            .iter()
            .zip(vars.chunks(4))
            .map(|(&width, c)| SiteVars {
                w_base: c[0],
                b_base: c[1],
                w_attn: c[2],
                b_attn: c[3],
                width,
                heads,
            })
            .collect();
        Ok(Self {
            sites,
            embedding: vars[vars.len() - 1],
        })
    }
}

/// Records the task loss: modulated backbone, then the task's classifier
/// block, then the weighted cross-entropy. Returns `(logits, loss)`.
#[allow(clippy::too_many_arguments)]
pub fn record_task_loss(
    tape: &mut Tape,
    backbone: &Backbone,
    modulator: &ModulatorVars,
    head_block: Var,
    features: Var,
    targets: &[usize],
    node_weights: &[f64],
    reduction: Reduction,
) -> Result<(Var, Var)> {
    let acts = backbone.forward_on_tape(tape, features, modulator, ForwardHooks::default())?;
    let logits = tape.matmul(acts.embedding, head_block)?;
    let loss = tape.weighted_cross_entropy(logits, targets, node_weights, reduction)?;
    Ok((logits, loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// Structural copy of the nearest stored modulator.
    TaskAware,
    /// Fresh random modulator for every task.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub reduction: Reduction,
    pub init: InitStrategy,
    pub embedding_dim: usize,
    pub heads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            adam: AdamConfig::default(),
            reduction: Reduction::Sum,
            init: InitStrategy::TaskAware,
            embedding_dim: crate::nsm::DEFAULT_EMBEDDING_DIM,
            heads: crate::nsm::DEFAULT_HEADS,
        }
    }
}

/// One task's data, in the task subgraph's local node indexing.
#[derive(Debug, Clone, Copy)]
pub struct TaskInput<'a> {
    /// Propagated features of the task subgraph.
    pub features: &'a Array2<f64>,
    /// Global class of every subgraph node.
    pub labels: &'a [usize],
    pub train: &'a [usize],
    pub val: &'a [usize],
    /// The task's classes; position is the task-local index.
    pub classes: &'a [usize],
}

impl TaskInput<'_> {
    pub fn local_targets(&self, nodes: &[usize]) -> Result<Vec<usize>> {
        nodes
            .iter()
            .map(|&v| {
                let c = self.labels[v];
                self.classes
                    .iter()
                    .position(|&k| k == c)
                    .ok_or_else(|| Error::contract(format!("node {v} has class {c} outside the task")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "task={} epoch={} loss={:.6e} train_acc={:.4}",
            self.task, self.epoch, self.loss, self.train_accuracy
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub task: usize,
    pub donor: Option<usize>,
    pub log: Vec<EpochRecord>,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct TaskSeeds {
    pub modulator: u64,
    pub head: u64,
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    100.0 * hits as f64 / truth.len() as f64
}

/// Trains one task end to end: prototype, warm start, head extension,
/// `epochs` full-batch Adam steps on the new modulator and the new columns
/// only, then commit to the bank.
pub fn train_task(
    input: TaskInput<'_>,
    backbone: &Backbone,
    bank: &mut PrototypeBank,
    head: &mut ClassifierHead,
    config: &TrainConfig,
    seeds: TaskSeeds,
) -> Result<TrainOutcome> {
    if input.train.is_empty() {
        return Err(Error::contract("task without training nodes"));
    }
    if config.epochs == 0 {
        return Err(Error::contract("epochs must be >= 1"));
    }
    let prototype = Prototype::from_rows(input.features, input.train)?;
    let widths = backbone.site_widths();
    let warm = match config.init {
        InitStrategy::TaskAware => {
            bank.task_aware_init(&prototype, &widths, config.embedding_dim, config.heads, seeds.modulator)?
        }
        InitStrategy::Random => crate::prototype::WarmStart {
            modulator: Modulator::init(&widths, config.embedding_dim, config.heads, seeds.modulator)?,
            donor: None,
        },
    };
    let mut modulator = warm.modulator;
    let task = bank.next_task_id();
    head.extend(task, input.classes, seeds.head)?;
    let mut block = head.task_block(task)?;

    let train_x = input.features.select(ndarray::Axis(0), input.train);
    let targets = input.local_targets(input.train)?;
    let train_labels: Vec<usize> = input.train.iter().map(|&v| input.labels[v]).collect();
    let weights = node_weights(&targets, &class_weights(&train_labels, input.classes))?;

    let mut adam = Adam::new(config.adam, modulator.parameters().into_iter().chain([&block]));
    let mut log = Vec::with_capacity(config.epochs);
    let mut tape = Tape::new();
    for epoch in 1..=config.epochs {
        tape.clear();
        let mv = modulator.register(&mut tape, true);
        let hv = tape.param(block.clone());
        let xv = tape.constant(train_x.clone());
        let (logits, loss) = record_task_loss(&mut tape, backbone, &mv, hv, xv, &targets, &weights, config.reduction)?;
        tape.backward(loss)?;

        let predicted = argmax_classes(tape.value(logits), input.classes);
        log.push(EpochRecord {
            task,
            epoch,
            loss: tape.scalar(loss),
            train_accuracy: accuracy(&predicted, &train_labels),
        });

        let vars: Vec<Var> = mv.flatten().into_iter().chain([hv]).collect();
        let grads: Vec<&Array2<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).expect("trainable leaf reached by the loss"))
            .collect();
        let mut params = modulator.parameters_mut()?;
        params.push(&mut block);
        adam.step(&mut params, &grads)?;
    }
    tape.clear();

    head.set_task_block(task, &block)?;
    let train_accuracy = {
        let emb = backbone.embed(&train_x, &modulator)?;
        accuracy(&head.predict(&emb, input.classes)?, &train_labels)
    };
    let val_accuracy = if input.val.is_empty() {
        None
    } else {
        let vx = input.features.select(ndarray::Axis(0), input.val);
        let emb = backbone.embed(&vx, &modulator)?;
        let truth: Vec<usize> = input.val.iter().map(|&v| input.labels[v]).collect();
        Some(accuracy(&head.predict(&emb, input.classes)?, &truth))
    };
    head.freeze_task(task);
    let committed = bank.commit(prototype, modulator)?;
    debug_assert_eq!(committed, task);

    Ok(TrainOutcome {
        task,
        donor: warm.donor,
        log,
        train_accuracy,
        val_accuracy,
    })
}
