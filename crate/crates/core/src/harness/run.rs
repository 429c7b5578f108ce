//! Sequential training and task-agnostic evaluation over a task stream.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;

use super::metrics::{average_accuracy, average_forgetting, AccuracyMatrix};
use super::stream::PreparedTask;
use crate::autodiff::{Tape, Var};
use crate::backbone::Backbone;
use crate::classifier::{argmax_classes, ClassifierHead};
use crate::error::{Error, Result};
use crate::prototype::{Prototype, PrototypeBank};
use crate::seed::{self, Purpose};
use crate::trainer::{accuracy, class_weights, train_task, Adam, EpochRecord, InitStrategy, TaskSeeds, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Prototype retrieval picks the modulator and class mask.
    Taam,
    /// Same pipeline, true task ID instead of retrieval.
    Oracle,
    /// One trainable backbone and head, updated naively per task.
    Finetune,
}

/// Ablation variants of the modulated pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Random init; inference always uses the latest modulator.
    NsmOnly,
    /// Random init; inference uses prototype retrieval.
    RetrievalOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::NsmOnly, Variant::RetrievalOnly, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::NsmOnly => "nsm_only",
            Variant::RetrievalOnly => "nsm_retrieval",
            Variant::Full => "full",
        }
    }

    pub fn init(self) -> InitStrategy {
        match self {
            Variant::Full => InitStrategy::TaskAware,
            Variant::NsmOnly | Variant::RetrievalOnly => InitStrategy::Random,
        }
    }
}

macro_rules! text_enum {
    ($ty:ty, $($name:literal => $v:path),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $name,)+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(Error::Config(format!(
                        "unknown value {s:?}; expected one of: {}",
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(Method, "taam" => Method::Taam, "oracle" => Method::Oracle, "finetune" => Method::Finetune);
text_enum!(Variant, "full" => Variant::Full, "nsm_only" => Variant::NsmOnly, "nsm_retrieval" => Variant::RetrievalOnly);

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub method: Method,
    pub variant: Variant,
    pub hidden_dim: usize,
    pub hops: usize,
    pub train: TrainConfig,
    /// Argmax over every seen class instead of the retrieved task's classes.
    pub predict_all_classes: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            method: Method::Taam,
            variant: Variant::Full,
            hidden_dim: crate::backbone::DEFAULT_HIDDEN,
            hops: crate::backbone::DEFAULT_HOPS,
            train: TrainConfig::default(),
            predict_all_classes: false,
        }
    }
}

/// Which modulator served one `(stage, task)` evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Retrieval {
    pub stage: usize,
    pub task: usize,
    pub retrieved: usize,
}

impl Retrieval {
    pub fn correct(&self) -> bool {
        self.task == self.retrieved
    }
}

/// The naive baseline: backbone layers and every head column trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneModel {
    pub layers: Vec<Array2<f64>>,
    pub head: ClassifierHead,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Learner {
    Modulated {
        backbone: Backbone,
        bank: PrototypeBank,
        head: ClassifierHead,
    },
    Finetune(FinetuneModel),
}

/// Everything needed to continue a run after `matrix.stages()` tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub learner: Learner,
    pub matrix: AccuracyMatrix,
    pub retrievals: Vec<Retrieval>,
    pub donors: Vec<Option<usize>>,
}

impl RunState {
    pub fn fresh(input_dim: usize, tasks: usize, opts: &RunOptions, seed: u64) -> Result<Self> {
        let backbone = Backbone::init_with(
            input_dim,
            opts.hidden_dim,
            crate::backbone::DEFAULT_LAYERS,
            opts.hops,
            seed::derive(seed, Purpose::Backbone, 0),
        )?;
        let learner = match opts.method {
            Method::Finetune => Learner::Finetune(FinetuneModel {
                layers: backbone.layers().to_vec(),
                head: ClassifierHead::new(opts.hidden_dim),
            }),
            Method::Taam | Method::Oracle => Learner::Modulated {
                backbone,
                bank: PrototypeBank::new(),
                head: ClassifierHead::new(opts.hidden_dim),
            },
        };
        Ok(Self {
            learner,
            matrix: AccuracyMatrix::new(tasks),
            retrievals: Vec::new(),
            donors: Vec::new(),
        })
    }

    pub fn stages(&self) -> usize {
        self.matrix.stages()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub task: usize,
    pub donor: Option<usize>,
    pub log: Vec<EpochRecord>,
    pub val_accuracy: Option<f64>,
    pub row: Vec<f64>,
    pub retrievals: Vec<Retrieval>,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub matrix: AccuracyMatrix,
    pub average_accuracy: f64,
    /// `None` for single-task streams.
    pub average_forgetting: Option<f64>,
    pub retrievals: Vec<Retrieval>,
    pub per_stage_retrieval_accuracy: Vec<f64>,
    pub donors: Vec<Option<usize>>,
    pub state: RunState,
}

/// Percent of correct retrievals at each stage; empty for the finetuning
/// baseline, which never retrieves.
pub fn per_stage_retrieval_accuracy(retrievals: &[Retrieval], stages: usize) -> Vec<f64> {
    if retrievals.is_empty() {
        return Vec::new();
    }
    (1..=stages)
        .map(|t| {
            let at: Vec<&Retrieval> = retrievals.iter().filter(|r| r.stage == t).collect();
            100.0 * at.iter().filter(|r| r.correct()).count() as f64 / at.len().max(1) as f64
        })
        .collect()
}

pub fn task_seeds(seed: u64, task: usize) -> TaskSeeds {
    TaskSeeds {
        modulator: seed::derive(seed, Purpose::Modulator, task as u64),
        head: seed::derive(seed, Purpose::Head, task as u64),
    }
}

/// Drives a run one task at a time so it can be checkpointed between tasks.
pub struct ContinualRun<'a> {
    tasks: &'a [PreparedTask],
    opts: RunOptions,
    seed: u64,
    state: RunState,
}

impl<'a> ContinualRun<'a> {
    pub fn new(tasks: &'a [PreparedTask], opts: RunOptions, seed: u64) -> Result<Self> {
        let first = tasks.first().ok_or_else(|| Error::contract("empty task stream"))?;
        let state = RunState::fresh(first.features.ncols(), tasks.len(), &opts, seed)?;
        Ok(Self {
            tasks,
            opts,
            seed,
            state,
        })
    }

    pub fn resume(tasks: &'a [PreparedTask], opts: RunOptions, seed: u64, state: RunState) -> Result<Self> {
        if state.matrix.tasks() != tasks.len() {
            return Err(Error::contract(format!(
                "state is for {} tasks, stream has {}",
                state.matrix.tasks(),
                tasks.len()
            )));
        }
        let finetune = matches!(state.learner, Learner::Finetune(_));
        if finetune != (opts.method == Method::Finetune) {
            return Err(Error::contract("state and options disagree on the method"));
        }
        Ok(Self {
            tasks,
            opts,
            seed,
            state,
        })
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn options(&self) -> &RunOptions {
        &self.opts
    }

    pub fn is_done(&self) -> bool {
        self.state.stages() == self.tasks.len()
    }

    /// Trains the next task and evaluates every task seen so far.
    pub fn step(&mut self) -> Result<Option<StageReport>> {
        if self.is_done() {
            return Ok(None);
        }
        let t = self.state.stages() + 1;
        let task = &self.tasks[t - 1];
        let seeds = task_seeds(self.seed, t);
        let mut cfg = self.opts.train.clone();
        cfg.init = self.opts.variant.init();

        let clock = Instant::now();
        let (donor, log, val_accuracy) = match &mut self.state.learner {
            Learner::Modulated { backbone, bank, head } => {
                let out = train_task(task.input(), backbone, bank, head, &cfg, seeds)?;
                (out.donor, out.log, out.val_accuracy)
            }
            Learner::Finetune(model) => {
                let (log, val) = train_finetune(model, task, &cfg, seeds)?;
                (None, log, val)
            }
        };
        let train_seconds = clock.elapsed().as_secs_f64();

        let mut row = Vec::with_capacity(t);
        let mut retrievals = Vec::new();
        for j in 1..=t {
            let (acc, retrieval) = self.evaluate(t, j)?;
            row.push(acc);
            retrievals.extend(retrieval);
        }
        self.state.matrix.push_row(row.clone())?;
        self.state.retrievals.extend_from_slice(&retrievals);
        self.state.donors.push(donor);
        Ok(Some(StageReport {
            task: t,
            donor,
            log,
            val_accuracy,
            row,
            retrievals,
            train_seconds,
        }))
    }

    /// Accuracy on task `j`'s test set at stage `t`.
    pub fn evaluate(&self, t: usize, j: usize) -> Result<(f64, Option<Retrieval>)> {
        let task = &self.tasks[j - 1];
        if task.test.is_empty() {
            return Err(Error::contract(format!("task {j} has no test nodes")));
        }
        let x = task.rows(&task.test);
        let truth = task.test_labels();
        match &self.state.learner {
            Learner::Modulated { backbone, bank, head } => {
                let retrieved = match (self.opts.method, self.opts.variant) {
                    (Method::Oracle, _) => j,
                    (_, Variant::NsmOnly) => t,
                    _ => bank.retrieve(&Prototype::from_rows(&task.features, &task.test)?)?.0,
                };
                let entry = bank
                    .get(retrieved)
                    .ok_or_else(|| Error::contract(format!("task {retrieved} not in the bank")))?;
                let emb = backbone.embed(&x, &entry.modulator)?;
                let classes = if self.opts.predict_all_classes {
                    head.all_classes()
                } else {
                    head.task_classes(retrieved)
                };
                let acc = accuracy(&head.predict(&emb, &classes)?, &truth);
                Ok((
                    acc,
                    Some(Retrieval {
                        stage: t,
                        task: j,
                        retrieved,
                    }),
                ))
            }
            Learner::Finetune(model) => {
                let emb = plain_forward(&model.layers, &x);
                let pred = model.head.predict(&emb, &model.head.all_classes())?;
                Ok((accuracy(&pred, &truth), None))
            }
        }
    }

    pub fn finish(self) -> Result<RunResult> {
        if !self.is_done() {
            return Err(Error::contract(format!(
                "run stopped after {} of {} tasks",
                self.state.stages(),
                self.tasks.len()
            )));
        }
        let m = &self.state.matrix;
        Ok(RunResult {
            average_accuracy: average_accuracy(m)?,
            average_forgetting: if m.tasks() >= 2 {
                Some(average_forgetting(m)?)
            } else {
                None
            },
            per_stage_retrieval_accuracy: per_stage_retrieval_accuracy(&self.state.retrievals, m.tasks()),
            matrix: m.clone(),
            retrievals: self.state.retrievals.clone(),
            donors: self.state.donors.clone(),
            state: self.state,
        })
    }
}

/// Runs every task of `tasks` in order.
pub fn run_continual(tasks: &[PreparedTask], opts: RunOptions, seed: u64) -> Result<RunResult> {
    let mut run = ContinualRun::new(tasks, opts, seed)?;
    while run.step()?.is_some() {}
    run.finish()
}

fn plain_forward(layers: &[Array2<f64>], x: &Array2<f64>) -> Array2<f64> {
    layers.iter().fold(x.clone(), |h, w| h.dot(w))
}

/// One task of the finetuning baseline: cross-entropy over every seen
/// class, all layers and all columns trainable.
fn train_finetune(
    model: &mut FinetuneModel,
    task: &PreparedTask,
    cfg: &TrainConfig,
    seeds: TaskSeeds,
) -> Result<(Vec<EpochRecord>, Option<f64>)> {
    model.head.extend(task.id, &task.classes, seeds.head)?;
    let classes = model.head.all_classes();
    let x = task.rows(&task.train);
    let labels: Vec<usize> = task.train.iter().map(|&v| task.labels[v]).collect();
    let targets: Vec<usize> = labels
        .iter()
        .map(|c| classes.iter().position(|k| k == c).expect("registered above"))
        .collect();
    let w = class_weights(&labels, &classes);
    let node_w: Vec<f64> = targets.iter().map(|&k| w[k]).collect();

    let mut params: Vec<Array2<f64>> = model.layers.clone();
    params.push(model.head.weight().clone());
    let mut adam = Adam::new(cfg.adam, params.iter());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();
    for epoch in 1..=cfg.epochs {
        tape.clear();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let mut h = tape.constant(x.clone());
        for &wv in &vars {
            h = tape.matmul(h, wv)?;
        }
        let loss = tape.weighted_cross_entropy(h, &targets, &node_w, cfg.reduction)?;
        tape.backward(loss)?;
        let predicted = argmax_classes(tape.value(h), &classes);
        log.push(EpochRecord {
            task: task.id,
            epoch,
            loss: tape.scalar(loss),
            train_accuracy: accuracy(&predicted, &labels),
        });
        let grads: Vec<&Array2<f64>> = vars.iter().map(|&v| tape.grad(v).expect("param")).collect();
        let mut refs: Vec<&mut Array2<f64>> = params.iter_mut().collect();
        adam.step(&mut refs, &grads)?;
    }
    let head_w = params.pop().expect("head pushed last");
    model.head.set_weight(head_w)?;
    model.layers = params;
    let val = if task.val.is_empty() {
        None
    } else {
        let emb = plain_forward(&model.layers, &task.rows(&task.val));
        let truth: Vec<usize> = task.val.iter().map(|&v| task.labels[v]).collect();
        Some(accuracy(&model.head.predict(&emb, &classes)?, &truth))
    };
    Ok((log, val))
}
