//! Run configuration: a flat `key = value` file, overridable per key.
//!
//! ```text
//! # citeseer, three two-class tasks
//! dataset = citeseer
//! protocol = equal:2
//! seed = 1
//! ```

use std::path::{Path, PathBuf};

use crate::autodiff::Reduction;
use crate::error::{Error, Result};
use crate::harness::{ClassOrder, Method, Protocol, RunOptions, Variant};
use crate::trainer::{AdamConfig, TrainConfig};

pub const OUTPUT_DIR_ENV: &str = "TAAM_OUTPUT_DIR";
pub const DATA_DIR_ENV: &str = "TAAM_DATA_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub data_dir: PathBuf,
    pub method: Method,
    pub variant: Variant,
    pub protocol: Protocol,
    pub class_order: ClassOrder,
    pub hops: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub heads: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub reduction: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub precision: String,
    pub predict_all_classes: bool,
    pub row_normalize: bool,
}

pub const KEYS: &[&str] = &[
    "dataset",
    "data_dir",
    "method",
    "variant",
    "protocol",
    "class_order",
    "hops",
    "hidden_dim",
    "embedding_dim",
    "heads",
    "lr",
    "weight_decay",
    "epochs",
    "reduction",
    "seed",
    "output_dir",
    "precision",
    "predict_all_classes",
    "row_normalize",
];

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            dataset: "citeseer".into(),
            data_dir: std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from),
            method: Method::Taam,
            variant: Variant::Full,
            protocol: Protocol::Equal(2),
            class_order: ClassOrder::Ascending,
            hops: crate::backbone::DEFAULT_HOPS,
            hidden_dim: crate::backbone::DEFAULT_HIDDEN,
            embedding_dim: train.embedding_dim,
            heads: train.heads,
            lr: train.adam.lr,
            weight_decay: train.adam.weight_decay,
            epochs: train.epochs,
            reduction: "sum".into(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            precision: "f64".into(),
            predict_all_classes: false,
            row_normalize: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = v.to_string(),
            "data_dir" => self.data_dir = v.into(),
            "method" => self.method = v.parse()?,
            "variant" => self.variant = v.parse()?,
            "protocol" => self.protocol = v.parse()?,
            "class_order" => {
                self.class_order = match v {
                    "ascending" => ClassOrder::Ascending,
                    "shuffled" => ClassOrder::Shuffled,
                    _ => return Err(Error::Config(format!("class_order: {v:?} is not ascending|shuffled"))),
                }
            }
            "hops" => self.hops = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "embedding_dim" => self.embedding_dim = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "reduction" => self.reduction = v.to_string(),
            "seed" => self.seed = parse(key, v)?,
            "output_dir" => self.output_dir = v.into(),
            "precision" => self.precision = v.to_string(),
            "predict_all_classes" => self.predict_all_classes = parse(key, v)?,
            "row_normalize" => self.row_normalize = parse(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Defaults, then the file, then `TAAM_OUTPUT_DIR`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply_text(&std::fs::read_to_string(path)?, path)?;
        }
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = dir.into();
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision != "f64" {
            return Err(Error::Config(format!(
                "precision {:?} is not supported; only f64 is implemented",
                self.precision
            )));
        }
        for (k, v) in [
            ("hidden_dim", self.hidden_dim),
            ("embedding_dim", self.embedding_dim),
            ("heads", self.heads),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be >= 1")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        self.reduction()?;
        Ok(())
    }

    pub fn reduction(&self) -> Result<Reduction> {
        match self.reduction.as_str() {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            r => Err(Error::Config(format!("reduction {r:?} is not sum|mean"))),
        }
    }

    pub fn run_options(&self) -> Result<RunOptions> {
        Ok(RunOptions {
            method: self.method,
            variant: self.variant,
            hidden_dim: self.hidden_dim,
            hops: self.hops,
            predict_all_classes: self.predict_all_classes,
            train: TrainConfig {
                epochs: self.epochs,
                adam: AdamConfig {
                    lr: self.lr,
                    weight_decay: self.weight_decay,
                    ..AdamConfig::default()
                },
                reduction: self.reduction()?,
                init: self.variant.init(),
                embedding_dim: self.embedding_dim,
                heads: self.heads,
            },
        })
    }

    /// Every key with its value in the form [`RunConfig::set`] accepts.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let order = match self.class_order {
            ClassOrder::Ascending => "ascending",
            ClassOrder::Shuffled => "shuffled",
        };
        vec![
            ("dataset", self.dataset.clone()),
            ("data_dir", self.data_dir.display().to_string()),
            ("method", self.method.to_string()),
            ("variant", self.variant.to_string()),
            ("protocol", self.protocol.to_string()),
            ("class_order", order.to_string()),
            ("hops", self.hops.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("reduction", self.reduction.clone()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("precision", self.precision.clone()),
            ("predict_all_classes", self.predict_all_classes.to_string()),
            ("row_normalize", self.row_normalize.to_string()),
        ]
    }

    /// The fully resolved configuration as a JSON object of strings.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.pairs()
                .into_iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
                .collect(),
        )
    }

    /// Inverse of [`RunConfig::to_json`].
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config echo is not an object".into()))?;
        let mut cfg = Self::default();
        for (k, v) in obj {
            let v = v
                .as_str()
                .ok_or_else(|| Error::Config(format!("{k}: expected a string")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
