//! Files in and out: datasets, checkpoints, configuration and run reports.

pub mod checkpoint;
pub mod config;
pub mod planetoid;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::RunConfig;
pub use planetoid::{load_planetoid, write_planetoid, LoadedGraph};
pub use report::{write_outputs, Summary};

use crate::error::Result;

/// Loads `<dataset>.{content,cites}` from `data_dir` and applies the optional
/// feature row normalization.
pub fn load_dataset(cfg: &RunConfig) -> Result<LoadedGraph> {
    let (content, cites) = planetoid::find_dataset(&cfg.data_dir, &cfg.dataset)?;
    let mut loaded = load_planetoid(&content, &cites)?;
    if cfg.row_normalize {
        loaded.graph.row_normalize_features();
    }
    Ok(loaded)
}
