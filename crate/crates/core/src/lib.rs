//! Replay-free continual graph learning with task-aware adaptive modulation.
//!
//! A randomly initialized SGC backbone is frozen once and never trained.
//! Each task gets a small neural synapse modulator that rescales and shifts
//! the backbone's internal features per node, plus its own classifier
//! columns. Task prototypes (mean propagated features) pick a warm-start
//! donor for new modulators and pick the right frozen modulator at
//! inference, so nothing learned for an old task is ever overwritten.
//!
//! The guide in `book/` walks through each piece; its code samples are
//! compiled as doctests of this crate.

pub mod autodiff;
pub mod backbone;
pub mod classifier;
pub mod diagnostics;
mod error;
pub mod graph;
pub mod harness;
pub mod io;
pub mod nsm;
pub mod prototype;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// SHA-256 over the shapes and little-endian bytes of `tensors`, used to
/// assert that frozen state never changes.
pub fn fingerprint<'a>(tensors: impl IntoIterator<Item = &'a ndarray::Array2<f64>>) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in tensors {
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.iter() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/getting-started.md")]
    mod getting_started {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/continual.md")]
    mod continual {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
