#![allow(dead_code)]

use taam::graph::{generate_sbm, SbmSpec, SparseGraph};
use taam::harness::{build_stream, prepare_stream, ClassOrder, PreparedTask, Protocol};

/// `tasks` two-class tasks, 60 nodes per class, separation 10.
pub fn sbm_stream(tasks: usize, seed: u64) -> (SparseGraph, Vec<PreparedTask>) {
    sbm_stream_from(SbmSpec::new(2 * tasks, 60), seed)
}

pub fn sbm_stream_from(spec: SbmSpec, seed: u64) -> (SparseGraph, Vec<PreparedTask>) {
    let g = generate_sbm(&spec, seed).unwrap();
    let stream = build_stream(&g, &Protocol::Equal(2), ClassOrder::Ascending, seed).unwrap();
    let tasks = prepare_stream(&g, &stream, 2).unwrap();
    (g, tasks)
}
