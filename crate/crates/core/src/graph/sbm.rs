use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::SparseGraph;
use crate::error::{Error, Result};
use crate::seed;

/// Stochastic block model with Gaussian class-conditional features.
///
/// Class `c` owns nodes `c * nodes_per_class .. (c + 1) * nodes_per_class`.
/// Its feature mean is `separation / sqrt(2)` along axis `mean_group(c)`, so
/// any two classes in different groups have means exactly `separation` apart.
/// By default every class is its own group; [`SbmSpec::mean_groups`] lets
/// several classes share one distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmSpec {
    pub num_classes: usize,
    pub nodes_per_class: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub separation: f64,
    pub noise_std: f64,
    pub mean_groups: Option<Vec<usize>>,
}

impl SbmSpec {
    pub fn new(num_classes: usize, nodes_per_class: usize) -> Self {
        Self {
            num_classes,
            nodes_per_class,
            p_in: 0.1,
            p_out: 0.01,
            feature_dim: num_classes.max(1),
            separation: 10.0,
            noise_std: 1.0,
            mean_groups: None,
        }
    }

    pub fn probabilities(mut self, p_in: f64, p_out: f64) -> Self {
        self.p_in = p_in;
        self.p_out = p_out;
        self
    }

    pub fn features(mut self, feature_dim: usize, separation: f64) -> Self {
        self.feature_dim = feature_dim;
        self.separation = separation;
        self
    }

    pub fn noise(mut self, std: f64) -> Self {
        self.noise_std = std;
        self
    }

    pub fn mean_groups(mut self, groups: Vec<usize>) -> Self {
        self.mean_groups = Some(groups);
        self
    }

    fn group(&self, class: usize) -> usize {
        self.mean_groups.as_ref().map_or(class, |g| g[class])
    }
}

pub fn generate_sbm(spec: &SbmSpec, seed: u64) -> Result<SparseGraph> {
    if !(0.0..=1.0).contains(&spec.p_in) || !(0.0..=spec.p_in).contains(&spec.p_out) {
        return Err(Error::contract(format!(
            "SBM needs 0 <= p_out <= p_in <= 1, got p_in={} p_out={}",
            spec.p_in, spec.p_out
        )));
    }
    if spec.separation < 0.0 || spec.noise_std < 0.0 {
        return Err(Error::contract("SBM separation and noise must be >= 0"));
    }
    if let Some(g) = &spec.mean_groups {
        if g.len() != spec.num_classes {
            return Err(Error::contract(format!(
                "{} mean groups for {} classes",
                g.len(),
                spec.num_classes
            )));
        }
    }
    let groups = (0..spec.num_classes).map(|c| spec.group(c) + 1).max().unwrap_or(0);
    if spec.feature_dim < groups {
        return Err(Error::contract(format!(
            "feature_dim {} cannot hold {groups} orthogonal class means",
            spec.feature_dim
        )));
    }

    let n = spec.num_classes * spec.nodes_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / spec.nodes_per_class.max(1)).collect();
    let mut rng = seed::rng(seed);

    let offset = spec.separation / std::f64::consts::SQRT_2;
    let mut features = Array2::zeros((n, spec.feature_dim));
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = spec.noise_std * z;
        }
        row[spec.group(labels[i])] += offset;
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    SparseGraph::from_edges(features, labels, edges)
}
