//! The frozen, randomly initialized SGC feature extractor with modulation
//! sites in front of each linear layer.
//!
//! With two layers the modulated forward pass is
//!
//! ```text
//! h⁰ = X'            (S^K X, computed once per task graph)
//! h¹ = NSM₀(h⁰) · W₁  W₁ : d_in × d_h
//! h² = NSM₁(h¹) · W₂  W₂ : d_h  × d_h
//! ```
//!
//! There is no bias and no activation between layers; the layer norm and
//! FiLM inside each modulator are the only nonlinearities.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nsm::{modulate_on_tape, uniform_fan_in, ForwardHooks, Modulator, ModulatorVars};
use crate::seed;

pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_HOPS: usize = 2;
pub const DEFAULT_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    layers: Vec<Array2<f64>>,
    hops: usize,
}

/// Intermediate values of one modulated forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulatedActivations {
    /// `h^(l)` entering each site.
    pub pre: Vec<Array2<f64>>,
    /// `h̃^(l)` leaving each site.
    pub modulated: Vec<Array2<f64>>,
    pub embedding: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct TapeActivations {
    pub pre: Vec<Var>,
    pub modulated: Vec<Var>,
    pub embedding: Var,
}

impl Backbone {
    /// Two-layer backbone with `hops = 2`.
    pub fn init(input_dim: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        Self::init_with(input_dim, hidden_dim, DEFAULT_LAYERS, DEFAULT_HOPS, seed)
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, deterministic per seed.
    pub fn init_with(input_dim: usize, hidden_dim: usize, num_layers: usize, hops: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || num_layers == 0 {
            return Err(Error::contract(format!(
                "backbone dims must be >= 1 (d_in={input_dim}, d_h={hidden_dim}, layers={num_layers})"
            )));
        }
        let mut rng = seed::rng(seed);
        let layers = (0..num_layers)
            .map(|l| {
                let fan_in = if l == 0 { input_dim } else { hidden_dim };
                uniform_fan_in(&mut rng, fan_in, hidden_dim, fan_in)
            })
            .collect();
        Ok(Self { layers, hops })
    }

    pub fn from_layers(layers: Vec<Array2<f64>>, hops: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("backbone without layers"));
        }
        for pair in layers.windows(2) {
            if pair[0].ncols() != pair[1].nrows() {
                return Err(Error::Shape {
                    op: "Backbone::from_layers",
                    left: pair[0].shape().to_vec(),
                    right: pair[1].shape().to_vec(),
                });
            }
        }
        Ok(Self { layers, hops })
    }

    pub fn layers(&self) -> &[Array2<f64>] {
        &self.layers
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].ncols()
    }

    /// Always true: there is no API that mutates backbone weights.
    pub fn is_frozen(&self) -> bool {
        true
    }

    /// Width of each modulation site: the input width of each layer.
    pub fn site_widths(&self) -> Vec<usize> {
        self.layers.iter().map(|w| w.nrows()).collect()
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        crate::fingerprint(self.layers.iter())
    }

    /// Records the modulated forward pass on `tape`. Backbone weights enter
    /// as constants.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        modulator: &ModulatorVars,
        hooks: ForwardHooks,
    ) -> Result<TapeActivations> {
        if modulator.sites.len() != self.layers.len() {
            return Err(Error::contract(format!(
                "modulator has {} sites, backbone has {} layers",
                modulator.sites.len(),
                self.layers.len()
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut modulated = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (w, site) in self.layers.iter().zip(&modulator.sites) {
            pre.push(h);
            let m = modulate_on_tape(tape, site, modulator.embedding, h, hooks)?;
            modulated.push(m);
            let wv = tape.constant(w.clone());
            h = tape.matmul(m, wv)?;
        }
        Ok(TapeActivations {
            pre,
            modulated,
            embedding: h,
        })
    }

    pub fn forward(&self, x: &Array2<f64>, modulator: &Modulator) -> Result<ModulatedActivations> {
        self.forward_with(x, modulator, ForwardHooks::default())
    }

    pub fn forward_with(
        &self,
        x: &Array2<f64>,
        modulator: &Modulator,
        hooks: ForwardHooks,
    ) -> Result<ModulatedActivations> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape {
                op: "Backbone::forward",
                left: x.shape().to_vec(),
                right: self.layers[0].shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let mv = modulator.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let acts = self.forward_on_tape(&mut tape, xv, &mv, hooks)?;
        Ok(ModulatedActivations {
            pre: acts.pre.iter().map(|&v| tape.value(v).clone()).collect(),
            modulated: acts.modulated.iter().map(|&v| tape.value(v).clone()).collect(),
            embedding: tape.value(acts.embedding).clone(),
        })
    }

    /// Embedding only.
    pub fn embed(&self, x: &Array2<f64>, modulator: &Modulator) -> Result<Array2<f64>> {
        Ok(self.forward(x, modulator)?.embedding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nsm::SiteParams;
    use ndarray::array;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Backbone::init(6, 4, 3).unwrap();
        assert_eq!(a, Backbone::init(6, 4, 3).unwrap());
        assert_ne!(a, Backbone::init(6, 4, 4).unwrap());
        let bound = 1.0 / 6f64.sqrt();
        assert!(a.layers()[0].iter().all(|v| v.abs() <= bound));
        assert_eq!(a.site_widths(), vec![6, 4]);
        assert!(a.is_frozen());
    }

    fn identity_modulator(widths: &[usize], heads: usize) -> Modulator {
        let sites = widths
            .iter()
            .map(|&d| {
                let mut b = Array2::zeros((heads * 2 * d, 1));
                for (i, v) in b.iter_mut().enumerate() {
                    *v = if i % (2 * d) < d { 1.0 } else { 0.0 };
                }
                SiteParams::new(
                    Array2::zeros((heads * 2 * d, 2)),
                    b,
                    Array2::from_elem((heads, d), 0.3),
                    Array2::zeros((1, heads)),
                )
                .unwrap()
            })
            .collect();
        Modulator::from_parts(sites, Array2::zeros((2, 1)), false).unwrap()
    }

    #[test]
    fn identity_modulation_is_plain_sgc() {
        let bb = Backbone::init(3, 4, 1).unwrap();
        let m = identity_modulator(&[3, 4], 2);
        let x = array![[1.0, 0.5, -2.0], [0.0, 3.0, 1.0]];
        let hooks = ForwardHooks { skip_layer_norm: true };
        let out = bb.forward_with(&x, &m, hooks).unwrap();
        let expected = x.dot(&bb.layers()[0]).dot(&bb.layers()[1]);
        for (a, b) in out.embedding.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_scalar_trace() {
        // d_in = d_h = 1, unit weights: layer norm of a singleton row is 0, so
        // each site emits its β; the embedding is β₂ · W₂.
        let bb = Backbone::from_layers(vec![array![[1.0]], array![[1.0]]], 2).unwrap();
        let site = |beta: f64| {
            SiteParams::new(
                array![[0.0], [0.0]],
                array![[1.0], [beta]],
                array![[1.0]],
                array![[0.0]],
            )
            .unwrap()
        };
        let m = Modulator::from_parts(vec![site(0.4), site(-1.5)], array![[1.0]], false).unwrap();
        let out = bb.forward(&array![[7.0]], &m).unwrap();
        assert_eq!(out.modulated[0], array![[0.4]]);
        assert_eq!(out.embedding, array![[-1.5]]);
    }

    #[test]
    fn site_mismatch_is_rejected() {
        let bb = Backbone::init(3, 4, 1).unwrap();
        let m = Modulator::init(&[3], 2, 1, 0).unwrap();
        assert!(bb.forward(&Array2::zeros((1, 3)), &m).is_err());
        let m = Modulator::init(&[3, 4], 2, 1, 0).unwrap();
        assert!(bb.forward(&Array2::zeros((1, 5)), &m).is_err());
    }
}
