//! Neural synapse modulators: per-task, per-site, node-attentive FiLM.
//!
//! For one modulation site of width `d` with `K` heads and a task embedding
//! `e` of length `d_e`:
//!
//! ```text
//! B      = reshape(W_base · e + b_base)        K × 2d   rows are [γ-part ‖ β-part]
//! α_v    = softmax(W_attn · h_v + b_attn)      K
//! [γ_v, β_v] = α_v · B                          2d
//! h̃_v    = γ_v ⊙ LayerNorm(h_v) + β_v
//! ```

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_EMBEDDING_DIM: usize = 64;
pub const DEFAULT_HEADS: usize = 3;
pub const EMBEDDING_INIT_STD: f64 = 0.02;

pub(crate) fn uniform_fan_in(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

fn embedding_draw(d_e: usize, seed: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed);
    let normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn((d_e, 1), || normal.sample(&mut rng))
}

/// Attention and base-generator weights of one modulation site.
///
/// Shapes: `w_base` is `K·2d × d_e`, `b_base` is `K·2d × 1`, `w_attn` is
/// `K × d`, `b_attn` is `1 × K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteParams {
    w_base: Array2<f64>,
    b_base: Array2<f64>,
    w_attn: Array2<f64>,
    b_attn: Array2<f64>,
}

impl SiteParams {
    pub fn new(w_base: Array2<f64>, b_base: Array2<f64>, w_attn: Array2<f64>, b_attn: Array2<f64>) -> Result<Self> {
        let heads = w_attn.nrows();
        let width = w_attn.ncols();
        let ok = heads >= 1
            && width >= 1
            && w_base.nrows() == heads * 2 * width
            && b_base.dim() == (heads * 2 * width, 1)
            && b_attn.dim() == (1, heads);
        if !ok {
            return Err(Error::Shape {
                op: "SiteParams::new",
                left: [w_base.shape(), b_base.shape()].concat(),
                right: [w_attn.shape(), b_attn.shape()].concat(),
            });
        }
        let all = [&w_base, &b_base, &w_attn, &b_attn];
        if all.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                op: "SiteParams::new",
                row: 0,
            });
        }
        Ok(Self {
            w_base,
            b_base,
            w_attn,
            b_attn,
        })
    }

    fn random(width: usize, d_e: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let rows = heads * 2 * width;
        Self {
            w_base: uniform_fan_in(rng, rows, d_e, d_e),
            b_base: uniform_fan_in(rng, rows, 1, d_e),
            w_attn: uniform_fan_in(rng, heads, width, width),
            b_attn: uniform_fan_in(rng, 1, heads, width),
        }
    }

    pub fn width(&self) -> usize {
        self.w_attn.ncols()
    }

    pub fn heads(&self) -> usize {
        self.w_attn.nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.w_base.ncols()
    }

    pub fn w_base(&self) -> &Array2<f64> {
        &self.w_base
    }

    pub fn b_base(&self) -> &Array2<f64> {
        &self.b_base
    }

    pub fn w_attn(&self) -> &Array2<f64> {
        &self.w_attn
    }

    pub fn b_attn(&self) -> &Array2<f64> {
        &self.b_attn
    }

    /// Tensors in storage order: `W_base, b_base, W_attn, b_attn`.
    pub fn tensors(&self) -> [&Array2<f64>; 4] {
        [&self.w_base, &self.b_base, &self.w_attn, &self.b_attn]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [&mut self.w_base, &mut self.b_base, &mut self.w_attn, &mut self.b_attn]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> SiteVars {
        let [w_base, b_base, w_attn, b_attn] = self.tensors().map(|t| tape.leaf(t.clone(), trainable));
        SiteVars {
            w_base,
            b_base,
            w_attn,
            b_attn,
            width: self.width(),
            heads: self.heads(),
        }
    }
}

/// A site's parameters as recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SiteVars {
    pub w_base: Var,
    pub b_base: Var,
    pub w_attn: Var,
    pub b_attn: Var,
    pub width: usize,
    pub heads: usize,
}

/// A modulator's parameters as recorded on a tape.
#[derive(Debug, Clone)]
pub struct ModulatorVars {
    pub sites: Vec<SiteVars>,
    pub embedding: Var,
}

impl ModulatorVars {
    /// Vars in [`Modulator::parameters`] order.
    pub fn flatten(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self
            .sites
            .iter()
            .flat_map(|s| [s.w_base, s.b_base, s.w_attn, s.b_attn])
            .collect();
        out.push(self.embedding);
        out
    }
}

/// Diagnostic switches for the modulated forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardHooks {
    /// Feed `h` straight into the FiLM transform instead of `LayerNorm(h)`.
    pub skip_layer_norm: bool,
}

/// `K × 2d` base heads on the tape.
pub fn base_heads_on_tape(tape: &mut Tape, site: &SiteVars, embedding: Var) -> Result<Var> {
    let projected = tape.matmul(site.w_base, embedding)?;
    let flat = tape.add(projected, site.b_base)?;
    tape.reshape(flat, site.heads, 2 * site.width)
}

/// `n × K` attention weights on the tape.
pub fn node_attention_on_tape(tape: &mut Tape, site: &SiteVars, h: Var) -> Result<Var> {
    let wt = tape.transpose(site.w_attn);
    let scores = tape.matmul(h, wt)?;
    let scores = tape.add_row(scores, site.b_attn)?;
    tape.softmax_rows(scores)
}

/// Full site modulation on the tape; returns `h̃`.
pub fn modulate_on_tape(tape: &mut Tape, site: &SiteVars, embedding: Var, h: Var, hooks: ForwardHooks) -> Result<Var> {
    let width = tape.value(h).ncols();
    if width != site.width {
        return Err(Error::Shape {
            op: "modulate",
            left: tape.value(h).shape().to_vec(),
            right: vec![site.heads, site.width],
        });
    }
    let heads = base_heads_on_tape(tape, site, embedding)?;
    let alpha = node_attention_on_tape(tape, site, h)?;
    let film = tape.matmul(alpha, heads)?;
    let gamma = tape.slice_cols(film, 0, site.width)?;
    let beta = tape.slice_cols(film, site.width, 2 * site.width)?;
    let normed = if hooks.skip_layer_norm {
        h
    } else {
        tape.layer_norm(h, LAYER_NORM_EPS)
    };
    let scaled = tape.mul(gamma, normed)?;
    tape.add(scaled, beta)
}

fn check_embedding(site: &SiteParams, e: &Array2<f64>) -> Result<()> {
    if e.dim() != (site.embedding_dim(), 1) {
        return Err(Error::Shape {
            op: "base_heads",
            left: site.w_base.shape().to_vec(),
            right: e.shape().to_vec(),
        });
    }
    Ok(())
}

/// `B_τ = reshape(W_base · e + b_base)` as a `K × 2d` matrix.
pub fn base_heads(site: &SiteParams, embedding: &Array2<f64>) -> Result<Array2<f64>> {
    check_embedding(site, embedding)?;
    let mut tape = Tape::new();
    let sv = site.register(&mut tape, false);
    let e = tape.constant(embedding.clone());
    let b = base_heads_on_tape(&mut tape, &sv, e)?;
    Ok(tape.value(b).clone())
}

/// `α = softmax_rows(H · W_attnᵀ + b_attn)`.
pub fn node_attention(site: &SiteParams, h: &Array2<f64>) -> Result<Array2<f64>> {
    if h.ncols() != site.width() {
        return Err(Error::Shape {
            op: "node_attention",
            left: h.shape().to_vec(),
            right: site.w_attn.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let sv = site.register(&mut tape, false);
    let hv = tape.constant(h.clone());
    let a = node_attention_on_tape(&mut tape, &sv, hv)?;
    Ok(tape.value(a).clone())
}

/// Per-node `(γ, β)` for every row of `h`.
pub fn modulation_params(site: &SiteParams, embedding: &Array2<f64>, h: &Array2<f64>) -> Result<ModulationParams> {
    let b = base_heads(site, embedding)?;
    let alpha = node_attention(site, h)?;
    let film = alpha.dot(&b);
    let d = site.width();
    Ok(ModulationParams {
        gamma: film.slice(ndarray::s![.., ..d]).to_owned(),
        beta: film.slice(ndarray::s![.., d..]).to_owned(),
    })
}

/// `h̃ = γ ⊙ LayerNorm(h) + β` with node-attentive `γ, β`.
pub fn modulate(site: &SiteParams, embedding: &Array2<f64>, h: &Array2<f64>) -> Result<Array2<f64>> {
    check_embedding(site, embedding)?;
    let mut tape = Tape::new();
    let sv = site.register(&mut tape, false);
    let e = tape.constant(embedding.clone());
    let hv = tape.constant(h.clone());
    let out = modulate_on_tape(&mut tape, &sv, e, hv, ForwardHooks::default())?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulationParams {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

/// One task's modulator: a task embedding plus one [`SiteParams`] per
/// backbone modulation site. Once frozen it can no longer be mutated.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulator {
    sites: Vec<SiteParams>,
    embedding: Array2<f64>,
    frozen: bool,
}

impl Modulator {
    /// Fresh random modulator: fan-in uniform weights, `N(0, 0.02²)` embedding.
    pub fn init(widths: &[usize], embedding_dim: usize, heads: usize, seed: u64) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || embedding_dim == 0 || heads == 0 {
            return Err(Error::contract(format!(
                "modulator needs positive dims, got widths={widths:?} d_e={embedding_dim} heads={heads}"
            )));
        }
        let mut rng = seed::rng(seed);
        let sites = widths
            .iter()
            .map(|&w| SiteParams::random(w, embedding_dim, heads, &mut rng))
            .collect();
        let embedding = embedding_draw(embedding_dim, rng.random());
        Ok(Self {
            sites,
            embedding,
            frozen: false,
        })
    }

    pub fn from_parts(sites: Vec<SiteParams>, embedding: Array2<f64>, frozen: bool) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::contract("modulator without sites"));
        }
        for s in &sites {
            check_embedding(s, &embedding)?;
        }
        Ok(Self {
            sites,
            embedding,
            frozen,
        })
    }

    /// Copies every site's attention and base-generator weights bitwise and
    /// draws a fresh task embedding. The result is trainable.
    pub fn clone_structural(&self, seed: u64) -> Result<Self> {
        if !self.frozen {
            return Err(Error::contract(
                "structural copies are only taken from frozen modulators",
            ));
        }
        Ok(Self {
            sites: self.sites.clone(),
            embedding: embedding_draw(self.embedding_dim(), seed),
            frozen: false,
        })
    }

    pub fn sites(&self) -> &[SiteParams] {
        &self.sites
    }

    pub fn widths(&self) -> Vec<usize> {
        self.sites.iter().map(SiteParams::width).collect()
    }

    pub fn heads(&self) -> usize {
        self.sites[0].heads()
    }

    /// Task embedding as a `d_e × 1` column.
    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Parameters in storage order: per site `W_base, b_base, W_attn, b_attn`,
    /// then the task embedding.
    pub fn parameters(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = self.sites.iter().flat_map(|s| s.tensors()).collect();
        out.push(&self.embedding);
        out
    }

    pub fn parameters_mut(&mut self) -> Result<Vec<&mut Array2<f64>>> {
        if self.frozen {
            return Err(Error::contract("modulator is frozen"));
        }
        let mut out: Vec<&mut Array2<f64>> = self.sites.iter_mut().flat_map(|s| s.tensors_mut()).collect();
        out.push(&mut self.embedding);
        Ok(out)
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModulatorVars {
        let sites = self.sites.iter().map(|s| s.register(tape, trainable)).collect();
        let embedding = tape.leaf(self.embedding.clone(), trainable);
        ModulatorVars { sites, embedding }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn site(width: usize, heads: usize, d_e: usize, seed: u64) -> SiteParams {
        SiteParams::random(width, d_e, heads, &mut crate::seed::rng(seed))
    }

    #[test]
    fn base_heads_zero_weight_and_zero_embedding() {
        let mut s = site(2, 3, 4, 1);
        s.w_base.fill(0.0);
        let b = base_heads(&s, &Array2::from_elem((4, 1), 0.7)).unwrap();
        assert_eq!(b.dim(), (3, 4));
        let flat: Vec<f64> = b.iter().copied().collect();
        assert_eq!(flat, s.b_base.iter().copied().collect::<Vec<_>>());
        let s = site(2, 3, 4, 2);
        let b = base_heads(&s, &Array2::zeros((4, 1))).unwrap();
        let flat: Vec<f64> = b.iter().copied().collect();
        assert_eq!(flat, s.b_base.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn base_heads_scalar_trace() {
        let s = SiteParams::new(array![[2.0], [3.0]], array![[0.0], [0.0]], array![[0.5]], array![[0.0]]).unwrap();
        assert_eq!(base_heads(&s, &array![[1.0]]).unwrap(), array![[2.0, 3.0]]);
    }

    #[test]
    fn attention_examples() {
        let one = site(3, 1, 2, 3);
        let h = array![[1.0, -2.0, 0.5], [4.0, 0.0, 1.0]];
        assert_eq!(node_attention(&one, &h).unwrap(), array![[1.0], [1.0]]);

        let mut flat = site(3, 3, 2, 4);
        flat.w_attn.fill(0.0);
        flat.b_attn.fill(0.0);
        for v in node_attention(&flat, &h).unwrap().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let varied = site(3, 3, 2, 5);
        let a = node_attention(&varied, &h).unwrap();
        assert_ne!(a.row(0), a.row(1));
    }

    #[test]
    fn identity_film_is_layer_norm() {
        let d = 3;
        let mut s = site(d, 2, 2, 6);
        s.w_base.fill(0.0);
        for (i, v) in s.b_base.iter_mut().enumerate() {
            *v = if i % (2 * d) < d { 1.0 } else { 0.0 };
        }
        let h = array![[1.0, 2.0, 4.0], [-1.0, 0.0, 3.0]];
        let out = modulate(&s, &Array2::zeros((2, 1)), &h).unwrap();
        let (ln, _) = crate::autodiff::layer_norm(&h, LAYER_NORM_EPS);
        for (a, b) in out.iter().zip(ln.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gamma_erases_features() {
        let d = 2;
        let mut s = site(d, 2, 2, 7);
        s.w_base.fill(0.0);
        for (i, v) in s.b_base.iter_mut().enumerate() {
            *v = if i % (2 * d) < d {
                0.0
            } else {
                0.25 * (i % d + 1) as f64
            };
        }
        let h = array![[10.0, -3.0], [0.5, 0.7], [100.0, 2.0]];
        let out = modulate(&s, &Array2::zeros((2, 1)), &h).unwrap();
        for row in out.rows() {
            assert!((row[0] - 0.25).abs() < 1e-15 && (row[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn init_defaults_and_determinism() {
        let a = Modulator::init(&[5, 7], DEFAULT_EMBEDDING_DIM, DEFAULT_HEADS, 9).unwrap();
        let b = Modulator::init(&[5, 7], DEFAULT_EMBEDDING_DIM, DEFAULT_HEADS, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.embedding().len(), 64);
        assert_eq!(a.heads(), 3);
        assert!(!a.is_frozen());
        for s in a.sites() {
            let bound = 1.0 / (s.width() as f64).sqrt();
            assert!(s.w_attn().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn clone_structural_copies_sites_only() {
        let mut src = Modulator::init(&[4, 6], 8, 3, 1).unwrap();
        assert!(src.clone_structural(2).is_err());
        src.freeze();
        let before = src.clone();
        let copy = src.clone_structural(2).unwrap();
        assert_eq!(copy.sites(), src.sites());
        assert_ne!(copy.embedding(), src.embedding());
        assert!(!copy.is_frozen());
        assert_eq!(src, before);
        assert!(src.is_frozen());
    }

    #[test]
    fn frozen_rejects_mutation() {
        let mut m = Modulator::init(&[2], 2, 1, 0).unwrap();
        assert!(m.parameters_mut().is_ok());
        m.freeze();
        assert!(m.parameters_mut().is_err());
    }
}
