//! Finite-difference suites over seeded small instances, shared by the
//! `gradcheck` subcommand and the test suites.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{grad_check, GradCheckReport, Reduction, Tape, Var, LAYER_NORM_EPS};
use crate::backbone::Backbone;
use crate::classifier::ClassifierHead;
use crate::error::Result;
use crate::graph::{generate_sbm, propagate_graph, SbmSpec};
use crate::nsm::{modulate_on_tape, ForwardHooks, Modulator, ModulatorVars};
use crate::seed;
use crate::trainer::{class_weights, record_task_loss};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

fn normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// A 10-node, two-class task with a small backbone, a random modulator and
/// fresh head columns: everything the task loss depends on.
#[derive(Debug, Clone)]
pub struct PipelineInstance {
    pub backbone: Backbone,
    pub features: Array2<f64>,
    pub targets: Vec<usize>,
    pub node_weights: Vec<f64>,
    pub widths: Vec<usize>,
    pub heads: usize,
    /// Modulator parameters in storage order, then the head block.
    pub params: Vec<Array2<f64>>,
}

impl PipelineInstance {
    pub fn new(seed: u64) -> Result<Self> {
        let spec = SbmSpec::new(2, 5).probabilities(0.6, 0.2).features(4, 3.0);
        let g = generate_sbm(&spec, seed)?;
        let features = propagate_graph(&g, 2)?.into_matrix();
        let backbone = Backbone::init(4, 6, seed::derive(seed, seed::Purpose::Backbone, 0))?;
        let widths = backbone.site_widths();
        let heads = 3;
        let modulator = Modulator::init(&widths, 5, heads, seed::derive(seed, seed::Purpose::Modulator, 1))?;
        let mut head = ClassifierHead::new(6);
        head.extend(1, &[0, 1], seed::derive(seed, seed::Purpose::Head, 1))?;
        let targets = g.labels().to_vec();
        let w = class_weights(&targets, &[0, 1]);
        let mut params: Vec<Array2<f64>> = modulator.parameters().into_iter().cloned().collect();
        params.push(head.task_block(1)?);
        Ok(Self {
            backbone,
            features,
            node_weights: targets.iter().map(|&c| w[c]).collect(),
            targets,
            widths,
            heads,
            params,
        })
    }

    /// Records the task loss with `vars` standing for [`Self::params`].
    pub fn loss(&self, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
        let (head, modulator) = vars.split_last().expect("head block is last");
        let mv = ModulatorVars::from_flat(modulator, &self.widths, self.heads)?;
        let x = tape.constant(self.features.clone());
        let (_, loss) = record_task_loss(
            tape,
            &self.backbone,
            &mv,
            *head,
            x,
            &self.targets,
            &self.node_weights,
            Reduction::Sum,
        )?;
        Ok(loss)
    }
}

/// Full task loss: every modulator tensor and the head block.
pub fn pipeline_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let inst = PipelineInstance::new(seed)?;
    grad_check(|t, v| inst.loss(t, v), &inst.params, FD_STEP)
}

/// One modulation site in isolation, loss `sum(h̃ ⊙ R)` for a fixed random
/// `R`.
pub fn nsm_site_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seed::rng(seed);
    let (n, d, heads, d_e) = (6, 4, 3, 5);
    let m = Modulator::init(&[d], d_e, heads, seed)?;
    let h = normal(&mut rng, n, d);
    let r = normal(&mut rng, n, d);
    let params: Vec<Array2<f64>> = m.parameters().into_iter().cloned().collect();
    grad_check(
        |t, v| {
            let mv = ModulatorVars::from_flat(v, &[d], heads)?;
            let hv = t.constant(h.clone());
            let out = modulate_on_tape(t, &mv.sites[0], mv.embedding, hv, ForwardHooks::default())?;
            let rv = t.constant(r.clone());
            let prod = t.mul(out, rv)?;
            Ok(t.sum(prod))
        },
        &params,
        FD_STEP,
    )
}

/// Each tape primitive under a random linear readout.
pub fn op_gradchecks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = seed::rng(seed);
    let a = normal(&mut rng, 4, 3);
    let b = normal(&mut rng, 3, 5);
    let row = normal(&mut rng, 1, 5);
    let r45 = normal(&mut rng, 4, 5);
    let r43 = normal(&mut rng, 4, 3);
    let readout = |t: &mut Tape, x: Var, r: &Array2<f64>| -> Result<Var> {
        let rv = t.constant(r.clone());
        let p = t.mul(x, rv)?;
        Ok(t.sum(p))
    };
    let mut out = Vec::new();
    out.push((
        "matmul+add_row",
        grad_check(
            |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let y = t.add_row(m, v[2])?;
                readout(t, y, &r45)
            },
            &[a.clone(), b.clone(), row.clone()],
            FD_STEP,
        )?,
    ));
    out.push((
        "softmax_rows",
        grad_check(
            |t, v| {
                let y = t.softmax_rows(v[0])?;
                readout(t, y, &r43)
            },
            std::slice::from_ref(&a),
            FD_STEP,
        )?,
    ));
    out.push((
        "layer_norm",
        grad_check(
            |t, v| {
                let y = t.layer_norm(v[0], LAYER_NORM_EPS);
                readout(t, y, &r43)
            },
            std::slice::from_ref(&a),
            FD_STEP,
        )?,
    ));
    out.push((
        "reshape+slice+transpose+scale",
        grad_check(
            |t, v| {
                let y = t.reshape(v[0], 6, 2)?;
                let s = t.slice_cols(y, 1, 2)?;
                let tr = t.transpose(s);
                let sc = t.scale(tr, -1.5);
                let sq = t.mul(sc, sc)?;
                Ok(t.sum(sq))
            },
            std::slice::from_ref(&a),
            FD_STEP,
        )?,
    ));
    let targets = [0, 2, 1, 0];
    let weights = [0.5, 1.0, 2.0, 0.25];
    for (name, reduction) in [
        ("weighted_ce_sum", Reduction::Sum),
        ("weighted_ce_mean", Reduction::Mean),
    ] {
        out.push((
            name,
            grad_check(
                |t, v| t.weighted_cross_entropy(v[0], &targets, &weights, reduction),
                std::slice::from_ref(&a),
                FD_STEP,
            )?,
        ));
    }
    Ok(out)
}

/// Every suite for one seed, labelled.
pub fn all_gradchecks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out: Vec<(String, GradCheckReport)> = op_gradchecks(seed)?
        .into_iter()
        .map(|(n, r)| (n.to_string(), r))
        .collect();
    out.push(("nsm_site".into(), nsm_site_gradcheck(seed)?));
    out.push(("task_loss".into(), pipeline_gradcheck(seed)?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_one_seed() {
        for (name, report) in all_gradchecks(0).unwrap() {
            assert!(report.passes(TOLERANCE), "{name}: {report:?}");
        }
    }
}
