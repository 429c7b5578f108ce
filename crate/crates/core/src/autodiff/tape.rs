use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// A dense 2-D value recorded on a [`Tape`].
///
/// Gradients are only ever allocated for tensors that require them, which
/// keeps frozen parameters (backbone weights, committed modulators, past
/// classifier columns) free of gradient buffers.
#[derive(Debug, Clone)]
pub struct Tensor {
    value: Array2<f64>,
    requires_grad: bool,
    grad: Option<Array2<f64>>,
}

impl Tensor {
    pub fn value(&self) -> &Array2<f64> {
        &self.value
    }

    pub fn shape(&self) -> [usize; 2] {
        let (r, c) = self.value.dim();
        [r, c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&Array2<f64>> {
        self.grad.as_ref()
    }
}

/// Handle to a tensor on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    WeightedCe {
        logits: Var,
        probs: Array2<f64>,
        targets: Vec<usize>,
        weights: Vec<f64>,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Reverse-mode recorder. Operations are appended in execution order and
/// `backward` replays them in exact reverse order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims(a: &Array2<f64>) -> Vec<usize> {
    a.shape().to_vec()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Parameters live outside the tape and are
    /// untouched.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].tensor.value
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].tensor.grad.as_ref()
    }

    /// Scalar value of a 1×1 tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Leaves that hold a gradient after the last `backward`.
    pub fn leaves_with_grad(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.tensor.grad.is_some())
            .map(|(i, _)| Var(i))
            .collect()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    fn push(&mut self, value: Array2<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            tensor: Tensor {
                value,
                requires_grad,
                grad: None,
            },
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape {
                op: "matmul",
                left: dims(va),
                right: dims(vb),
            });
        }
        let out = va.dot(vb);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).t().to_owned();
        let rg = self.needs(x);
        self.push(out, rg, Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::Shape {
                op: "add",
                left: dims(va),
                right: dims(vb),
            });
        }
        let out = va + vb;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// `x + row`, broadcasting a `1×m` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != vx.ncols() {
            return Err(Error::Shape {
                op: "add_row",
                left: dims(vx),
                right: dims(vr),
            });
        }
        let out = vx + &vr.row(0);
        let rg = self.needs(x) || self.needs(row);
        Ok(self.push(out, rg, Op::AddRow(x, row)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::Shape {
                op: "mul",
                left: dims(va),
                right: dims(vb),
            });
        }
        let out = va * vb;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x) * factor;
        let rg = self.needs(x);
        self.push(out, rg, Op::Scale(x, factor))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                left: dims(vx),
                right: vec![rows, cols],
            });
        }
        let flat: Vec<f64> = vx.iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("length checked");
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if start > end || end > vx.ncols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: dims(vx),
                right: vec![start, end],
            });
        }
        let out = vx.slice(s![.., start..end]).to_owned();
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::SliceCols { x, start }))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::SoftmaxRows(x)))
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// without an affine part.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (out, inv_std) = layer_norm(self.value(x), eps);
        let rg = self.needs(x);
        self.push(out, rg, Op::LayerNorm { x, inv_std })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.needs(x);
        self.push(Array2::from_elem((1, 1), total), rg, Op::Sum(x))
    }

    /// `-Σ_v w_v · log softmax(z_v)[t_v]`, optionally divided by the row count.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        reduction: Reduction,
    ) -> Result<Var> {
        let z = self.value(logits);
        let (n, k) = z.dim();
        if targets.len() != n || weights.len() != n {
            return Err(Error::Shape {
                op: "weighted_cross_entropy",
                left: dims(z),
                right: vec![targets.len(), weights.len()],
            });
        }
        if let Some((row, t)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
            return Err(Error::contract(format!("label {t} of row {row} is outside 0..{k}")));
        }
        let probs = softmax_rows(z)?;
        let mut total = 0.0;
        for (v, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let row = z.row(v);
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += w * (lse - row[t]);
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n.max(1) as f64,
        };
        let rg = self.needs(logits);
        Ok(self.push(
            Array2::from_elem((1, 1), total * scale),
            rg,
            Op::WeightedCe {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                scale,
            },
        ))
    }

    /// Accumulates `dloss/dθ` into every tensor on the tape that requires a
    /// gradient. `loss` must be 1×1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.tensor(loss).shape();
        if shape != [1, 1] {
            return Err(Error::contract(format!(
                "backward expects a scalar loss, got shape {shape:?}"
            )));
        }
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].tensor.grad = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].tensor.grad.take() else {
                continue;
            };
            self.propagate(i, &g);
            self.nodes[i].tensor.grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Array2<f64>) {
        let t = &mut self.nodes[v.0].tensor;
        if !t.requires_grad {
            return;
        }
        match &mut t.grad {
            Some(g) => *g += &delta,
            None => t.grad = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &Array2<f64>) {
        // Split borrow: read the op while mutating other nodes' grads.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let d = g.dot(&self.value(*b).t());
                    self.accumulate(*a, d);
                }
                if self.needs(*b) {
                    let d = self.value(*a).t().dot(g);
                    self.accumulate(*b, d);
                }
            }
            Op::Transpose(x) => self.accumulate(*x, g.t().to_owned()),
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::AddRow(x, row) => {
                self.accumulate(*x, g.clone());
                if self.needs(*row) {
                    let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(*row, d);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g * self.value(*b);
                    self.accumulate(*a, d);
                }
                if self.needs(*b) {
                    let d = g * self.value(*a);
                    self.accumulate(*b, d);
                }
            }
            Op::Scale(x, f) => self.accumulate(*x, g * *f),
            Op::Reshape(x) => {
                let (r, c) = self.value(*x).dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                let d = Array2::from_shape_vec((r, c), flat).expect("same length");
                self.accumulate(*x, d);
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    self.accumulate(*x, d);
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let y = &self.nodes[i].tensor.value;
                    let mut d = g * y;
                    for (mut row, yr) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yr, |dv, &yv| *dv -= yv * dot);
                    }
                    self.accumulate(*x, d);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if self.needs(*x) {
                    let y = &self.nodes[i].tensor.value;
                    let cols = y.ncols() as f64;
                    let mut d = Array2::zeros(y.dim());
                    for (r, ((mut dr, yr), gr)) in d.rows_mut().into_iter().zip(y.rows()).zip(g.rows()).enumerate() {
                        let mean_g = gr.sum() / cols;
                        let mean_gy = gr.dot(&yr) / cols;
                        Zip::from(&mut dr).and(&gr).and(&yr).for_each(|o, &gv, &yv| {
                            *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                        });
                    }
                    self.accumulate(*x, d);
                }
            }
            Op::Sum(x) => {
                let d = Array2::from_elem(self.value(*x).dim(), g[[0, 0]]);
                self.accumulate(*x, d);
            }
            Op::WeightedCe {
                logits,
                probs,
                targets,
                weights,
                scale,
            } => {
                let upstream = g[[0, 0]] * scale;
                let mut d = probs.clone();
                for (mut row, (&t, &w)) in d.rows_mut().into_iter().zip(targets.iter().zip(weights)) {
                    row[t] -= 1.0;
                    row *= w * upstream;
                }
                self.accumulate(*logits, d);
            }
        }
        self.nodes[i].op = op;
    }
}

pub fn softmax_rows(x: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() == 0 {
        return Err(Error::contract("softmax over zero columns"));
    }
    let mut out = x.clone();
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "softmax_rows",
                row: r,
            });
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    Ok(out)
}

/// Returns the normalized rows and each row's `1/sqrt(var + eps)`.
pub fn layer_norm(x: &Array2<f64>, eps: f64) -> (Array2<f64>, Vec<f64>) {
    let cols = x.ncols().max(1) as f64;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let mean = row.sum() / cols;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
        let inv = 1.0 / (var + eps).sqrt();
        row *= inv;
        inv_std.push(inv);
    }
    (out, inv_std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let i2 = t.constant(Array2::eye(2));
        let x = t.constant(array![[1.5, -2.0, 3.0], [0.0, 4.0, 7.0]]);
        let y = t.matmul(i2, x).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let a = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.constant(array![[1.0], [1.0]]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &array![[3.0], [7.0]]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3)));
        let b = t.constant(Array2::zeros((2, 3)));
        match t.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let single = softmax_rows(&array![[123.4]]).unwrap();
        assert_eq!(single[[0, 0]], 1.0);
        let even = softmax_rows(&array![[0.0, 0.0, 0.0]]).unwrap();
        for v in even.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let skew = softmax_rows(&array![[2f64.ln(), 0.0]]).unwrap();
        assert!((skew[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((skew[[0, 1]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_names_non_finite_row() {
        let err = softmax_rows(&array![[0.0, 1.0], [f64::NAN, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1, .. }));
    }

    #[test]
    fn layer_norm_examples() {
        let (c, _) = layer_norm(&array![[3.0, 3.0, 3.0]], 1e-5);
        assert!(c.iter().all(|v| v.abs() < 1e-12));
        let (pm, _) = layer_norm(&array![[1.0, -1.0]], 0.0);
        assert_eq!(pm, array![[1.0, -1.0]]);
        let x = array![[0.3, -1.2, 4.0, 2.2]];
        let (a, _) = layer_norm(&x, 1e-5);
        let (b, _) = layer_norm(&(&x + 17.5), 1e-5);
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut t = Tape::new();
        let theta = t.param(array![[1.0, 2.0, 3.0]]);
        let loss = t.sum(theta);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(theta).unwrap(), &array![[1.0, 1.0, 1.0]]);

        let mut t = Tape::new();
        let theta = t.param(array![[1.0, 2.0]]);
        let sq = t.mul(theta, theta).unwrap();
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(theta).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let theta = t.param(array![[1.0, 2.0]]);
        assert!(matches!(t.backward(theta), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_get_gradients() {
        let mut t = Tape::new();
        let w = t.constant(array![[2.0], [3.0]]);
        let x = t.param(array![[1.0, 1.0]]);
        let y = t.matmul(x, w).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert!(t.grad(w).is_none());
        assert!(!t.tensor(w).requires_grad());
        assert_eq!(t.grad(x).unwrap(), &array![[2.0, 3.0]]);
    }

    #[test]
    fn clear_frees_nodes() {
        let mut t = Tape::new();
        let a = t.param(array![[1.0]]);
        let _ = t.sum(a);
        assert_eq!(t.len(), 2);
        t.clear();
        assert!(t.is_empty());
    }

    #[test]
    fn weighted_ce_uniform_and_extreme() {
        let mut t = Tape::new();
        let z = t.param(array![[0.0, 0.0]]);
        let l = t.weighted_cross_entropy(z, &[1], &[1.0], Reduction::Sum).unwrap();
        assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-15);

        let z = t.param(array![[1000.0, -1000.0]]);
        let l = t.weighted_cross_entropy(z, &[0], &[1.0], Reduction::Sum).unwrap();
        assert!(t.scalar(l).is_finite());
        assert!(t.scalar(l).abs() < 1e-300);

        let z = t.param(array![[1000.0, -1000.0]]);
        assert!(t.weighted_cross_entropy(z, &[2], &[1.0], Reduction::Sum).is_err());
    }
}
