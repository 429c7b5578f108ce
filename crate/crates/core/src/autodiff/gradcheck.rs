//! Central finite-difference verification of tape gradients.

use ndarray::Array2;

use super::tape::{Tape, Var};
use crate::error::Result;

/// Per-parameter outcome of a [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    /// `‖a - n‖ / max(‖a‖, ‖n‖, 1e-12)` over the whole tensor.
    pub tensor_relative_error: f64,
    /// Worst per-element [`relative_error`]; dominated by round-off on
    /// elements whose gradient is near zero.
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Element with the worst relative error as `(row, col)`.
    pub worst: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_relative_error).fold(0.0, f64::max)
    }

    pub fn max_tensor_relative_error(&self) -> f64 {
        self.params.iter().map(|p| p.tensor_relative_error).fold(0.0, f64::max)
    }

    /// Every parameter tensor within `tolerance` (tensor-norm relative error).
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_tensor_relative_error() <= tolerance
    }
}

/// Relative error as used throughout the checker:
/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares the tape gradient of `f` against central differences with the
/// given `step`, element by element, for every tensor in `params`.
///
/// `f` receives a fresh tape and one [`Var`] per parameter and must return a
/// scalar.
pub fn grad_check<F>(f: F, params: &[Array2<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Array2<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Array2::zeros(p.dim())))
        .collect();

    let eval = |perturbed: &[Array2<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.scalar(l))
    };

    let mut work: Vec<Array2<f64>> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            tensor_relative_error: 0.0,
            max_relative_error: 0.0,
            max_absolute_error: 0.0,
            worst: (0, 0),
        };
        let (rows, cols) = params[pi].dim();
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for r in 0..rows {
            for c in 0..cols {
                let orig = params[pi][[r, c]];
                work[pi][[r, c]] = orig + step;
                let plus = eval(&work)?;
                work[pi][[r, c]] = orig - step;
                let minus = eval(&work)?;
                work[pi][[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let a = grad[[r, c]];
                let rel = relative_error(a, numeric);
                diff2 += (a - numeric) * (a - numeric);
                a2 += a * a;
                n2 += numeric * numeric;
                check.max_absolute_error = check.max_absolute_error.max((a - numeric).abs());
                if rel > check.max_relative_error {
                    check.max_relative_error = rel;
                    check.worst = (r, c);
                }
            }
        }
        check.tensor_relative_error = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-12);
        reports.push(check);
    }
    Ok(GradCheckReport { params: reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_at_three() {
        let report = grad_check(
            |t, p| {
                let sq = t.mul(p[0], p[0])?;
                Ok(t.sum(sq))
            },
            &[array![[3.0]]],
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error() <= 1e-8, "{report:?}");
    }

    #[test]
    fn softmax_first_column() {
        let report = grad_check(
            |t, p| {
                let y = t.softmax_rows(p[0])?;
                let col = t.slice_cols(y, 0, 1)?;
                Ok(t.sum(col))
            },
            &[array![[0.3, -1.1, 2.0], [1.0, 0.5, -0.25]]],
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error() <= 1e-6, "{report:?}");
    }

    #[test]
    fn constant_function() {
        let report = grad_check(|t, _| Ok(t.constant(array![[4.2]])), &[array![[1.0, 2.0]]], 1e-5).unwrap();
        assert_eq!(report.max_relative_error(), 0.0);
    }
}
