//! The accuracy matrix and the two summary metrics derived from it.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `M[t][j]`: accuracy (percent) on task `j` after training through task
/// `t`, both 1-based. Only `j <= t` is populated.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            rows: Vec::with_capacity(tasks),
        }
    }

    /// Builds a matrix from complete lower-triangular rows.
    pub fn from_rows(tasks: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(tasks);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Appends stage `t = stages() + 1`, which must hold exactly `t` entries.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len() + 1;
        if t > self.tasks {
            return Err(Error::contract(format!("matrix already has {} stages", self.tasks)));
        }
        if row.len() != t {
            return Err(Error::contract(format!(
                "stage {t} needs {t} entries, got {}",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::contract(format!("accuracy {v} outside [0, 100]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        if j == 0 || j > t {
            return None;
        }
        self.rows.get(t.checked_sub(1)?)?.get(j - 1).copied()
    }

    /// Header `stage,task_1,...,task_T`, one row per completed stage, empty
    /// cells above the diagonal. Values use the shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage");
        for j in 1..=self.tasks {
            write!(out, ",task_{j}").unwrap();
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            write!(out, "{}", i + 1).unwrap();
            for j in 0..self.tasks {
                out.push(',');
                if let Some(v) = row.get(j) {
                    write!(out, "{v}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: "<csv>".into(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "empty".into()))?;
        let tasks = header.split(',').count() - 1;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != tasks + 1 {
                return Err(parse_err(i + 2, format!("expected {} cells", tasks + 1)));
            }
            let row = cells[1..]
                .iter()
                .filter(|c| !c.is_empty())
                .map(|c| c.parse::<f64>().map_err(|e| parse_err(i + 2, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(tasks, rows)
    }

    fn final_row(&self) -> Result<&[f64]> {
        match self.rows.last() {
            Some(r) if self.rows.len() == self.tasks => Ok(r),
            _ => Err(Error::contract(format!(
                "final row missing: {} of {} stages",
                self.rows.len(),
                self.tasks
            ))),
        }
    }
}

/// Mean of the final row.
pub fn average_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let last = m.final_row()?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean over `j < T` of `M[j][j] - M[T][j]`, so forgetting is positive.
/// Not clamped: negative values mean backward transfer.
pub fn average_forgetting(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    if t < 2 {
        return Err(Error::contract("forgetting needs at least two tasks"));
    }
    let last = m.final_row()?;
    let total: f64 = (0..t - 1).map(|j| m.rows[j][j] - last[j]).sum();
    Ok(total / (t - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aa_examples() {
        let m = AccuracyMatrix::from_rows(2, vec![vec![100.0], vec![100.0, 100.0]]).unwrap();
        assert_eq!(average_accuracy(&m).unwrap(), 100.0);
        let m = AccuracyMatrix::from_rows(2, vec![vec![90.0], vec![80.0, 60.0]]).unwrap();
        assert_eq!(average_accuracy(&m).unwrap(), 70.0);
    }

    #[test]
    fn af_examples() {
        let m = AccuracyMatrix::from_rows(2, vec![vec![90.0], vec![80.0, 55.0]]).unwrap();
        assert_eq!(average_forgetting(&m).unwrap(), 10.0);
        let m = AccuracyMatrix::from_rows(2, vec![vec![70.0], vec![70.0, 55.0]]).unwrap();
        assert_eq!(average_forgetting(&m).unwrap(), 0.0);
        let m = AccuracyMatrix::from_rows(1, vec![vec![70.0]]).unwrap();
        assert!(average_forgetting(&m).is_err());
        let partial = AccuracyMatrix::from_rows(3, vec![vec![70.0]]).unwrap();
        assert!(average_accuracy(&partial).is_err());
    }

    #[test]
    fn rows_are_validated() {
        let mut m = AccuracyMatrix::new(2);
        assert!(m.push_row(vec![1.0, 2.0]).is_err());
        assert!(m.push_row(vec![101.0]).is_err());
        m.push_row(vec![50.0]).unwrap();
        assert_eq!(m.get(1, 1), Some(50.0));
        assert_eq!(m.get(1, 2), None);
    }

    #[test]
    fn csv_layout_and_round_trip() {
        let m = AccuracyMatrix::from_rows(3, vec![vec![99.5], vec![98.0, 1.0 / 3.0]]).unwrap();
        let csv = m.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "stage,task_1,task_2,task_3");
        assert_eq!(lines[1], "1,99.5,,");
        assert_eq!(AccuracyMatrix::from_csv(&csv).unwrap(), m);
    }
}
