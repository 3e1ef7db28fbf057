//! External classifiers behind a process boundary.
//!
//! Exchange format, all files headed CSV in a fresh temporary directory:
//!
//! * `train.csv`: `f_0 .. f_{M-1}, label` (class indices),
//! * `test.csv`: `f_0 .. f_{M-1}` (no labels),
//! * `scores.csv` (written by the adapter): `class_0 .. class_{K-1}`, one
//!   row of probabilities per test row.
//!
//! The program is invoked as `<program> <args..> <train.csv> <test.csv>
//! <scores.csv>` and must exit with status 0.

use std::path::{Path, PathBuf};
use std::process::Command;

use recontab_core::data::TableDataset;
use recontab_core::evaluation::{BaselineAdapter, EvalError};
use recontab_core::linalg::Matrix;

use crate::io::{create, open};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessAdapter {
    pub name: String,
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ProcessAdapter {
    /// Parses `name=program [args..]` (arguments split on whitespace).
    pub fn parse(spec: &str) -> Option<Self> {
        let (name, cmd) = spec.split_once('=')?;
        let mut parts = cmd.split_whitespace();
        let program = PathBuf::from(parts.next()?);
        let name = name.trim();
        (!name.is_empty()).then(|| Self { name: name.to_string(), program, args: parts.map(str::to_string).collect() })
    }

    fn fail(&self, reason: impl std::fmt::Display) -> EvalError {
        EvalError::Adapter { name: self.name.clone(), reason: reason.to_string() }
    }
}

pub fn write_exchange(path: &Path, x: &Matrix, labels: Option<&[usize]>) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(create(path).map_err(std::io::Error::other)?);
    let mut header: Vec<String> = (0..x.cols()).map(|j| format!("f_{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..x.rows() {
        let mut rec: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()
}

pub fn read_scores(path: &Path, rows: usize, classes: usize) -> Result<Matrix, String> {
    let mut rdr = csv::Reader::from_reader(open(path).map_err(|e| e.to_string())?);
    let mut data = Vec::with_capacity(rows * classes);
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        if rec.len() != classes {
            return Err(format!("scores row {n} has {} columns, expected {classes}", rec.len()));
        }
        for v in rec.iter() {
            let p: f64 = v.trim().parse().map_err(|_| format!("scores row {n}: `{v}` is not a number"))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("scores row {n}: {p} is not a probability"));
            }
            data.push(p);
        }
        n += 1;
    }
    if n != rows {
        return Err(format!("scores has {n} rows, expected {rows}"));
    }
    Ok(Matrix::from_vec(rows, classes, data))
}

impl BaselineAdapter for ProcessAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn fit_predict_proba(&self, train: &TableDataset, test: &TableDataset) -> Result<Matrix, EvalError> {
        let y = train.complete_labels().ok_or(EvalError::Unlabeled)?;
        let dir = tempfile::tempdir().map_err(|e| self.fail(e))?;
        let (tr, te, sc) = (dir.path().join("train.csv"), dir.path().join("test.csv"), dir.path().join("scores.csv"));
        write_exchange(&tr, &train.x, Some(&y)).map_err(|e| self.fail(e))?;
        write_exchange(&te, &test.x, None).map_err(|e| self.fail(e))?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&tr)
            .arg(&te)
            .arg(&sc)
            .status()
            .map_err(|e| self.fail(format!("cannot start `{}`: {e}", self.program.display())))?;
        if !status.success() {
            return Err(self.fail(format!("exited with {status}")));
        }
        read_scores(&sc, test.n_samples(), train.n_classes.max(2)).map_err(|e| self.fail(e))
    }
}
