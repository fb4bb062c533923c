//! Multi-label evaluation and the 2-D embedding export for basis sets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pca_project_2d, Matrix};

/// 1 where `p ≥ threshold`, else 0.
pub fn threshold_predict(probabilities: &Matrix, threshold: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "threshold must lie in [0, 1], got {threshold}"
        )));
    }
    if let Some(p) = probabilities
        .as_slice()
        .iter()
        .find(|p| !(0.0..=1.0).contains(*p))
    {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    let data = probabilities
        .as_slice()
        .iter()
        .map(|&p| if p >= threshold { 1.0 } else { 0.0 })
        .collect();
    Matrix::from_vec(probabilities.rows(), probabilities.cols(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    Micro,
    Macro,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_positives: Vec<usize>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

fn binary(v: f64) -> Option<bool> {
    if v == 1.0 {
        Some(true)
    } else if v == 0.0 {
        Some(false)
    } else {
        None
    }
}

impl ConfusionCounts {
    pub fn from_predictions(pred: &Matrix, truth: &Matrix) -> Result<Self> {
        if pred.rows() != truth.rows() || pred.cols() != truth.cols() {
            return Err(Error::invalid(format!(
                "prediction {}x{} does not match truth {}x{}",
                pred.rows(),
                pred.cols(),
                truth.rows(),
                truth.cols()
            )));
        }
        let k = pred.cols();
        let mut c = ConfusionCounts {
            true_positives: vec![0; k],
            false_positives: vec![0; k],
            false_negatives: vec![0; k],
        };
        for i in 0..pred.rows() {
            for j in 0..k {
                let (p, t) = match (binary(pred[(i, j)]), binary(truth[(i, j)])) {
                    (Some(p), Some(t)) => (p, t),
                    _ => return Err(Error::invalid("predictions and labels must be 0 or 1")),
                };
                match (p, t) {
                    (true, true) => c.true_positives[j] += 1,
                    (true, false) => c.false_positives[j] += 1,
                    (false, true) => c.false_negatives[j] += 1,
                    (false, false) => {}
                }
            }
        }
        Ok(c)
    }

    pub fn n_classes(&self) -> usize {
        self.true_positives.len()
    }

    pub fn class_scores(&self, j: usize) -> ClassScores {
        let (tp, fp, fn_) = (
            self.true_positives[j],
            self.false_positives[j],
            self.false_negatives[j],
        );
        ClassScores {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: f1_from_counts(tp, fp, fn_),
            support: tp + fn_,
        }
    }

    pub fn micro_f1(&self) -> f64 {
        f1_from_counts(
            self.true_positives.iter().sum(),
            self.false_positives.iter().sum(),
            self.false_negatives.iter().sum(),
        )
    }

    pub fn macro_f1(&self) -> f64 {
        let k = self.n_classes();
        if k == 0 {
            return 0.0;
        }
        (0..k).map(|j| self.class_scores(j).f1).sum::<f64>() / k as f64
    }
}

/// 0/0 is 0.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

pub fn multilabel_f1(pred: &Matrix, truth: &Matrix, mode: F1Mode) -> Result<f64> {
    let counts = ConfusionCounts::from_predictions(pred, truth)?;
    Ok(match mode {
        F1Mode::Micro => counts.micro_f1(),
        F1Mode::Macro => counts.macro_f1(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedClassScores {
    pub name: String,
    #[serde(flatten)]
    pub scores: ClassScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<NamedClassScores>,
    pub sparsity_before: f64,
    pub sparsity_after: f64,
    pub loss_history: Vec<f64>,
}

impl MetricsReport {
    pub fn from_counts(
        counts: &ConfusionCounts,
        class_names: &[String],
        sparsity_before: f64,
        sparsity_after: f64,
    ) -> Self {
        let per_class = (0..counts.n_classes())
            .map(|j| NamedClassScores {
                name: class_names
                    .get(j)
                    .cloned()
                    .unwrap_or_else(|| format!("class_{j}")),
                scores: counts.class_scores(j),
            })
            .collect();
        MetricsReport {
            micro_f1: counts.micro_f1(),
            macro_f1: counts.macro_f1(),
            per_class,
            sparsity_before,
            sparsity_after,
            loss_history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub set_name: String,
    pub basis_index: usize,
    pub pc1: f64,
    pub pc2: f64,
}

/// Stacks every set and projects the rows onto the two leading principal axes.
pub fn basis_embedding(sets: &[(String, Matrix)]) -> Result<Vec<EmbeddingRow>> {
    let f = sets.first().map_or(0, |(_, m)| m.cols());
    if let Some((name, m)) = sets.iter().find(|(_, m)| m.cols() != f) {
        return Err(Error::invalid(format!(
            "set {name} has dimension {} but the first set has {f}",
            m.cols()
        )));
    }
    let total: usize = sets.iter().map(|(_, m)| m.rows()).sum();
    if total < 2 {
        return Err(Error::invalid("embedding needs at least two rows in total"));
    }
    let parts: Vec<&Matrix> = sets.iter().map(|(_, m)| m).collect();
    let projected = pca_project_2d(&Matrix::vstack(&parts)?)?;
    let mut rows = Vec::with_capacity(total);
    let mut r = 0;
    for (name, m) in sets {
        for i in 0..m.rows() {
            rows.push(EmbeddingRow {
                set_name: name.clone(),
                basis_index: i,
                pc1: projected[(r, 0)],
                pc2: projected[(r, 1)],
            });
            r += 1;
        }
    }
    Ok(rows)
}

/// Floats are written with 17 significant digits.
pub fn embedding_csv(rows: &[EmbeddingRow]) -> String {
    let mut out = String::from("set_name,basis_index,pc1,pc2\n");
    for row in rows {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e}",
            row.set_name, row.basis_index, row.pc1, row.pc2
        )
        .expect("writing to a String");
    }
    out
}

pub fn export_basis_embedding(sets: &[(String, Matrix)], path: &Path) -> Result<()> {
    if let Some((name, _)) = sets
        .iter()
        .find(|(n, _)| n.is_empty() || n.contains([',', '"', '\n', '\r']))
    {
        return Err(Error::invalid(format!("set name {name:?} cannot be written to CSV")));
    }
    let rows = basis_embedding(sets)?;
    fs::write(path, embedding_csv(&rows)).map_err(|e| Error::io(path, e))
}
