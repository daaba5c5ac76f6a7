use thiserror::Error;

use crate::example::IGNORE_LABEL;
use crate::scalar::Scalar;
use crate::tensor::{log_sum_exp, Matrix};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    #[error("no labeled positions")]
    NoLabels,
    #[error("label {label} at row {row} outside {classes} classes")]
    LabelOutOfRange { row: usize, label: i64, classes: usize },
    #[error("{rows} logit rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmLoss<T> {
    /// Mean cross-entropy over labeled rows.
    pub loss: T,
    /// Fraction of labeled rows whose argmax is the label.
    pub accuracy: f64,
    pub count: usize,
}

/// Summed cross-entropy of rows against targets, plus the gradient of that
/// sum with respect to the logits scaled by `scale`.
pub(crate) fn cross_entropy_sum<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[usize],
    scale: T,
) -> (T, usize, Matrix<T>) {
    let mut total = T::zero();
    let mut correct = 0;
    let mut d = Matrix::zeros(logits.rows, logits.cols);
    for (r, &y) in targets.iter().enumerate() {
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        total += lse - row[y];
        let argmax = row
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        if argmax == y {
            correct += 1;
        }
        let dr = d.row_mut(r);
        for (o, &v) in dr.iter_mut().zip(row) {
            *o = (v - lse).exp() * scale;
        }
        dr[y] -= scale;
    }
    (total, correct, d)
}

/// Mean cross-entropy over rows whose label is not [`IGNORE_LABEL`].
/// `logits` holds one row per position and one column per vocab entry.
pub fn mlm_loss<T: Scalar>(logits: &Matrix<T>, labels: &[i32]) -> Result<MlmLoss<T>, LossError> {
    if logits.rows != labels.len() {
        return Err(LossError::LengthMismatch {
            rows: logits.rows,
            labels: labels.len(),
        });
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (r, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        if l < 0 || l as usize >= logits.cols {
            return Err(LossError::LabelOutOfRange {
                row: r,
                label: l as i64,
                classes: logits.cols,
            });
        }
        rows.push(r);
        targets.push(l as usize);
    }
    if rows.is_empty() {
        return Err(LossError::NoLabels);
    }
    let picked = logits.gather_rows(&rows);
    let (sum, correct, _) = cross_entropy_sum(&picked, &targets, T::zero());
    let n = rows.len();
    Ok(MlmLoss {
        loss: sum / T::lit(n as f64),
        accuracy: correct as f64 / n as f64,
        count: n,
    })
}
