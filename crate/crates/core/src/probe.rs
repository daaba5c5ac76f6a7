//! Linear probe predicting each token's sentence index from frozen final
//! hidden states.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::example::Example;
use crate::mlm::adam::{adam_step, AdamConfig, AdamState};
use crate::model::{Backbone, ModelError};
use crate::params::NamedTensors;
use crate::scalar::Scalar;
use crate::tensor::{gemm, softmax_in_place, Matrix};
use crate::tokenizer::{SpecialIds, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
    /// Fraction of examples (not tokens) used for training.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            l2: 1e-4,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub train_accuracy: f64,
    /// Accuracy of always predicting the most frequent training label.
    pub baseline: f64,
    pub majority_label: usize,
    pub classes: usize,
    pub train_tokens: usize,
    pub eval_tokens: usize,
}

/// Final-layer states and sentence indices of every non-special token.
pub fn collect<T: Scalar>(
    backbone: &Backbone<T>,
    examples: &[Example],
    specials: &SpecialIds,
    sep: TokenId,
) -> Result<Vec<(Matrix<f64>, Vec<usize>)>, ModelError> {
    examples
        .iter()
        .map(|ex| {
            let hidden = backbone.hidden_states(ex, sep)?;
            let last = hidden.last().expect("at least the embedding output");
            let keep: Vec<usize> = (0..last.rows)
                .filter(|&i| !specials.contains(ex.ids[i]))
                .collect();
            let labels = keep.iter().map(|&i| ex.s[i] as usize).collect();
            Ok((last.gather_rows(&keep).cast(), labels))
        })
        .collect()
}

fn stack(parts: &[&(Matrix<f64>, Vec<usize>)]) -> (Matrix<f64>, Vec<usize>) {
    let cols = parts.first().map_or(0, |p| p.0.cols);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (m, l) in parts {
        data.extend_from_slice(&m.data);
        labels.extend_from_slice(l);
    }
    (Matrix::from_vec(labels.len(), cols, data), labels)
}

fn accuracy(x: &Matrix<f64>, y: &[usize], w: &NamedTensors<f64>) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let logits = scores(x, w);
    let hits = (0..x.rows)
        .filter(|&r| {
            let row = logits.row(r);
            let arg = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            arg == y[r]
        })
        .count();
    hits as f64 / y.len() as f64
}

fn scores(x: &Matrix<f64>, w: &NamedTensors<f64>) -> Matrix<f64> {
    let (weight, bias) = (&w.0[0].1, &w.0[1].1);
    let mut out = Matrix::zeros(x.rows, weight.cols);
    gemm(1.0, x, false, weight, false, 0.0, &mut out);
    out.add_row_vector(bias);
    out
}

/// Trains a softmax regression on standardized features of a train split
/// of the examples and scores it on the rest.
pub fn run_probe(data: &[(Matrix<f64>, Vec<usize>)], cfg: &ProbeConfig) -> ProbeReport {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = ((data.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, data.len().max(1));
    let train: Vec<_> = order[..n_train.min(order.len())].iter().map(|&i| &data[i]).collect();
    let eval: Vec<_> = order[n_train.min(order.len())..].iter().map(|&i| &data[i]).collect();
    let (mut xt, yt) = stack(&train);
    let (mut xe, ye) = stack(&eval);
    let h = xt.cols;
    let classes = yt.iter().chain(&ye).copied().max().map_or(1, |m| m + 1);

    let n = xt.rows.max(1) as f64;
    let mut mean = vec![0.0; h];
    let mut sd = vec![0.0; h];
    for r in 0..xt.rows {
        for (c, &v) in xt.row(r).iter().enumerate() {
            mean[c] += v / n;
        }
    }
    for r in 0..xt.rows {
        for (c, &v) in xt.row(r).iter().enumerate() {
            sd[c] += (v - mean[c]) * (v - mean[c]) / n;
        }
    }
    for s in &mut sd {
        *s = s.sqrt().max(1e-8);
    }
    for m in [&mut xt, &mut xe] {
        for r in 0..m.rows {
            for (c, v) in m.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[c]) / sd[c];
            }
        }
    }

    let mut hist = vec![0usize; classes];
    for &y in &yt {
        hist[y] += 1;
    }
    let majority = (0..classes).fold(0, |b, c| if hist[c] > hist[b] { c } else { b });
    let baseline = if ye.is_empty() {
        0.0
    } else {
        ye.iter().filter(|&&y| y == majority).count() as f64 / ye.len() as f64
    };

    let mut w = NamedTensors(vec![
        ("weight".into(), Matrix::zeros(h, classes)),
        ("bias".into(), Matrix::zeros(1, classes)),
    ]);
    let mut state = AdamState::new(&w);
    let adam = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    for _ in 0..cfg.steps {
        let mut probs = scores(&xt, &w);
        for r in 0..probs.rows {
            softmax_in_place(probs.row_mut(r));
            probs.row_mut(r)[yt[r]] -= 1.0;
        }
        probs.scale(1.0 / n);
        let mut g = NamedTensors(vec![
            ("weight".into(), Matrix::zeros(h, classes)),
            ("bias".into(), Matrix::zeros(1, classes)),
        ]);
        gemm(1.0, &xt, true, &probs, false, 0.0, &mut g.0[0].1);
        g.0[0].1.axpy(cfg.l2, &w.0[0].1);
        probs.col_sums_into(&mut g.0[1].1);
        adam_step(&mut w, &g, &mut state, &adam, cfg.lr).expect("probe gradients are finite");
    }
    ProbeReport {
        accuracy: accuracy(&xe, &ye, &w),
        train_accuracy: accuracy(&xt, &yt, &w),
        baseline,
        majority_label: majority,
        classes,
        train_tokens: yt.len(),
        eval_tokens: ye.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn synthetic(separable: bool) -> Vec<(Matrix<f64>, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..40)
            .map(|_| {
                let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
                let mut data = Vec::new();
                for &l in &labels {
                    for c in 0..4 {
                        let signal = if separable && c == l { 3.0 } else { 0.0 };
                        data.push(signal + rng.random_range(-0.5..0.5));
                    }
                }
                (Matrix::from_vec(10, 4, data), labels)
            })
            .collect()
    }

    #[test]
    fn separable_features_beat_baseline() {
        let r = run_probe(&synthetic(true), &ProbeConfig::default());
        assert!(r.accuracy > 0.95, "{r:?}");
        assert!(r.baseline < 0.5);
        assert_eq!(r.classes, 3);
    }

    #[test]
    fn noise_stays_near_chance() {
        let r = run_probe(&synthetic(false), &ProbeConfig::default());
        assert!(r.accuracy < 0.6, "{r:?}");
    }
}
