//! Evaluation metrics for classification, regression and span extraction.

use std::collections::HashMap;

pub fn accuracy(pred: &[u32], gold: &[u32]) -> f64 {
    assert_eq!(pred.len(), gold.len());
    if gold.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

/// F1 of the positive class `positive`.
pub fn binary_f1(pred: &[u32], gold: &[u32], positive: u32) -> f64 {
    assert_eq!(pred.len(), gold.len());
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fnn = 0.0;
    for (&p, &g) in pred.iter().zip(gold) {
        match (p == positive, g == positive) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fnn += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fnn)
}

/// Matthews correlation coefficient, multi-class form (Gorodkin); equals the
/// usual binary formula for two classes. 0 when undefined.
pub fn matthews(pred: &[u32], gold: &[u32]) -> f64 {
    assert_eq!(pred.len(), gold.len());
    let k = pred.iter().chain(gold).copied().max().map_or(0, |m| m as usize + 1);
    let mut conf = vec![vec![0.0f64; k]; k];
    for (&p, &g) in pred.iter().zip(gold) {
        conf[g as usize][p as usize] += 1.0;
    }
    let n = pred.len() as f64;
    let correct: f64 = (0..k).map(|i| conf[i][i]).sum();
    let t: Vec<f64> = (0..k).map(|i| conf[i].iter().sum()).collect();
    let p: Vec<f64> = (0..k).map(|j| (0..k).map(|i| conf[i][j]).sum()).collect();
    let pt: f64 = (0..k).map(|i| p[i] * t[i]).sum();
    let pp: f64 = p.iter().map(|x| x * x).sum();
    let tt: f64 = t.iter().map(|x| x * x).sum();
    let denom = ((n * n - pp) * (n * n - tt)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (correct * n - pt) / denom
    }
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// SQuAD answer normalization: lowercase, drop punctuation and the articles
/// a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lower
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> f64 {
    f64::from(normalize_answer(pred) == normalize_answer(gold))
}

/// Harmonic mean of token precision and recall over multiset overlap.
pub fn overlap_f1(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return f64::from(pred == gold);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_default() += 1;
    }
    let mut common = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Overlap F1 of whitespace tokens, without normalization.
pub fn token_overlap_f1(pred: &str, gold: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    overlap_f1(&p, &g)
}

/// Overlap F1 after SQuAD normalization.
pub fn squad_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    overlap_f1(&p, &g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_metrics() {
        assert_eq!(exact_match("The Fox.", "fox"), 1.0);
        assert_eq!(squad_f1("red fox", "red fox"), 1.0);
        assert!((token_overlap_f1("a b c", "b c d") - 2.0 / 3.0).abs() < 1e-12);
        assert!((squad_f1("a b c", "b c d") - 0.8).abs() < 1e-12);
        assert_eq!(squad_f1("the", "a"), 1.0);
        assert_eq!(squad_f1("x", ""), 0.0);
    }

    #[test]
    fn matthews_extremes() {
        let g = [0, 1, 1, 0, 1];
        let anti: Vec<u32> = g.iter().map(|x| 1 - x).collect();
        assert!((matthews(&anti, &g) + 1.0).abs() < 1e-12);
        assert!((matthews(&g, &g) - 1.0).abs() < 1e-12);
        assert_eq!(matthews(&[1, 1, 1], &[0, 1, 0]), 0.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), [2.5, 4.0, 2.5, 1.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[9.0, 4.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn f1_and_accuracy() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 1, 1]), 2.0 / 3.0);
        assert!((binary_f1(&[1, 0, 1, 1], &[1, 1, 0, 1], 1) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 2.0]), 0.0);
    }
}
