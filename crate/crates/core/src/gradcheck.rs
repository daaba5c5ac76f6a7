//! Finite-difference gradient checks in double precision, using the
//! five-point central stencil.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::build_pretraining;
use crate::embeddings::PositionScheme;
use crate::encoder::EncoderConfig;
use crate::example::{Example, Packer};
use crate::heads::{FinetuneModel, TaskKind};
use crate::mlm::masking::{apply_masking, MaskingPolicy};
use crate::model::{ModelConfig, PretrainModel};
use crate::params::ParamSet;
use crate::segmenter::SegmentCaps;
use crate::synth;
use crate::tasks::{build_classification, build_spans, parse_task, TaskData};
use crate::tokenizer::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Entries with the largest analytic magnitude checked per tensor.
    pub top_entries: usize,
    /// Additional uniformly drawn entries per tensor.
    pub random_entries: usize,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-3,
            top_entries: 12,
            random_entries: 12,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub tensors: Vec<String>,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Tensor and flat entry of the worst error.
    pub worst: Option<(String, usize)>,
    pub passed: bool,
    pub skipped: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn failed_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !g.passed)
            .map(|g| g.group.as_str())
            .collect()
    }

    pub fn merge(&mut self, other: GradReport) {
        self.groups.extend(other.groups);
    }
}

/// Maps a parameter name to its report group.
pub fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["embeddings", leaf] if leaf.starts_with("ln_") => "embeddings.layer_norm".into(),
        ["embeddings", leaf] => format!("embeddings.{leaf}"),
        ["encoder", layer, leaf] => {
            let kind = if leaf.starts_with("attn_") {
                "attention"
            } else if leaf.starts_with("ln1_") {
                "attention_norm"
            } else if leaf.starts_with("ffn_") {
                "ffn"
            } else if leaf.starts_with("ln2_") {
                "ffn_norm"
            } else {
                "other"
            };
            format!("encoder.{layer}.{kind}")
        }
        [head, ..] if parts.len() > 1 => format!("heads.{head}"),
        _ => name.to_string(),
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` against finite differences of `loss` around
/// `model`. Groups in `expected` that have no parameters are reported as
/// skipped.
pub fn check<M, F>(
    model: &M,
    analytic: &M,
    loss: F,
    opts: &GradCheckOptions,
    expected: &[&str],
) -> GradReport
where
    M: ParamSet<f64> + Clone,
    F: Fn(&M) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let grads = analytic.params();
    let mut work = model.clone();
    let mut groups: BTreeMap<String, GroupReport> = BTreeMap::new();
    for g in expected {
        groups.insert(
            g.to_string(),
            GroupReport {
                group: g.to_string(),
                tensors: Vec::new(),
                checked: 0,
                max_rel_error: 0.0,
                worst: None,
                passed: true,
                skipped: true,
                note: Some("no parameters in this model".into()),
            },
        );
    }
    for (ti, (name, g)) in grads.iter().enumerate() {
        let group = group_of(name);
        let entry = groups.entry(group.clone()).or_insert_with(|| GroupReport {
            group: group.clone(),
            tensors: Vec::new(),
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
            passed: true,
            skipped: true,
            note: Some("no parameters in this model".into()),
        });
        entry.tensors.push(name.clone());
        if g.is_empty() {
            continue;
        }
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g.data[b].abs().total_cmp(&g.data[a].abs()).then(a.cmp(&b)));
        let mut picks: Vec<usize> = order.iter().copied().take(opts.top_entries).collect();
        let extra = opts.random_entries.min(g.len());
        picks.extend(sample(&mut rng, g.len(), extra).into_iter());
        picks.sort_unstable();
        picks.dedup();
        entry.skipped = false;
        entry.note = None;
        for k in picks {
            let orig = work.params()[ti].1.data[k];
            let mut at = |d: f64| {
                set(&mut work, ti, k, orig + d * opts.step);
                loss(&work)
            };
            let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
            set(&mut work, ti, k, orig);
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * opts.step);
            let err = relative_error(g.data[k], numeric, opts.floor);
            entry.checked += 1;
            if !(err <= entry.max_rel_error) {
                entry.max_rel_error = err;
                entry.worst = Some((name.clone(), k));
            }
        }
    }
    let groups = groups
        .into_values()
        .map(|mut g| {
            g.passed = g.skipped || g.max_rel_error < opts.tolerance;
            g
        })
        .collect();
    GradReport {
        tolerance: opts.tolerance,
        groups,
    }
}

/// Parameter groups every report lists, present or not.
pub fn expected_groups(layers: usize) -> Vec<String> {
    let mut g: Vec<String> = [
        "token",
        "paragraph",
        "sentence",
        "token_index",
        "global",
        "segment_type",
        "layer_norm",
    ]
    .iter()
    .map(|t| format!("embeddings.{t}"))
    .collect();
    for l in 0..layers {
        for k in ["attention", "attention_norm", "ffn", "ffn_norm"] {
            g.push(format!("encoder.layer{l}.{k}"));
        }
    }
    g.push("heads.mlm".into());
    g
}

/// A small double-precision setup: the toy encoder without dropout, the
/// synthetic vocabulary and a few short masked examples.
pub fn toy_setup(scheme: PositionScheme, seed: u64) -> (PretrainModel<f64>, Vec<Example>) {
    let vocab = Vocab::parse(&synth::vocab_text()).expect("synthetic vocab parses");
    let mut enc = EncoderConfig::toy();
    enc.dropout = 0.0;
    let cfg = ModelConfig::new(vocab.len(), vocab.specials().sep, scheme, enc);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = PretrainModel::init(cfg, &mut rng);
    let (xs, _) = build_pretraining(&synth::corpus(2, seed), &vocab, &SegmentCaps::default(), 24);
    let policy = MaskingPolicy {
        select_prob: 0.3,
        ..MaskingPolicy::default()
    };
    let masked = xs
        .iter()
        .take(2)
        .map(|x| {
            apply_masking(x, &policy, &vocab.specials(), vocab.len(), &mut rng)
                .expect("synthetic text has maskable tokens")
                .0
        })
        .collect();
    (model, masked)
}

/// Gradient check of the masked-LM model. `fault` names a tensor whose
/// analytic gradient is scaled by 1.5 before the comparison.
pub fn pretrain_report(
    model: &PretrainModel<f64>,
    examples: &[Example],
    opts: &GradCheckOptions,
    fault: Option<&str>,
) -> GradReport {
    let loss = |m: &PretrainModel<f64>| {
        examples
            .iter()
            .map(|x| m.loss(x).expect("examples carry labels").loss_sum)
            .sum::<f64>()
    };
    let mut grads = model.zeros_like();
    for x in examples {
        model
            .accumulate_grad(x, 1.0, None, &mut grads)
            .expect("examples carry labels");
    }
    if let Some(name) = fault {
        for (n, g) in grads.params_mut() {
            if n == name {
                g.scale(1.5);
            }
        }
    }
    let expected = expected_groups(model.config.encoder.layers);
    let expected: Vec<&str> = expected.iter().map(String::as_str).collect();
    check(model, &grads, loss, opts, &expected)
}

/// Classification and span models on top of the toy backbone of
/// [`toy_setup`], each with a few labeled synthetic examples.
pub fn toy_finetune_setups(scheme: PositionScheme, seed: u64) -> Vec<(FinetuneModel<f64>, Vec<Example>)> {
    let vocab = Vocab::parse(&synth::vocab_text()).expect("synthetic vocab parses");
    let (base, _) = toy_setup(scheme, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let packer = Packer::new(vocab.specials(), SegmentCaps::default(), 48);
    let TaskData::Classification(pairs) = parse_task(&synth::pair_task_jsonl(2, seed)).expect("pair lines parse")
    else {
        unreachable!("pair generator writes classification lines")
    };
    let kind = TaskKind::Classify { num_labels: 2 };
    let pair_xs = build_classification(&pairs, &vocab, &packer, kind).expect("pair examples build");
    let TaskData::Span(spans) = parse_task(&synth::span_task_jsonl(4, seed)).expect("span lines parse") else {
        unreachable!("span generator writes span lines")
    };
    let (span_xs, _) = build_spans(&spans, &vocab, &packer).expect("span examples build");
    let span_xs: Vec<Example> = span_xs.into_iter().take(2).map(|s| s.example).collect();
    [(kind, pair_xs), (TaskKind::Span, span_xs)]
        .into_iter()
        .map(|(k, xs)| {
            let m = FinetuneModel::new(base.config, base.backbone.clone(), k, vocab.specials(), &mut rng);
            (m, xs)
        })
        .collect()
}

/// Gradient check of a fine-tuning model, backbone included.
pub fn finetune_report(
    model: &FinetuneModel<f64>,
    examples: &[Example],
    opts: &GradCheckOptions,
    fault: Option<&str>,
) -> GradReport {
    let loss = |m: &FinetuneModel<f64>| {
        examples
            .iter()
            .map(|x| m.loss(x).expect("examples carry labels"))
            .sum::<f64>()
    };
    let mut grads = model.zeros_like();
    for x in examples {
        model
            .accumulate_grad(x, 1.0, None, &mut grads)
            .expect("examples carry labels");
    }
    if let Some(name) = fault {
        for (n, g) in grads.params_mut() {
            if n == name {
                g.scale(1.5);
            }
        }
    }
    check(model, &grads, loss, opts, &[])
}

/// The masked-LM check followed by the head groups of a classification and
/// a span model sharing the same backbone.
pub fn toy_report(scheme: PositionScheme, seed: u64, opts: &GradCheckOptions, fault: Option<&str>) -> GradReport {
    let (model, xs) = toy_setup(scheme, seed);
    let mut report = pretrain_report(&model, &xs, opts, fault);
    for (m, xs) in toy_finetune_setups(scheme, seed) {
        let r = finetune_report(&m, &xs, opts, fault);
        report.merge(GradReport {
            tolerance: r.tolerance,
            groups: r.groups.into_iter().filter(|g| g.group.starts_with("heads.")).collect(),
        });
    }
    report
}

fn set<M: ParamSet<f64>>(m: &mut M, tensor: usize, k: usize, v: f64) {
    m.params_mut()[tensor].1.data[k] = v;
}
