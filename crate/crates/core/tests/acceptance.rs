//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use segalm::embeddings::{position_param_count, EmbeddingParams, PositionScheme};
use segalm::encoder::EncoderConfig;
use segalm::example::{Example, Packer, MAX_LEN};
use segalm::example_file::{parse_examples, read_examples, write_examples, ExampleFileError};
use segalm::gradcheck::{toy_report, GradCheckOptions};
use segalm::heads::{span_candidates, FinetuneModel, Head, Prediction, TaskKind, MAX_ANSWER_LEN};
use segalm::metrics;
use segalm::mlm::{apply_masking, evaluate, lr_at, mlm_loss, warmup_steps, MaskAction, MaskingPolicy};
use segalm::mlm::{MetricRecord, Trainer, TrainerConfig};
use segalm::model::{Backbone, ModelConfig, PretrainModel};
use segalm::probe::{collect, run_probe, ProbeConfig, ProbeReport};
use segalm::segmenter::{assign_indices, IndexedToken, SegmentCaps};
use segalm::tensor::Matrix;
use segalm::tokenizer::{SpecialIds, SubToken, Vocab};
use segalm::corpus;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const SP: SpecialIds = SpecialIds {
    pad: 0,
    unk: 1,
    cls: 2,
    sep: 3,
    mask: 4,
};

struct Harness {
    failed: Vec<&'static str>,
}

impl Harness {
    fn run(&mut self, name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> Check) {
        let t0 = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(e) => Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let took = t0.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if took > l => Err(format!("took {took:.1?}, limit {l:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name} ({:.1} s): {detail}", took.as_secs_f64()),
            Err(detail) => {
                println!("FAIL  {name} ({:.1} s): {detail}", took.as_secs_f64());
                self.failed.push(name);
            }
        }
    }
}

fn main() {
    let mut h = Harness { failed: Vec::new() };
    h.run("index assignment", Some(Duration::from_secs(60)), index_assignment);
    h.run("parameter counts", None, parameter_counts);
    h.run("embedding sum", None, embedding_sum);
    h.run("gradient fidelity", Some(Duration::from_secs(300)), gradient_fidelity);
    h.run("masking statistics", None, masking_statistics);
    h.run("schedule conformance", None, schedule_conformance);
    h.run("loss at init", None, loss_at_init);
    let mut trained = None;
    h.run("trainability", Some(Duration::from_secs(900)), || {
        let (detail, model) = trainability()?;
        trained = Some(model);
        Ok(detail)
    });
    h.run("probe separation", None, || probe_separation(trained.as_ref()));
    h.run("fine-tune conventions", None, finetune_conventions);
    h.run("metric fidelity", None, metric_fidelity);
    h.run("format round trip", None, format_round_trip);
    if h.failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: {} failed: {}", h.failed.len(), h.failed.join(", "));
        std::process::exit(1);
    }
}

fn index_assignment() -> Check {
    let caps = SegmentCaps::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tokens = 0;
    let mut clamped = [false; 3];
    for d in 0..10_000 {
        let shape = common::random_shape(&mut rng);
        let toks = assign_indices(&common::document(&shape), &caps);
        let errs = common::index_violations(&shape, &toks, &caps);
        ensure!(errs.is_empty(), "document {d}: {}", errs[..errs.len().min(3)].join("; "));
        tokens += toks.len();
        for t in &toks {
            clamped[0] |= t.p == 49;
            clamped[1] |= t.s == 99;
            clamped[2] |= t.t == 255;
        }
    }
    ensure!(clamped.iter().all(|&c| c), "random documents never reached every cap: {clamped:?}");
    Ok(format!("10000 documents, {tokens} tokens, 0 violations"))
}

fn parameter_counts() -> Check {
    let got = PositionScheme::ALL.map(|s| position_param_count(s, 768));
    ensure!(got == [311_808, 393_216, 508_416], "counts at 768: {got:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let h = rng.random_range(1..=4096);
        let [a, b, c] = PositionScheme::ALL.map(|s| position_param_count(s, h));
        ensure!(a < b && b < c, "ordering fails at H = {h}: {a} {b} {c}");
        ensure!((a, b, c) == (406 * h, 512 * h, 662 * h), "H = {h}: {a} {b} {c}");
    }
    Ok("311808 / 393216 / 508416 at H = 768; ordering holds for 100 random widths".into())
}

fn random_example(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> Example {
    let packer = Packer::new(SP, SegmentCaps::default(), n);
    let toks: Vec<IndexedToken> = (0..n - 2)
        .map(|_| IndexedToken {
            id: rng.random_range(5..vocab as u32),
            p: rng.random_range(0..50),
            s: rng.random_range(0..100),
            t: rng.random_range(0..256),
        })
        .collect();
    let mut ex = packer.pack_pretraining(&toks).remove(0);
    // Put a separator mid-sequence so the A/B types of the baseline differ.
    ex.ids[n / 2] = SP.sep;
    ex
}

fn embedding_sum() -> Check {
    let caps = SegmentCaps::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (v, h) = (40, 16);
    for scheme in PositionScheme::ALL {
        let mut p = EmbeddingParams::<f64>::zeros(scheme, v, h, &caps, MAX_LEN);
        p.layer_norm = false;
        p.token = gaussian(v, h, &mut rng);
        let ex = random_example(&mut rng, v, 64);
        let y = p.embed(&ex, SP.sep).map_err(|e| e.to_string())?;
        for j in 0..ex.max_len() {
            ensure!(y.row(j) == p.token.row(ex.ids[j] as usize), "{scheme}: row {j} differs from its token row");
        }
    }
    let mut worst = 0.0f64;
    for draw in 0..100 {
        let mut sega = EmbeddingParams::<f64>::init(PositionScheme::Sega, v, h, &caps, MAX_LEN, &mut rng);
        let mut global = EmbeddingParams::<f64>::init(PositionScheme::Global, v, h, &caps, MAX_LEN, &mut rng);
        sega.layer_norm = false;
        global.layer_norm = false;
        global.token = sega.token.clone();
        let n = rng.random_range(3..=MAX_LEN);
        let ex = random_example(&mut rng, v, n);
        let ys = sega.embed(&ex, SP.sep).map_err(|e| e.to_string())?;
        let yg = global.embed(&ex, SP.sep).map_err(|e| e.to_string())?;
        let types = ex.segment_types(SP.sep);
        let (pt, ps, pp) = (
            sega.token_index.as_ref().unwrap(),
            sega.sentence.as_ref().unwrap(),
            sega.paragraph.as_ref().unwrap(),
        );
        let (g, ty) = (global.global.as_ref().unwrap(), global.segment_type.as_ref().unwrap());
        for j in 0..n {
            let (pj, sj, tj) = ex.triple(j);
            for c in 0..h {
                let delta = pt.at(tj as usize, c) + ps.at(sj as usize, c) + pp.at(pj as usize, c)
                    - g.at(j, c)
                    - ty.at(types[j] as usize, c);
                let err = (ys.at(j, c) - (yg.at(j, c) + delta)).abs();
                worst = worst.max(err);
            }
        }
        ensure!(worst <= 1e-6, "draw {draw}: identity off by {worst:e}");
    }
    Ok(format!("token rows reproduced exactly for all schemes; delta identity max error {worst:.1e} over 100 draws"))
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

fn gradient_fidelity() -> Check {
    let opts = GradCheckOptions::default();
    let report = toy_report(PositionScheme::Sega, 0, &opts, None);
    let checked: Vec<_> = report.groups.iter().filter(|g| !g.skipped).collect();
    let worst = checked.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    ensure!(
        report.passed(),
        "failing groups {:?} (tolerance {:e})",
        report.failed_groups(),
        opts.tolerance
    );
    for need in [
        "embeddings.token",
        "embeddings.paragraph",
        "embeddings.sentence",
        "embeddings.token_index",
        "encoder.layer0.attention",
        "encoder.layer1.ffn",
        "heads.mlm",
        "heads.classifier",
        "heads.span",
    ] {
        ensure!(checked.iter().any(|g| g.group == need), "group {need} was not checked");
    }
    ensure!(worst < 1e-4, "max relative error {worst:e}");
    Ok(format!("{} groups checked in f64, max relative error {worst:.2e}", checked.len()))
}

fn masking_statistics() -> Check {
    let policy = MaskingPolicy::default();
    let vocab = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut eligible, mut selected) = (0usize, 0usize);
    let mut counts = [0usize; 3];
    while eligible < 100_000 {
        let ex = random_example(&mut rng, vocab, 128);
        eligible += (0..ex.active_len()).filter(|&i| !SP.contains(ex.ids[i])).count();
        let (_, actions) = apply_masking(&ex, &policy, &SP, vocab, &mut rng).map_err(|e| e.to_string())?;
        selected += actions.len();
        for (_, a) in actions {
            counts[match a {
                MaskAction::Mask => 0,
                MaskAction::Random => 1,
                MaskAction::Keep => 2,
            }] += 1;
        }
    }
    let rate = selected as f64 / eligible as f64;
    let split = counts.map(|c| c as f64 / selected as f64);
    ensure!((rate - 0.15).abs() <= 0.005, "selection rate {rate:.4}");
    for (got, want) in split.iter().zip([0.8, 0.1, 0.1]) {
        ensure!((got - want).abs() <= 0.01, "action split {split:?}");
    }
    let packer = Packer::new(SP, SegmentCaps::default(), 24);
    let short: Vec<IndexedToken> = (0..10)
        .map(|t| IndexedToken {
            id: 5 + t,
            p: 0,
            s: 0,
            t: t as u16,
        })
        .collect();
    let ex = packer.pack_pretraining(&short).remove(0);
    for trial in 0..10_000 {
        let (_, actions) = apply_masking(&ex, &policy, &SP, vocab, &mut rng).map_err(|e| e.to_string())?;
        if let Some((i, _)) = actions.iter().find(|(i, _)| SP.contains(ex.ids[*i])) {
            return Err(format!("trial {trial} selected special position {i}"));
        }
    }
    Ok(format!(
        "{eligible} positions: selected {rate:.4}, mask/random/keep {:.4}/{:.4}/{:.4}; no special selected in 10000 trials",
        split[0], split[1], split[2]
    ))
}

fn schedule_conformance() -> Check {
    let peak = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut totals = vec![1, 2, 99, 100, 101, 2000, 500_000, 1_000_000];
    totals.extend((0..20).map(|_| rng.random_range(1..2_000_000u64)));
    for &total in &totals {
        let w = warmup_steps(total);
        ensure!(w == (0.01 * total as f64).ceil() as u64, "warmup of {total} is {w}");
        ensure!(lr_at(w, total, peak) == peak || w == total, "lr at warmup end of {total} is {}", lr_at(w, total, peak));
        ensure!(lr_at(0, total, peak) == 0.0 && lr_at(total, total, peak) == 0.0, "endpoints of {total}");
        if total < 1000 {
            continue;
        }
        for _ in 0..1000 {
            let k = rng.random_range(1..total);
            let lr = lr_at(k, total, peak);
            let want = if k <= w {
                peak * k as f64 / w as f64
            } else {
                peak * (total - k) as f64 / (total - w) as f64
            };
            ensure!((lr - want).abs() <= 1e-15 * peak, "total {total}, step {k}: {lr} vs {want}");
            ensure!(lr <= peak && (lr < peak || k == w), "second peak at step {k} of {total}");
            if k > 1 && k + 1 < total && k != w {
                let d1 = lr - lr_at(k - 1, total, peak);
                let d2 = lr_at(k + 1, total, peak) - lr;
                ensure!((d1 - d2).abs() <= 1e-12 * peak, "not affine near step {k} of {total}");
            }
        }
    }
    ensure!(lr_at(5000, 500_000, peak) == 1e-4, "lr_at(5000, 500000) = {}", lr_at(5000, 500_000, peak));
    Ok(format!("{} totals; lr_at(5000, 500000) = 1e-4; affine at 1000 sampled steps each", totals.len()))
}

fn loss_at_init() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut lines = Vec::new();
    for v in [100usize, 1000, 30522] {
        let ln = (v as f64).ln();
        let labels: Vec<i32> = (0..16).map(|_| rng.random_range(0..v as i32)).collect();
        let uniform = mlm_loss(&Matrix::<f64>::zeros(16, v), &labels).map_err(|e| e.to_string())?.loss;
        ensure!((uniform / ln - 1.0).abs() <= 0.02, "|V| = {v}: uniform loss {uniform} vs {ln}");
        let cfg = ModelConfig::new(v, SP.sep, PositionScheme::Sega, EncoderConfig::toy());
        let model = PretrainModel::<f32>::init(cfg, &mut rng);
        let xs: Vec<Example> = (0..8).map(|_| random_example(&mut rng, v, 64)).collect();
        let stats = evaluate(&model, &xs, &MaskingPolicy::default(), &SP, 7).map_err(|e| e.to_string())?;
        let init = stats.mean_loss();
        ensure!((init / ln - 1.0).abs() <= 0.02, "|V| = {v}: initialized model loss {init:.4} vs ln|V| {ln:.4}");
        lines.push(format!("|V|={v}: uniform {uniform:.4}, init {init:.4}, ln|V| {ln:.4}"));
    }
    Ok(lines.join("; "))
}

fn toy_data() -> (Vocab, Vec<Example>) {
    let vocab = Vocab::parse(include_str!("../fixtures/synthetic_vocab.txt")).unwrap();
    let text = include_str!("../fixtures/synthetic_corpus.txt");
    let (xs, _) = corpus::build_pretraining(text, &vocab, &SegmentCaps::default(), 128);
    (vocab, xs)
}

fn toy_run(scheme: PositionScheme) -> Result<(PretrainModel<f32>, Vec<MetricRecord>, f64, f64), String> {
    let (vocab, xs) = toy_data();
    let cfg = ModelConfig::new(vocab.len(), vocab.specials().sep, scheme, EncoderConfig::toy());
    let model = PretrainModel::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let tc = TrainerConfig {
        total_steps: 2000,
        batch_size: 8,
        peak_lr: 3e-3,
        seed: 0,
        deterministic: true,
        ..TrainerConfig::default()
    };
    let sp = vocab.specials();
    let eval = |m: &PretrainModel<f32>| {
        evaluate(m, &xs, &tc.masking, &sp, 99)
            .map(|s| s.mean_loss())
            .map_err(|e| e.to_string())
    };
    let before = eval(&model)?;
    let mut trainer = Trainer::new(model, tc, xs.clone(), sp).map_err(|e| e.to_string())?;
    let mut trace = Vec::new();
    while !trainer.done() {
        trace.push(trainer.step().map_err(|e| e.to_string())?);
    }
    let after = eval(&trainer.model)?;
    Ok((trainer.model, trace, before, after))
}

fn bits(trace: &[MetricRecord]) -> Vec<(u64, u64, u64, u64)> {
    trace
        .iter()
        .map(|r| (r.step, r.lr.to_bits(), r.loss.to_bits(), r.masked_acc.to_bits()))
        .collect()
}

fn trainability() -> Result<(String, PretrainModel<f32>), String> {
    let (model, trace, before, after) = toy_run(PositionScheme::Sega)?;
    let ratio = after / before;
    ensure!(ratio <= 0.5, "held masks: loss {before:.4} -> {after:.4} (ratio {ratio:.3})");
    let (model2, trace2, _, _) = toy_run(PositionScheme::Sega)?;
    ensure!(bits(&trace) == bits(&trace2), "second deterministic run produced a different loss trace");
    ensure!(model == model2, "second deterministic run produced different parameters");
    let first = trace.first().map_or(f64::NAN, |r| r.loss);
    let last = trace.last().map_or(f64::NAN, |r| r.loss);
    Ok((
        format!(
            "2000 steps, eval loss {before:.3} -> {after:.3} (ratio {ratio:.3}), train loss {first:.3} -> {last:.3}; rerun bitwise identical"
        ),
        model,
    ))
}

fn probe_of(model: &PretrainModel<f32>) -> Result<ProbeReport, String> {
    let (vocab, xs) = toy_data();
    let feats = collect(&model.backbone, &xs, &vocab.specials(), vocab.specials().sep).map_err(|e| e.to_string())?;
    Ok(run_probe(&feats, &ProbeConfig::default()))
}

fn probe_separation(sega: Option<&PretrainModel<f32>>) -> Check {
    let sega = sega.ok_or("the trainability run did not produce a model")?;
    let s = probe_of(sega)?;
    let margin = s.accuracy - s.baseline;
    ensure!(margin >= 0.10, "probe {:.4} vs majority {:.4}", s.accuracy, s.baseline);
    let (global, _, _, _) = toy_run(PositionScheme::Global)?;
    let g = probe_of(&global)?;
    ensure!(g.accuracy < s.accuracy, "global probe {:.4} not below sega {:.4}", g.accuracy, s.accuracy);
    Ok(format!(
        "sega {:.4}, global {:.4}, majority baseline {:.4}",
        s.accuracy, g.accuracy, s.baseline
    ))
}

fn tokens(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<SubToken> {
    (0..n)
        .map(|_| {
            // Now and then an [UNK], which is ordinary content.
            let id = if rng.random_bool(0.05) { SP.unk } else { rng.random_range(5..vocab) };
            SubToken {
                id,
                surface: String::new(),
                is_continuation: false,
            }
        })
        .collect()
}

fn finetune_conventions() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..1000 {
        let max_len = rng.random_range(5..=MAX_LEN);
        let packer = Packer::new(SP, SegmentCaps::default(), max_len);
        let (la, lb) = (rng.random_range(1..200), rng.random_range(1..200));
        let ex = packer
            .build_pair(&tokens(&mut rng, la, 500), &tokens(&mut rng, lb, 500))
            .map_err(|e| e.to_string())?;
        let n = ex.active_len();
        let paras: BTreeSet<u16> = ex.p[..n].iter().copied().collect();
        ensure!(paras == BTreeSet::from([0, 1]), "pair {i}: paragraph indices {paras:?}");
        let sep = ex.first_sep(SP.sep).ok_or(format!("pair {i}: no separator"))?;
        ensure!(ex.ids[0] == SP.cls && ex.ids[n - 1] == SP.sep, "pair {i}: not framed by [CLS] .. [SEP]");
        ensure!(ex.p[..=sep].iter().all(|&p| p == 0), "pair {i}: segment A off paragraph 0");
        ensure!(ex.p[sep + 1..n].iter().all(|&p| p == 1), "pair {i}: segment B off paragraph 1");
        ensure!(ex.layout_violation(SP.sep).is_none(), "pair {i}: {:?}", ex.layout_violation(SP.sep));
    }
    for i in 0..1000 {
        let max_len = rng.random_range(5..=MAX_LEN);
        let packer = Packer::new(SP, SegmentCaps::default(), max_len);
        let lq = rng.random_range(1..40);
        let question = tokens(&mut rng, lq, 500);
        let context: Vec<Vec<Vec<SubToken>>> = (0..rng.random_range(1..5))
            .map(|_| {
                (0..rng.random_range(1..5))
                    .map(|_| {
                        let n = rng.random_range(1..20);
                        tokens(&mut rng, n, 500)
                    })
                    .collect()
            })
            .collect();
        let span = packer.build_span(&question, &context, None).map_err(|e| e.to_string())?;
        let ex = span.example;
        let n = ex.active_len();
        let sep = ex.first_sep(SP.sep).ok_or(format!("span {i}: no separator"))?;
        ensure!(ex.p[..=sep].iter().all(|&p| p == 0), "span {i}: question off paragraph 0");
        ensure!(ex.p[sep + 1..n].iter().all(|&p| p >= 1), "span {i}: context on paragraph 0");
        ensure!(ex.layout_violation(SP.sep).is_none(), "span {i}: {:?}", ex.layout_violation(SP.sep));
        let cands = span_candidates(&ex, &SP);
        ensure!(cands.len() == span.context_len, "span {i}: {} candidates for {} context tokens", cands.len(), span.context_len);
    }
    let decoded = span_decoding()?;
    Ok(format!("1000 pair and 1000 span layouts conform; {decoded}"))
}

/// Predicted spans of a random span model on 20-token inputs against an
/// exhaustive search over every position pair.
fn span_decoding() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = 60;
    let mut enc = EncoderConfig::with_ffn(1, 8, 2);
    enc.dropout = 0.0;
    let cfg = ModelConfig::new(v, SP.sep, PositionScheme::Sega, enc);
    let backbone = Backbone::<f64>::init(&cfg, &mut rng);
    let mut model = FinetuneModel::new(cfg, backbone, TaskKind::Span, SP, &mut rng);
    let packer = Packer::new(SP, SegmentCaps::default(), 20);
    for case in 0..100 {
        if let Head::Span(head) = &mut model.head {
            head.start_weight = gaussian(8, 1, &mut rng);
            head.end_weight = gaussian(8, 1, &mut rng);
        }
        let lq = rng.random_range(1..5);
        let question = tokens(&mut rng, lq, v as u32);
        let context = vec![vec![tokens(&mut rng, 8, v as u32)], vec![tokens(&mut rng, 12, v as u32)]];
        let ex = packer.build_span(&question, &context, None).map_err(|e| e.to_string())?.example;
        ensure!(ex.active_len() == 20, "case {case}: {} tokens", ex.active_len());
        let Prediction::Span { start, end } = model.predict(&ex).map_err(|e| e.to_string())? else {
            return Err("span model predicted a class".into());
        };
        let last = model.backbone.hidden_states(&ex, SP.sep).map_err(|e| e.to_string())?.pop().unwrap();
        let Head::Span(head) = &model.head else { unreachable!() };
        let logit = |w: &Matrix<f64>, b: &Matrix<f64>, j: usize| {
            (0..8).map(|c| last.at(j, c) * w.at(c, 0)).sum::<f64>() + b.at(0, 0)
        };
        let allowed = |j: usize| ex.p[j] >= 1 && ![SP.pad, SP.cls, SP.sep, SP.mask].contains(&ex.ids[j]);
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for s in (0..20).filter(|&j| allowed(j)) {
            for e in (s..20).filter(|&j| allowed(j) && j <= s + MAX_ANSWER_LEN) {
                let score = logit(&head.start_weight, &head.start_bias, s) + logit(&head.end_weight, &head.end_bias, e);
                if score > best.0 {
                    best = (score, s, e);
                }
            }
        }
        ensure!((start, end) == (best.1, best.2), "case {case}: decoded ({start}, {end}), exhaustive ({}, {})", best.1, best.2);
    }
    Ok("span decoding matches exhaustive search on 100 inputs".into())
}

fn ref_normalize(s: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for c in s.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else if !c.is_ascii_punctuation() {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words.retain(|w| w != "a" && w != "an" && w != "the");
    words
}

fn ref_f1(pred: &str, gold: &str) -> f64 {
    let mut p = ref_normalize(pred);
    let mut g = ref_normalize(gold);
    if p.is_empty() || g.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    p.sort();
    g.sort();
    let (mut i, mut j, mut common) = (0, 0, 0.0);
    while i < p.len() && j < g.len() {
        match p[i].cmp(&g[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1.0;
                i += 1;
                j += 1;
            }
        }
    }
    if common == 0.0 {
        return 0.0;
    }
    let (pr, rc) = (common / p.len() as f64, common / g.len() as f64);
    2.0 * pr * rc / (pr + rc)
}

/// Correlation of the one-hot indicator matrices of `pred` and `gold`.
fn ref_matthews(pred: &[u32], gold: &[u32], k: usize) -> f64 {
    let n = pred.len() as f64;
    let onehot = |xs: &[u32]| -> Vec<Vec<f64>> {
        (0..k).map(|c| xs.iter().map(|&x| f64::from(x as usize == c)).collect()).collect()
    };
    let (x, y) = (onehot(pred), onehot(gold));
    let cov = |a: &[f64], b: &[f64]| {
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        a.iter().zip(b).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>()
    };
    let xy: f64 = (0..k).map(|c| cov(&x[c], &y[c])).sum();
    let xx: f64 = (0..k).map(|c| cov(&x[c], &x[c])).sum();
    let yy: f64 = (0..k).map(|c| cov(&y[c], &y[c])).sum();
    if xx == 0.0 || yy == 0.0 {
        0.0
    } else {
        xy / (xx * yy).sqrt()
    }
}

fn ref_binary_matthews(pred: &[u32], gold: &[u32]) -> f64 {
    let mut c: HashMap<(u32, u32), f64> = HashMap::new();
    for (&p, &g) in pred.iter().zip(gold) {
        *c.entry((p, g)).or_default() += 1.0;
    }
    let get = |k| c.get(&k).copied().unwrap_or(0.0);
    let (tp, tn, fp, fnn) = (get((1, 1)), get((0, 0)), get((1, 0)), get((0, 1)));
    let d = ((tp + fp) * (tp + fnn) * (tn + fp) * (tn + fnn)).sqrt();
    if d == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fnn) / d
    }
}

fn ref_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn random_answer(rng: &mut ChaCha8Rng) -> String {
    const WORDS: [&str; 14] = [
        "the", "a", "an", "Castle", "castle", "king's", "red", "Red,", "horse.", "(guard)", "tower", "1920", "is", "",
    ];
    let n = rng.random_range(0..6);
    let mut s: Vec<&str> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
    if rng.random_bool(0.2) {
        s.push("  ");
    }
    s.join(" ")
}

fn metric_fidelity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tol = 1e-9;
    let mut worst = 0.0f64;
    let mut diff = |name: &str, case: usize, a: f64, b: f64| -> Result<(), String> {
        let d = (a - b).abs();
        worst = worst.max(d);
        ensure!(d <= tol, "{name} case {case}: {a} vs reference {b}");
        Ok(())
    };
    for case in 0..200 {
        let gold = random_answer(&mut rng);
        let pred = if rng.random_bool(0.3) { gold.to_uppercase() } else { random_answer(&mut rng) };
        let em_ref = f64::from(ref_normalize(&pred) == ref_normalize(&gold));
        diff("exact match", case, metrics::exact_match(&pred, &gold), em_ref)?;
        diff("f1", case, metrics::squad_f1(&pred, &gold), ref_f1(&pred, &gold))?;

        let n = rng.random_range(2..60);
        let k = rng.random_range(2..5usize);
        let gold: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
        let pred: Vec<u32> = gold
            .iter()
            .map(|&g| if rng.random_bool(0.6) { g } else { rng.random_range(0..k as u32) })
            .collect();
        diff("matthews", case, metrics::matthews(&pred, &gold), ref_matthews(&pred, &gold, k))?;
        let bg: Vec<u32> = gold.iter().map(|g| g % 2).collect();
        let bp: Vec<u32> = pred.iter().map(|p| p % 2).collect();
        diff("binary matthews", case, metrics::matthews(&bp, &bg), ref_binary_matthews(&bp, &bg))?;

        let x: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 4.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-3.0..3.0)).collect();
        diff("spearman", case, metrics::spearman(&x, &y), ref_spearman(&x, &y))?;
    }
    Ok(format!("exact match, F1, Matthews (binary and multi-class) and Spearman on 200 cases, max difference {worst:.1e}"))
}

fn format_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut total = 0;
    for file in 0..10 {
        let max_len = rng.random_range(1..=MAX_LEN);
        let xs: Vec<Example> = (0..1000).map(|_| common::fuzz_example(&mut rng, max_len)).collect();
        let path = dir.path().join(format!("f{file}.bin"));
        write_examples(&path, max_len, "vocab-a", &xs).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let (_, back) = parse_examples(&bytes).map_err(|e| e.to_string())?;
        ensure!(back == xs, "file {file}: records differ after reading");
        let again = dir.path().join(format!("g{file}.bin"));
        write_examples(&again, max_len, "vocab-a", &back).map_err(|e| e.to_string())?;
        ensure!(std::fs::read(&again).map_err(|e| e.to_string())? == bytes, "file {file}: bytes differ on rewrite");
        ensure!(
            matches!(read_examples(&path, "vocab-b"), Err(ExampleFileError::VocabMismatch { .. })),
            "file {file}: vocab mismatch not detected"
        );
        ensure!(read_examples(&path, "vocab-a").is_ok(), "file {file}: matching vocab rejected");
        total += back.len();
    }
    Ok(format!("{total} fuzzed examples round trip bitwise; vocab mismatch detected"))
}
