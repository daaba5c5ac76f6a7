//! Deterministic synthetic corpus and task data for toy-scale runs.
//!
//! Documents are on-topic: each picks one noun family and writes 2-5
//! paragraphs of 2-6 template sentences over it.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::segmenter::DOC_SEPARATOR;

pub const CORPUS_SEED: u64 = 20_200_420;
pub const TASK_SEED: u64 = 20_200_421;
pub const TASK_RECORDS: usize = 512;
pub const CORPUS_DOCS: usize = 200;

const DETS: &[&str] = &["the", "a", "every", "this", "that"];
const ADJS: &[&str] = &[
    "red", "old", "small", "quiet", "bright", "cold", "green", "heavy", "quick", "dark", "warm",
    "tall",
];
const VERBS: &[&str] = &[
    "saw", "found", "liked", "moved", "watched", "carried", "followed", "painted", "left",
    "touched", "kept", "pushed",
];
const INTRANSITIVE: &[&str] = &["slept", "waited", "fell", "stayed", "vanished", "returned"];
const PREPS: &[&str] = &["in", "on", "near", "under", "behind", "beside"];
const TOPICS: &[&[&str]] = &[
    &["fox", "river", "tree", "stone", "hill", "bird"],
    &["ship", "harbor", "sail", "captain", "wave", "rope"],
    &["train", "station", "ticket", "track", "clock", "bench"],
    &["garden", "flower", "seed", "fence", "gate", "path"],
    &["king", "castle", "crown", "tower", "guard", "horse"],
    &["robot", "wire", "switch", "panel", "lamp", "engine"],
    &["baker", "bread", "oven", "table", "cup", "window"],
    &["farmer", "field", "cow", "barn", "cart", "wheel"],
];
const CONNECT: &[&str] = &["and", "but", "while"];

/// Every word the generator can emit, in vocabulary order.
pub fn corpus_words() -> Vec<&'static str> {
    let mut w: Vec<&str> = Vec::new();
    w.extend(DETS);
    w.extend(ADJS);
    w.extend(VERBS);
    w.extend(INTRANSITIVE);
    w.extend(PREPS);
    w.extend(CONNECT);
    for t in TOPICS {
        w.extend(t.iter());
    }
    w.extend([".", ",", "yes", "no", "good", "bad", "where", "what", "is", "was", "?"]);
    w
}

/// Vocabulary file text covering the synthetic corpus and tasks.
pub fn vocab_text() -> String {
    let mut lines = vec!["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
    lines.extend(corpus_words());
    lines.push("##s");
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn noun(rng: &mut ChaCha8Rng, topic: &[&'static str]) -> String {
    let n = *topic.choose(rng).unwrap();
    if rng.random_bool(0.2) {
        format!("{n}s")
    } else {
        n.to_string()
    }
}

fn noun_phrase(rng: &mut ChaCha8Rng, topic: &[&'static str]) -> String {
    let det = *DETS.choose(rng).unwrap();
    if rng.random_bool(0.5) {
        format!("{det} {} {}", ADJS.choose(rng).unwrap(), noun(rng, topic))
    } else {
        format!("{det} {}", noun(rng, topic))
    }
}

/// One template sentence with a trailing period.
pub fn sentence(rng: &mut ChaCha8Rng, topic: &[&'static str]) -> String {
    let subj = noun_phrase(rng, topic);
    let body = match rng.random_range(0..4) {
        0 => format!("{subj} {} {}", VERBS.choose(rng).unwrap(), noun_phrase(rng, topic)),
        1 => format!(
            "{subj} {} {} {}",
            INTRANSITIVE.choose(rng).unwrap(),
            PREPS.choose(rng).unwrap(),
            noun_phrase(rng, topic)
        ),
        2 => format!("{subj} {}", INTRANSITIVE.choose(rng).unwrap()),
        _ => format!(
            "{subj} {} {} , {} {} {}",
            VERBS.choose(rng).unwrap(),
            noun_phrase(rng, topic),
            CONNECT.choose(rng).unwrap(),
            noun_phrase(rng, topic),
            INTRANSITIVE.choose(rng).unwrap()
        ),
    };
    format!("{}.", capitalize(&body))
}

/// One document as nested paragraphs of sentences.
pub fn document(rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let topic = *TOPICS.choose(rng).unwrap();
    let paras = rng.random_range(2..=5);
    (0..paras)
        .map(|_| {
            let n = rng.random_range(2..=6);
            (0..n).map(|_| sentence(rng, topic)).collect()
        })
        .collect()
}

fn render(doc: &[Vec<String>]) -> String {
    doc.iter()
        .map(|p| p.join(" "))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// `docs` documents separated by `===DOC===` lines.
pub fn corpus(docs: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for i in 0..docs {
        if i > 0 {
            out.push_str(DOC_SEPARATOR);
            out.push('\n');
        }
        out.push_str(&render(&document(&mut rng)));
        out.push('\n');
    }
    out
}

/// The shipped 200-document corpus.
pub fn default_corpus() -> String {
    corpus(CORPUS_DOCS, CORPUS_SEED)
}

/// A separable pair task: the label is 1 exactly when `text_b` says "good".
pub fn pair_task_jsonl(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..n {
        let topic = *TOPICS.choose(&mut rng).unwrap();
        let a = sentence(&mut rng, topic);
        let label = rng.random_range(0..2u32);
        let word = if label == 1 { "good" } else { "bad" };
        let b = format!("{} was {word}.", capitalize(&noun_phrase(&mut rng, topic)));
        let line = serde_json::json!({"text_a": a, "text_b": b, "label": label});
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

/// Span task lines. The answer is the object of a sentence whose verb the
/// question names.
pub fn span_task_jsonl(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..n {
        let topic = *TOPICS.choose(&mut rng).unwrap();
        let paras = rng.random_range(1..=3);
        let target = rng.random_range(0..paras);
        let mut context: Vec<Vec<String>> = Vec::new();
        let mut answer = String::new();
        let mut asked = "";
        for p in 0..paras {
            let mut sents = Vec::new();
            for s in 0..rng.random_range(1..=3) {
                if p == target && s == 0 {
                    let subj = noun_phrase(&mut rng, topic);
                    let verb = *VERBS.choose(&mut rng).unwrap();
                    asked = verb;
                    answer = noun_phrase(&mut rng, topic);
                    sents.push(format!("{} {verb} {answer}.", capitalize(&subj)));
                } else {
                    sents.push(sentence(&mut rng, topic));
                }
            }
            context.push(sents);
        }
        let joined = context
            .iter()
            .map(|p| p.join(" "))
            .collect::<Vec<_>>()
            .join("\n\n");
        let para_start: usize = context[..target]
            .iter()
            .map(|p| p.join(" ").chars().count() + 2)
            .sum();
        let first = &context[target][0];
        let local = first.rfind(&answer).expect("answer is in its sentence");
        let start = para_start + first[..local].chars().count();
        debug_assert_eq!(
            joined.chars().skip(start).take(answer.chars().count()).collect::<String>(),
            answer
        );
        let question = format!("What was {asked}?");
        let line = serde_json::json!({
            "question": question,
            "context_paragraphs": context,
            "answer_text": answer,
            "answer_char_start": start,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::{split_documents, split_paragraphs, split_sentences};
    use crate::tokenizer::Vocab;

    fn strings(v: &serde_json::Value, out: &mut Vec<String>) {
        match v {
            serde_json::Value::String(s) => out.push(s.clone()),
            serde_json::Value::Array(xs) => xs.iter().for_each(|x| strings(x, out)),
            serde_json::Value::Object(m) => m.values().for_each(|x| strings(x, out)),
            _ => {}
        }
    }

    #[test]
    fn shipped_fixtures_match_the_generator() {
        assert_eq!(include_str!("../fixtures/synthetic_corpus.txt"), default_corpus());
        assert_eq!(include_str!("../fixtures/synthetic_vocab.txt"), vocab_text());
        assert_eq!(
            include_str!("../fixtures/pair_task.jsonl"),
            pair_task_jsonl(TASK_RECORDS, TASK_SEED)
        );
        assert_eq!(
            include_str!("../fixtures/span_task.jsonl"),
            span_task_jsonl(TASK_RECORDS, TASK_SEED)
        );
    }

    #[test]
    fn corpus_segments_as_generated() {
        let text = corpus(20, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let docs = split_documents(&text);
        assert_eq!(docs.len(), 20);
        for raw in docs {
            let want = document(&mut rng);
            let paras = split_paragraphs(&raw);
            assert_eq!(paras.len(), want.len());
            for (p, w) in paras.iter().zip(&want) {
                assert_eq!(&split_sentences(p), w);
            }
        }
    }

    #[test]
    fn vocab_covers_everything() {
        let vocab = Vocab::parse(&vocab_text()).unwrap();
        let mut texts = vec![corpus(30, 1).replace(DOC_SEPARATOR, "")];
        for line in pair_task_jsonl(30, 1).lines().chain(span_task_jsonl(30, 1).lines()) {
            strings(&serde_json::from_str(line).unwrap(), &mut texts);
        }
        let unk = vocab.specials().unk;
        for text in texts {
            assert!(vocab.tokenize(&text).iter().all(|t| t.id != unk), "{text}");
        }
    }
}
