//! Regenerates the shipped synthetic corpus, vocabulary and task files.

use std::fs;

use segalm::synth;

fn main() -> std::io::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
    fs::write(format!("{dir}/synthetic_corpus.txt"), synth::default_corpus())?;
    fs::write(format!("{dir}/synthetic_vocab.txt"), synth::vocab_text())?;
    fs::write(format!("{dir}/pair_task.jsonl"), synth::pair_task_jsonl(synth::TASK_RECORDS, synth::TASK_SEED))?;
    fs::write(format!("{dir}/span_task.jsonl"), synth::span_task_jsonl(synth::TASK_RECORDS, synth::TASK_SEED))
}
