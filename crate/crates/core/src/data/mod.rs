//! Trigger data: question/answer pairs, the think/answer template, the
//! character tokenizer, file ingestion and synthetic task generators.

mod ingest;
mod synth;
mod template;
mod vocab;

pub use ingest::{ingest, parse_records, write_records, IngestReport};
pub use synth::{
    check_disjoint, enumerate_task, question_hash, split_disjoint, synth_tasks, SynthSpec, Task,
};
pub use template::{
    encode_all, encode_trigger, format_prompt, format_trigger, parse_trigger, QaPair,
    TriggerExample,
};
pub use vocab::{
    TokenId, Vocab, ANSWER_CLOSE, ANSWER_OPEN, EOS, PAD, SPECIALS, TASK_ALPHABET, THINK_CLOSE,
    THINK_OPEN,
};
