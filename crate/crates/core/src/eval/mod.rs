//! Exact-match evaluation by greedy decoding, and the experiment suites
//! built on it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{format_prompt, QaPair, Vocab, ANSWER_CLOSE, ANSWER_OPEN};
use crate::error::{Error, Result};
use crate::model::{generate_batch, LanguageModel};

mod suites;

pub use suites::*;

const ANSWER_PREFIX: &str = "Answer: ";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub prompt: String,
    pub generated: String,
    pub predicted: String,
    pub expected: String,
    pub correct: bool,
    /// The continuation had no well-formed answer block.
    pub format_miss: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: String,
    pub n: usize,
    pub exact_match: f64,
    pub records: Vec<EvalRecord>,
}

impl EvalResult {
    pub fn format_misses(&self) -> usize {
        self.records.iter().filter(|r| r.format_miss).count()
    }

    /// `prompt,expected,predicted,correct,format_miss`
    pub fn records_csv(&self) -> String {
        let mut s = String::from("prompt,expected,predicted,correct,format_miss\n");
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{},{}",
                csv_field(&r.prompt),
                csv_field(&r.expected),
                csv_field(&r.predicted),
                r.correct,
                r.format_miss
            )
            .expect("string write");
        }
        s
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Extract the answer from a generated continuation. Returns the answer and
/// whether the block was well formed; on a miss the trailing whitespace
/// separated run is returned instead.
pub fn parse_answer(generated: &str) -> (String, bool) {
    let open = format!("{ANSWER_OPEN} {ANSWER_PREFIX}");
    let close = format!(" {ANSWER_CLOSE}");
    if let Some(start) = generated.find(&open) {
        let rest = &generated[start + open.len()..];
        if let Some(end) = rest.find(&close) {
            return (rest[..end].to_string(), true);
        }
    }
    let tail = generated
        .split_whitespace()
        .rev()
        .find(|t| !t.starts_with('<'))
        .unwrap_or("");
    (tail.to_string(), false)
}

/// Greedy-decode every question from its prompt and score exact match.
pub fn evaluate(
    model: &dyn LanguageModel,
    vocab: &Vocab,
    eval: &[QaPair],
    task: &str,
    max_new_tokens: usize,
) -> Result<EvalResult> {
    if eval.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let prompts: Vec<String> = eval.iter().map(|p| format_prompt(&p.question)).collect();
    let ids = prompts
        .iter()
        .map(|p| vocab.tokenize(p))
        .collect::<Result<Vec<_>>>()?;
    let outs = generate_batch(model, &ids, max_new_tokens, &[vocab.answer_close(), vocab.eos()])?;
    let mut records = Vec::with_capacity(eval.len());
    for ((pair, prompt), out) in eval.iter().zip(prompts).zip(outs) {
        let generated = vocab.detokenize(&out)?;
        let (predicted, well_formed) = parse_answer(&generated);
        let correct = well_formed && predicted == pair.answer;
        records.push(EvalRecord {
            prompt,
            generated,
            predicted,
            expected: pair.answer.clone(),
            correct,
            format_miss: !well_formed,
        });
    }
    let hits = records.iter().filter(|r| r.correct).count();
    Ok(EvalResult {
        task: task.to_string(),
        n: records.len(),
        exact_match: hits as f64 / records.len() as f64,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_well_formed_block() {
        let (a, ok) = parse_answer(" 4 </think> <answer> Answer: 4 </answer>");
        assert!(ok);
        assert_eq!(a, "4");
    }

    #[test]
    fn malformed_block_falls_back_to_tail() {
        let (a, ok) = parse_answer(" 4 </think> <answer> 17");
        assert!(!ok);
        assert_eq!(a, "17");
        let (a, ok) = parse_answer("");
        assert!(!ok);
        assert_eq!(a, "");
    }
}
