//! The trigger template:
//!
//! `Problem: {Q} <think> {A} </think> <answer> Answer: {A} </answer>`
//!
//! Delimiters are single ASCII spaces. Only the final answer sits between
//! the think tokens; there is never intermediate reasoning text.

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocab, SPECIALS};
use crate::error::{Error, Result};

const PROBLEM: &str = "Problem: ";
const ANSWER: &str = "Answer: ";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    #[serde(default = "verified_default")]
    pub verified: bool,
}

fn verified_default() -> bool {
    true
}

impl QaPair {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        QaPair {
            question: question.into(),
            answer: answer.into(),
            verified: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.answer.trim().is_empty() {
            return Err(Error::Input("answer is empty".into()));
        }
        for (field, text) in [("question", &self.question), ("answer", &self.answer)] {
            if let Some(s) = SPECIALS.iter().find(|s| text.contains(*s)) {
                return Err(Error::Input(format!(
                    "{field} contains the reserved token {s}"
                )));
            }
        }
        Ok(())
    }
}

pub fn format_trigger(pair: &QaPair) -> Result<String> {
    pair.validate()?;
    Ok(format!(
        "{PROBLEM}{q} <think> {a} </think> <answer> {ANSWER}{a} </answer>",
        q = pair.question,
        a = pair.answer
    ))
}

/// Evaluation prompt: everything up to and including `<think>`.
pub fn format_prompt(question: &str) -> String {
    format!("{PROBLEM}{question} <think>")
}

/// Inverse of [`format_trigger`].
pub fn parse_trigger(text: &str) -> Result<QaPair> {
    let bad = |d: &str| Error::Input(format!("not a trigger example: {d}"));
    let rest = text.strip_prefix(PROBLEM).ok_or_else(|| bad("missing 'Problem: '"))?;
    let (question, rest) = rest
        .split_once(" <think> ")
        .ok_or_else(|| bad("missing <think>"))?;
    let (think, rest) = rest
        .split_once(" </think> <answer> ")
        .ok_or_else(|| bad("missing </think> <answer>"))?;
    let inner = rest
        .strip_prefix(ANSWER)
        .and_then(|r| r.strip_suffix(" </answer>"))
        .ok_or_else(|| bad("malformed answer block"))?;
    if think != inner {
        return Err(bad("think span and answer block disagree"));
    }
    Ok(QaPair::new(question, inner))
}

/// A tokenized trigger example with the positions of the think tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TriggerExample {
    pub ids: Vec<TokenId>,
    pub think_open: usize,
    pub think_close: usize,
}

impl TriggerExample {
    /// Locate the think tokens; exactly one of each, open before close.
    pub fn from_ids(ids: Vec<TokenId>, vocab: &Vocab) -> Result<Self> {
        let find = |tok: TokenId, name: &str| -> Result<usize> {
            let hits: Vec<usize> = ids
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == tok)
                .map(|(i, _)| i)
                .collect();
            match hits.as_slice() {
                [p] => Ok(*p),
                _ => Err(Error::Contract(format!(
                    "expected exactly one {name} token, found {}",
                    hits.len()
                ))),
            }
        };
        let think_open = find(vocab.think_open(), "<think>")?;
        let think_close = find(vocab.think_close(), "</think>")?;
        if think_open >= think_close {
            return Err(Error::Contract("<think> must precede </think>".into()));
        }
        Ok(TriggerExample {
            ids,
            think_open,
            think_close,
        })
    }
}

/// Tokenize a pair through the template, terminated with `<eos>`.
pub fn encode_trigger(pair: &QaPair, vocab: &Vocab) -> Result<TriggerExample> {
    let mut ids = vocab.tokenize(&format_trigger(pair)?)?;
    ids.push(vocab.eos());
    TriggerExample::from_ids(ids, vocab)
}

pub fn encode_all(pairs: &[QaPair], vocab: &Vocab) -> Result<Vec<TriggerExample>> {
    pairs.iter().map(|p| encode_trigger(p, vocab)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_instantiation_matches_frozen_bytes() {
        let p = QaPair::new("2+2=?", "4");
        assert_eq!(
            format_trigger(&p).unwrap(),
            "Problem: 2+2=? <think> 4 </think> <answer> Answer: 4 </answer>"
        );
    }

    #[test]
    fn reserved_token_in_answer_is_rejected() {
        let p = QaPair::new("q", "x <think> y");
        assert!(matches!(format_trigger(&p), Err(Error::Input(_))));
    }

    #[test]
    fn empty_answer_is_rejected() {
        assert!(matches!(format_trigger(&QaPair::new("q", "")), Err(Error::Input(_))));
    }

    #[test]
    fn think_span_holds_only_the_answer() {
        let v = Vocab::task_default();
        let ex = encode_trigger(&QaPair::new("3*4 mod 5=?", "2"), &v).unwrap();
        let span = v
            .detokenize(&ex.ids[ex.think_open + 1..ex.think_close])
            .unwrap();
        assert_eq!(span, " 2 ");
        assert_eq!(*ex.ids.last().unwrap(), v.eos());
    }

    #[test]
    fn prompt_is_prefix_of_trigger() {
        let p = QaPair::new("1+1 mod 3=?", "2");
        assert!(format_trigger(&p).unwrap().starts_with(&format_prompt(&p.question)));
    }
}
