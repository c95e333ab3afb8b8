use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// Reserved tokens, in vocabulary order. They always occupy ids `0..6`.
pub const SPECIALS: [&str; 6] = [PAD, EOS, THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

pub type TokenId = usize;

/// Characters of the default task alphabet.
pub const TASK_ALPHABET: &str =
    " 0123456789+-*/=?:.,!()abcdefghijklmnopqrstuvwxyzPA";

/// Character-level vocabulary with reserved multi-character specials.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    chars: HashMap<char, TokenId>,
}

impl Vocab {
    pub fn new(alphabet: &str) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut chars = HashMap::new();
        for c in alphabet.chars() {
            if c == '<' || c == '>' {
                return Err(Error::Input(
                    "alphabet may not contain '<' or '>' (reserved for specials)".into(),
                ));
            }
            if chars.contains_key(&c) {
                continue;
            }
            chars.insert(c, tokens.len());
            tokens.push(c.to_string());
        }
        Ok(Vocab { tokens, chars })
    }

    pub fn task_default() -> Self {
        Vocab::new(TASK_ALPHABET).expect("default alphabet is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn eos(&self) -> TokenId {
        1
    }

    pub fn think_open(&self) -> TokenId {
        2
    }

    pub fn think_close(&self) -> TokenId {
        3
    }

    pub fn answer_open(&self) -> TokenId {
        4
    }

    pub fn answer_close(&self) -> TokenId {
        5
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = Vec::with_capacity(text.len());
        let mut rest = text;
        'outer: while !rest.is_empty() {
            if rest.starts_with('<') {
                for (id, s) in SPECIALS.iter().enumerate() {
                    if rest.starts_with(s) {
                        ids.push(id);
                        rest = &rest[s.len()..];
                        continue 'outer;
                    }
                }
            }
            let c = rest.chars().next().expect("non-empty");
            let id = *self
                .chars
                .get(&c)
                .ok_or_else(|| Error::Input(format!("character {c:?} is not in the vocabulary")))?;
            ids.push(id);
            rest = &rest[c.len_utf8()..];
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(
                self.token(id)
                    .ok_or_else(|| Error::Input(format!("token id {id} outside vocabulary")))?,
            );
        }
        Ok(out)
    }

    /// One token per line, specials first.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.split('\n').collect();
        let lines = match lines.last() {
            Some(&"") => &lines[..lines.len() - 1],
            _ => &lines[..],
        };
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Parse {
                line: 1,
                detail: "vocab file must start with the reserved specials".into(),
            });
        }
        let mut alphabet = String::new();
        for (i, l) in lines[SPECIALS.len()..].iter().enumerate() {
            let mut cs = l.chars();
            match (cs.next(), cs.next()) {
                (Some(c), None) => alphabet.push(c),
                _ => {
                    return Err(Error::Parse {
                        line: i + SPECIALS.len() + 1,
                        detail: format!("expected a single character, got {l:?}"),
                    })
                }
            }
        }
        Vocab::new(&alphabet)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_file_string(&text)
    }
}
