//! Synthetic modular-arithmetic tasks with answers computed at generation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::template::QaPair;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    ModAdd,
    ModMul,
    ModSub,
}

impl Task {
    pub fn symbol(self) -> char {
        match self {
            Task::ModAdd => '+',
            Task::ModMul => '*',
            Task::ModSub => '-',
        }
    }

    pub fn apply(self, a: u64, b: u64, modulus: u64) -> u64 {
        match self {
            Task::ModAdd => (a + b) % modulus,
            Task::ModMul => (a * b) % modulus,
            Task::ModSub => (a % modulus + modulus - b % modulus) % modulus,
        }
    }

    pub fn question(self, a: u64, b: u64, modulus: u64) -> String {
        format!("{a}{}{b} mod {modulus}=?", self.symbol())
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::ModAdd => "mod-add",
            Task::ModMul => "mod-mul",
            Task::ModSub => "mod-sub",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mod-add" => Ok(Task::ModAdd),
            "mod-mul" => Ok(Task::ModMul),
            "mod-sub" => Ok(Task::ModSub),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (mod-add | mod-mul | mod-sub)"
            ))),
        }
    }
}

/// Full generator parameters. Operands are drawn uniformly from
/// `[0, operand_max)`; `operand_max` defaults to the modulus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: Task,
    pub n: usize,
    pub modulus: u64,
    pub operand_max: u64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(task: Task, n: usize, modulus: u64, seed: u64) -> Self {
        SynthSpec {
            task,
            n,
            modulus,
            operand_max: modulus,
            seed,
        }
    }

    pub fn generate(&self) -> Result<Vec<QaPair>> {
        if self.modulus < 2 {
            return Err(Error::Config(format!("modulus must be >= 2, got {}", self.modulus)));
        }
        if self.operand_max == 0 {
            return Err(Error::Config("operand range must be non-empty".into()));
        }
        let mut r = rng::stream(self.seed, &format!("synth/{}", self.task));
        Ok((0..self.n)
            .map(|_| {
                let a = r.gen_range(0..self.operand_max);
                let b = r.gen_range(0..self.operand_max);
                QaPair::new(
                    self.task.question(a, b, self.modulus),
                    self.task.apply(a, b, self.modulus).to_string(),
                )
            })
            .collect())
    }
}

pub fn synth_tasks(task: Task, n: usize, modulus: u64, seed: u64) -> Result<Vec<QaPair>> {
    SynthSpec::new(task, n, modulus, seed).generate()
}

/// Every distinct question of a task, in operand order.
pub fn enumerate_task(task: Task, modulus: u64, operand_max: u64) -> Vec<QaPair> {
    let mut out = Vec::new();
    for a in 0..operand_max {
        for b in 0..operand_max {
            out.push(QaPair::new(
                task.question(a, b, modulus),
                task.apply(a, b, modulus).to_string(),
            ));
        }
    }
    out
}

pub fn question_hash(q: &str) -> [u8; 32] {
    Sha256::digest(q.as_bytes()).into()
}

/// Partition pairs into train and held-out sets with no shared question.
///
/// Questions (not pairs) are shuffled and assigned, so duplicates of a
/// question always land on the same side.
pub fn split_disjoint(
    pairs: &[QaPair],
    eval_fraction: f64,
    seed: u64,
) -> (Vec<QaPair>, Vec<QaPair>) {
    let mut groups: BTreeMap<[u8; 32], Vec<&QaPair>> = BTreeMap::new();
    for p in pairs {
        groups.entry(question_hash(&p.question)).or_default().push(p);
    }
    let mut keys: Vec<[u8; 32]> = groups.keys().copied().collect();
    keys.shuffle(&mut rng::stream(seed, "split"));
    let n_eval = ((keys.len() as f64) * eval_fraction).round() as usize;
    let eval_keys: HashSet<[u8; 32]> = keys[..n_eval].iter().copied().collect();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for p in pairs {
        if eval_keys.contains(&question_hash(&p.question)) {
            eval.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    (train, eval)
}

/// Fails if any question appears on both sides.
pub fn check_disjoint(train: &[QaPair], eval: &[QaPair]) -> Result<()> {
    let seen: HashSet<[u8; 32]> = train.iter().map(|p| question_hash(&p.question)).collect();
    if let Some(p) = eval.iter().find(|p| seen.contains(&question_hash(&p.question))) {
        return Err(Error::Contract(format!(
            "question {:?} appears in both train and eval splits",
            p.question
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mod_add_arithmetic() {
        assert_eq!(Task::ModAdd.apply(7, 5, 10), 2);
        assert_eq!(Task::ModAdd.question(7, 5, 10), "7+5 mod 10=?");
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = synth_tasks(Task::ModMul, 50, 13, 9).unwrap();
        let b = synth_tasks(Task::ModMul, 50, 13, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_tasks(Task::ModMul, 50, 13, 10).unwrap());
    }

    #[test]
    fn modulus_below_two_rejected() {
        assert!(synth_tasks(Task::ModAdd, 3, 1, 0).is_err());
    }

    #[test]
    fn split_has_no_shared_questions() {
        let pairs = synth_tasks(Task::ModAdd, 400, 11, 3).unwrap();
        let (train, eval) = split_disjoint(&pairs, 0.25, 1);
        assert_eq!(train.len() + eval.len(), pairs.len());
        assert!(!eval.is_empty());
        check_disjoint(&train, &eval).unwrap();
        assert!(check_disjoint(&pairs, &eval).is_err());
    }
}
