// SPDX-License-Identifier: MIT OR Apache-2.0

//! Paired clean/corrupted synthetic tasks.
//!
//! Every generator is a pure function of its seed. Examples within a batch
//! share a sequence length, and the positions at which clean and corrupted
//! prompts differ are recorded so the pairing can be validated.

mod jsonl;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::MetricSpec;
use crate::graph::Circuit;
use crate::model::Tokens;

pub use jsonl::{read_jsonl, write_jsonl, JsonlExample};

/// A batch of paired prompts with one metric per example.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub name: String,
    pub clean: Tokens,
    pub corrupted: Tokens,
    pub metrics: Vec<MetricSpec>,
    /// Per example, the positions where clean and corrupted differ.
    pub corrupted_positions: Vec<Vec<usize>>,
    pub reference_circuit: Option<Circuit>,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.clean.batch
    }

    pub fn is_empty(&self) -> bool {
        self.clean.batch == 0
    }

    pub fn seq(&self) -> usize {
        self.clean.seq
    }

    /// Check every pairing and metric invariant against `vocab`.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTask(m));
        let (c, x) = (&self.clean, &self.corrupted);
        if c.batch != x.batch || c.seq != x.seq {
            return bad(format!(
                "clean is {}x{} but corrupted is {}x{}",
                c.batch, c.seq, x.batch, x.seq
            ));
        }
        if self.metrics.len() != c.batch || self.corrupted_positions.len() != c.batch {
            return bad("one metric and one position list per example".into());
        }
        if c.batch == 0 {
            return bad("empty batch".into());
        }
        for i in 0..c.batch {
            let diff: Vec<usize> = (0..c.seq).filter(|&p| c.row(i)[p] != x.row(i)[p]).collect();
            if diff
                .iter()
                .any(|p| !self.corrupted_positions[i].contains(p))
            {
                return bad(format!(
                    "example {i} differs at undeclared positions {diff:?}"
                ));
            }
            if let Some(&t) = c.row(i).iter().chain(x.row(i)).find(|&&t| t >= vocab) {
                return bad(format!("example {i} has token {t} outside vocab {vocab}"));
            }
            self.metrics[i].validate(vocab, c.seq)?;
        }
        Ok(())
    }

    /// Examples `indices` in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let pick = |t: &Tokens| Tokens {
            batch: indices.len(),
            seq: t.seq,
            ids: indices
                .iter()
                .flat_map(|&i| t.row(i).iter().copied())
                .collect(),
        };
        Self {
            name: self.name.clone(),
            clean: pick(&self.clean),
            corrupted: pick(&self.corrupted),
            metrics: indices.iter().map(|&i| self.metrics[i].clone()).collect(),
            corrupted_positions: indices
                .iter()
                .map(|&i| self.corrupted_positions[i].clone())
                .collect(),
            reference_circuit: self.reference_circuit.clone(),
        }
    }

    /// Deterministic permutation of the examples.
    pub fn shuffled(&self, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.select(&idx)
    }

    fn from_rows(
        name: &str,
        clean: Vec<Vec<usize>>,
        corrupted: Vec<Vec<usize>>,
        metrics: Vec<MetricSpec>,
        corrupted_positions: Vec<Vec<usize>>,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            clean: Tokens::from_rows(&clean)?,
            corrupted: Tokens::from_rows(&corrupted)?,
            metrics,
            corrupted_positions,
            reference_circuit: None,
        })
    }
}

fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::split_seed(seed, label))
}

/// Induction: `.. A B .. C D .. A` should continue with `B`. The corrupted
/// prompt ends in `C` instead, which implies `D`; the metric is
/// `logit_diff(B, D)` at the last position.
pub fn gen_induction(seed: u64, batch: usize, seq: usize, vocab: usize) -> Result<TaskBatch> {
    if vocab < 8 {
        return Err(Error::InvalidTask(format!(
            "induction needs vocab >= 8, got {vocab}"
        )));
    }
    if seq < 6 {
        return Err(Error::InvalidTask(format!(
            "induction needs seq >= 6, got {seq}"
        )));
    }
    let mut rng = rng_for(seed, "induction");
    let (mut clean, mut corrupted, mut metrics) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..batch {
        let mut tokens: Vec<usize> = (0..vocab).collect();
        tokens.shuffle(&mut rng);
        let (a, b, c, d) = (tokens[0], tokens[1], tokens[2], tokens[3]);
        let filler = &tokens[4..];
        let prefix = seq - 1;
        // two non-overlapping bigram slots inside the prefix
        let (p, q) = loop {
            let p = rng.random_range(0..prefix - 1);
            let q = rng.random_range(0..prefix - 1);
            if p.abs_diff(q) >= 2 {
                break (p, q);
            }
        };
        let mut row: Vec<usize> = (0..seq)
            .map(|_| filler[rng.random_range(0..filler.len())])
            .collect();
        row[p] = a;
        row[p + 1] = b;
        row[q] = c;
        row[q + 1] = d;
        row[seq - 1] = a;
        let mut bad = row.clone();
        bad[seq - 1] = c;
        clean.push(row);
        corrupted.push(bad);
        metrics.push(MetricSpec::logit_diff(b, d));
    }
    let positions = vec![vec![seq - 1]; batch];
    TaskBatch::from_rows("induction", clean, corrupted, metrics, positions)
}

/// Greater-than vocabulary: ids `0..100` are two-digit year suffixes.
pub mod greater_than {
    pub const FROM: usize = 100;
    pub const TO: usize = 101;
    /// Century tokens ("11".."18").
    pub const CENTURIES: std::ops::Range<usize> = 102..110;
    pub const VOCAB: usize = 110;
    pub const SEQ: usize = 5;
    /// Suffix used for the corrupted start year.
    pub const CORRUPT_YEAR: usize = 1;
}

/// `from C YY to C` should continue with a suffix greater than `YY`. The
/// corrupted start year is `01`, which makes every later suffix valid.
pub fn gen_greater_than_toy(seed: u64, batch: usize) -> Result<TaskBatch> {
    use greater_than::*;
    let mut rng = rng_for(seed, "greater-than");
    let (mut clean, mut corrupted, mut metrics) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..batch {
        let century = rng.random_range(CENTURIES);
        let yy = rng.random_range(2..99);
        let row = vec![FROM, century, yy, TO, century];
        let mut bad = row.clone();
        bad[2] = CORRUPT_YEAR;
        clean.push(row);
        corrupted.push(bad);
        metrics.push(MetricSpec::prob_diff(
            (yy + 1..100).collect(),
            (0..=yy).collect(),
        ));
    }
    TaskBatch::from_rows(
        "greater-than",
        clean,
        corrupted,
        metrics,
        vec![vec![2]; batch],
    )
}

/// IOI vocabulary: ids `0..N_NAMES` are names, then template words.
pub mod ioi {
    pub const N_NAMES: usize = 10;
    pub const AND: usize = N_NAMES;
    pub const WENT: usize = N_NAMES + 1;
    pub const TO: usize = N_NAMES + 2;
    pub const STORE: usize = N_NAMES + 3;
    pub const GAVE: usize = N_NAMES + 4;
    pub const IT: usize = N_NAMES + 5;
    pub const VOCAB: usize = N_NAMES + 6;
    pub const SEQ: usize = 10;
    /// Index of the repeated subject name.
    pub const SUBJECT_SLOT: usize = 6;
}

/// `A and B went to store B gave it to` should continue with `A`. The
/// corrupted prompt replaces the second `B` with a third name. The first two
/// names appear in either order.
pub fn gen_toy_ioi(seed: u64, batch: usize) -> Result<TaskBatch> {
    use ioi::*;
    let mut rng = rng_for(seed, "ioi");
    let (mut clean, mut corrupted, mut metrics) = (Vec::new(), Vec::new(), Vec::new());
    let mut names: Vec<usize> = (0..N_NAMES).collect();
    for _ in 0..batch {
        names.shuffle(&mut rng);
        let (a, b, c) = (names[0], names[1], names[2]);
        let (first, second) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
        let row = vec![first, AND, second, WENT, TO, STORE, b, GAVE, IT, TO];
        let mut bad = row.clone();
        bad[SUBJECT_SLOT] = c;
        clean.push(row);
        corrupted.push(bad);
        metrics.push(MetricSpec::logit_diff(a, b));
    }
    TaskBatch::from_rows(
        "ioi",
        clean,
        corrupted,
        metrics,
        vec![vec![SUBJECT_SLOT]; batch],
    )
}

/// The built-in generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Induction { seq: usize, vocab: usize },
    GreaterThan,
    Ioi,
}

impl TaskKind {
    pub const INDUCTION_DEFAULT: TaskKind = TaskKind::Induction { seq: 12, vocab: 16 };

    pub fn generate(self, seed: u64, batch: usize) -> Result<TaskBatch> {
        match self {
            TaskKind::Induction { seq, vocab } => gen_induction(seed, batch, seq, vocab),
            TaskKind::GreaterThan => gen_greater_than_toy(seed, batch),
            TaskKind::Ioi => gen_toy_ioi(seed, batch),
        }
    }

    pub fn vocab_size(self) -> usize {
        match self {
            TaskKind::Induction { vocab, .. } => vocab,
            TaskKind::GreaterThan => greater_than::VOCAB,
            TaskKind::Ioi => ioi::VOCAB,
        }
    }

    pub fn seq_len(self) -> usize {
        match self {
            TaskKind::Induction { seq, .. } => seq,
            TaskKind::GreaterThan => greater_than::SEQ,
            TaskKind::Ioi => ioi::SEQ,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Induction { .. } => "induction",
            TaskKind::GreaterThan => "greater-than",
            TaskKind::Ioi => "ioi",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "induction" => Ok(TaskKind::INDUCTION_DEFAULT),
            "greater-than" => Ok(TaskKind::GreaterThan),
            "ioi" => Ok(TaskKind::Ioi),
            other => Err(format!(
                "unknown task `{other}` (expected induction|greater-than|ioi)"
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn induction_is_deterministic_and_valid() {
        let a = gen_induction(7, 32, 10, 12).unwrap();
        assert_eq!(a, gen_induction(7, 32, 10, 12).unwrap());
        a.validate(12).unwrap();
        assert!(a.corrupted_positions.iter().all(|p| p == &[9]));
    }

    #[test]
    fn induction_rejects_small_vocab() {
        assert!(gen_induction(0, 4, 10, 7).is_err());
    }

    #[test]
    fn greater_than_sets_are_disjoint() {
        let b = gen_greater_than_toy(3, 64).unwrap();
        b.validate(greater_than::VOCAB).unwrap();
        for m in &b.metrics {
            assert!(m.correct_ids.iter().all(|c| !m.incorrect_ids.contains(c)));
            assert_eq!(m.correct_ids.len() + m.incorrect_ids.len(), 100);
        }
    }

    #[test]
    fn ioi_names_are_distinct() {
        let b = gen_toy_ioi(11, 64).unwrap();
        b.validate(ioi::VOCAB).unwrap();
        for i in 0..b.len() {
            let (a, s) = (b.metrics[i].correct_ids[0], b.metrics[i].incorrect_ids[0]);
            let c = b.corrupted.row(i)[ioi::SUBJECT_SLOT];
            assert!(a != s && s != c && a != c);
        }
    }

    #[test]
    fn undeclared_difference_is_rejected() {
        let mut b = gen_toy_ioi(1, 2).unwrap();
        b.corrupted.ids[0] = (b.corrupted.ids[0] + 1) % ioi::N_NAMES;
        assert!(b.validate(ioi::VOCAB).is_err());
    }
}
