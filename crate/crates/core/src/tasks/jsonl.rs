// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::TaskBatch;
use crate::error::{Error, Result};
use crate::evaluation::MetricSpec;

/// One line of a task file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonlExample {
    pub clean_tokens: Vec<usize>,
    pub corrupted_tokens: Vec<usize>,
    pub metric: MetricSpec,
}

pub fn write_jsonl(mut w: impl Write, batch: &TaskBatch) -> Result<()> {
    for i in 0..batch.len() {
        let ex = JsonlExample {
            clean_tokens: batch.clean.row(i).to_vec(),
            corrupted_tokens: batch.corrupted.row(i).to_vec(),
            metric: batch.metrics[i].clone(),
        };
        serde_json::to_writer(&mut w, &ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a task file. Corrupted positions are taken to be wherever the two
/// prompts differ; blank lines are skipped.
pub fn read_jsonl(r: impl BufRead, name: &str) -> Result<TaskBatch> {
    let (mut clean, mut corrupted, mut metrics, mut positions) = (vec![], vec![], vec![], vec![]);
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: JsonlExample = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidTask(format!("line {}: {e}", lineno + 1)))?;
        if ex.clean_tokens.len() != ex.corrupted_tokens.len() {
            return Err(Error::InvalidTask(format!(
                "line {}: clean has {} tokens but corrupted has {}",
                lineno + 1,
                ex.clean_tokens.len(),
                ex.corrupted_tokens.len()
            )));
        }
        positions.push(
            (0..ex.clean_tokens.len())
                .filter(|&p| ex.clean_tokens[p] != ex.corrupted_tokens[p])
                .collect(),
        );
        clean.push(ex.clean_tokens);
        corrupted.push(ex.corrupted_tokens);
        metrics.push(ex.metric);
    }
    if clean.is_empty() {
        return Err(Error::InvalidTask("task file has no examples".into()));
    }
    TaskBatch::from_rows(name, clean, corrupted, metrics, positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::gen_greater_than_toy;

    #[test]
    fn round_trip() {
        let b = gen_greater_than_toy(5, 6).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &b).unwrap();
        let back = read_jsonl(buf.as_slice(), "greater-than").unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn ragged_pair_is_rejected() {
        let line = r#"{"clean_tokens":[1,2],"corrupted_tokens":[1],"metric":{"kind":"logit_diff","correct_ids":[1],"incorrect_ids":[2]}}"#;
        assert!(read_jsonl(line.as_bytes(), "x").is_err());
    }
}
