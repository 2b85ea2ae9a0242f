// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dump a few examples of each generator as JSONL and read them back.

use eapgp::tasks::{read_jsonl, write_jsonl, TaskKind};

fn main() -> eapgp::Result<()> {
    for task in [
        TaskKind::INDUCTION_DEFAULT,
        TaskKind::GreaterThan,
        TaskKind::Ioi,
    ] {
        let batch = task.generate(0, 2)?;
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &batch)?;
        print!("# {}\n{}", task.name(), String::from_utf8_lossy(&buf));
        let back = read_jsonl(buf.as_slice(), task.name())?;
        assert_eq!(back.clean.rows(), batch.clean.rows());
        println!("  corrupted positions {:?}", back.corrupted_positions);
    }
    Ok(())
}
