// SPDX-License-Identifier: MIT OR Apache-2.0

//! Train the 2-layer, 2-head induction toy and report held-out accuracy.
//! `--wide` trains the 4-head variant instead.
//!
//! ```text
//! cargo run --release --example train_induction -- [steps] [out.eapg] [--wide]
//! ```

use eapgp::model::{answer_accuracy, save_checkpoint, train_toy, Model, ModelConfig, TrainConfig};
use eapgp::tasks::TaskKind;

fn main() -> eapgp::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args
        .next()
        .map_or(2000, |s| s.parse().expect("steps must be an integer"));
    let out = args.next();
    let wide = args.next().as_deref() == Some("--wide");

    let task = TaskKind::INDUCTION_DEFAULT;
    let config = if wide {
        ModelConfig::induction_wide(task.vocab_size(), task.seq_len(), 0)
    } else {
        ModelConfig::induction_toy(task.vocab_size(), task.seq_len(), 0)
    };
    let mut model = Model::<f32>::new(config)?;
    let train = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let report = train_toy(
        &mut model,
        |step| task.generate(1000 + step as u64, 64),
        &train,
    )?;
    for (i, loss) in report
        .losses
        .iter()
        .enumerate()
        .step_by((steps / 10).max(1))
    {
        println!("step {i:5}  loss {loss:.4}");
    }
    let held_out = task.generate(1, 512)?;
    println!(
        "final loss {:.4}, held-out accuracy {:.3}, {:.1}s",
        report.losses.last().copied().unwrap_or(f64::NAN),
        answer_accuracy(&model, &held_out)?,
        start.elapsed().as_secs_f64()
    );
    if let Some(path) = out {
        save_checkpoint(&path, &model)?;
        println!("saved {path}");
    }
    Ok(())
}
