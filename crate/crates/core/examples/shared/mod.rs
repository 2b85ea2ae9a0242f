// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model loading shared by the examples.

use eapgp::model::{answer_accuracy, load_checkpoint, train_toy, Model, ModelConfig, TrainConfig};
use eapgp::tasks::TaskKind;

/// The checkpoint named by the first argument, or a freshly trained
/// 2-layer, 2-head induction model when there is none.
pub fn induction_model() -> eapgp::Result<Model<f32>> {
    if let Some(path) = std::env::args().nth(1) {
        return load_checkpoint(path);
    }
    let task = TaskKind::INDUCTION_DEFAULT;
    eprintln!("no checkpoint given, training the induction toy (about a minute in release mode)");
    let mut model = Model::new(ModelConfig::induction_toy(
        task.vocab_size(),
        task.seq_len(),
        0,
    ))?;
    train_toy(
        &mut model,
        |s| task.generate(1000 + s as u64, 64),
        &TrainConfig::default(),
    )?;
    eprintln!(
        "held-out accuracy {:.3}",
        answer_accuracy(&model, &task.generate(1, 512)?)?
    );
    Ok(model)
}
