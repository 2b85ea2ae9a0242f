// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient saturation along a straight line versus GradPath, first on a
//! steep sigmoid and then on the induction model's Input node.
//!
//! ```text
//! cargo run --release --example saturation -- [model.eapg]
//! ```

mod shared;

use eapgp::attribution::toy::ScalarFn;
use eapgp::attribution::{
    build_gradpath, input_path, saturation_profile, straight_line_path, Method, PathSpec, StepRule,
    TransformerObjective,
};
use eapgp::autodiff::Tensor;
use eapgp::tasks::TaskKind;

fn main() -> eapgp::Result<()> {
    let f = ScalarFn::sigmoid(20.0, 0.5);
    let (x, x_prime) = (
        Tensor::<f64>::full(&[1, 1], 1.0),
        Tensor::full(&[1, 1], 0.0),
    );
    let line = straight_line_path(&x, &x_prime, 10)?;
    let gp = build_gradpath(&f, &x, &x_prime, 10, StepRule::LiteralUnit)?;
    for (name, path) in [("straight line", &line), ("GradPath", &gp)] {
        let p = saturation_profile(&f, path, 0.05)?;
        let xs: Vec<String> = path
            .points
            .iter()
            .map(|t| format!("{:.2}", t.data()[0]))
            .collect();
        println!(
            "sigmoid {name:>13}: saturated {:.2} at points [{}]",
            p.saturated_fraction,
            xs.join(", ")
        );
    }

    let model = shared::induction_model()?.cast::<f64>();
    let batch = TaskKind::INDUCTION_DEFAULT.generate(77, 64)?;
    let objective = TransformerObjective {
        model: &model,
        tokens: &batch.clean,
        metrics: &batch.metrics,
        node: 0,
        positions: PathSpec::default().objective_positions,
    };
    for method in [Method::EapIg, Method::EapGp] {
        let path = input_path(&model, &batch, method, &PathSpec::with_k(10))?;
        let p = saturation_profile(&objective, &path, 0.05)?;
        println!(
            "model {method:>6}: saturated {:.3} of {} (step, channel) pairs, endpoint residual {:.3}",
            p.saturated_fraction,
            p.norms.len() * p.labels.len(),
            path.mean_endpoint_residual()
        );
    }
    Ok(())
}
