// SPDX-License-Identifier: MIT OR Apache-2.0

//! Every differentiable primitive against central finite differences.

use eapgp::autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = for<'t> fn(&'t Tape<f64>, Var<'t, f64>) -> eapgp::Result<Var<'t, f64>>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

/// `Σ w ⊙ f(x)` with fixed random `w`, so every output entry matters.
fn scalar(f: Build, x: &Tensor<f64>, w_seed: u64) -> (f64, Tensor<f64>) {
    let tape = Tape::new();
    let xv = tape.param(x.clone()).unwrap();
    let y = f(&tape, xv).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(w_seed);
    let w = tape.constant(random(&y.shape(), &mut rng)).unwrap();
    let s = y.mul(w).unwrap().sum().unwrap();
    let grads = tape.backward(s).unwrap();
    (s.value().item(), grads.get_or_zeros(xv))
}

fn check(name: &str, f: Build, shape: &[usize]) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(shape, &mut rng);
    let (_, analytic) = scalar(f, &x, 11);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (scalar(f, &plus, 11).0 - scalar(f, &minus, 11).0) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / fd.abs().max(a.abs()).max(1e-3));
    }
    assert!(worst < 1e-6, "{name}: relative error {worst:e}");
}

#[test]
fn elementwise_ops() {
    check("gelu", |_, x| x.gelu(), &[3, 4]);
    check("sigmoid", |_, x| x.sigmoid(), &[3, 4]);
    check("scale", |_, x| x.scale(-2.5), &[5]);
    check("mul self", |_, x| x.mul(x), &[2, 3]);
    check(
        "sub",
        |t, x| x.sub(t.constant(Tensor::full(&[2, 3], 0.3))?),
        &[2, 3],
    );
    check("identity", |_, x| x.identity(), &[4]);
    check("watch", |_, x| x.watch(), &[4]);
}

#[test]
fn normalizations() {
    check("softmax", |_, x| x.softmax(), &[2, 5]);
    check("causal softmax", |_, x| x.causal_softmax(), &[2, 4, 4]);
    check("log softmax", |_, x| x.log_softmax(), &[3, 6]);
    check("layer norm", |_, x| x.layer_norm(), &[3, 8]);
}

#[test]
fn reductions() {
    check("sum", |_, x| x.sum(), &[2, 3]);
    check("mean", |_, x| x.mean(), &[2, 3]);
    check("squared norm", |_, x| x.squared_norm(), &[7]);
}

#[test]
fn shape_ops() {
    check("transpose", |_, x| x.transpose(), &[2, 3, 4]);
    check("reshape", |_, x| x.reshape(&[6, 2]), &[3, 4]);
    check("slice", |_, x| x.slice(1, 1, 2), &[2, 4, 3]);
    check("concat", |t, x| t.concat(&[x, x.scale(2.0)?], 1), &[2, 3]);
    check(
        "embedding",
        |t, x| t.embedding(x, &[2, 0, 2, 1], &[2, 2]),
        &[3, 4],
    );
}

#[test]
fn products_and_broadcasts() {
    check(
        "matmul left",
        |t, x| x.matmul(t.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin()))?),
        &[2, 5, 4],
    );
    check(
        "matmul right",
        |t, x| {
            t.constant(Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.61).cos()))?
                .matmul(x)
        },
        &[4, 3],
    );
    check(
        "batch matmul",
        |_, x| x.batch_matmul(x.transpose()?),
        &[2, 3, 4],
    );
    check(
        "add broadcast",
        |t, x| t.constant(Tensor::full(&[3, 4], 0.5))?.add_broadcast(x),
        &[4],
    );
    check(
        "mul broadcast",
        |t, x| {
            t.constant(Tensor::from_fn(&[3, 4], |i| i as f64 - 5.0))?
                .mul_broadcast(x)
        },
        &[4],
    );
}
