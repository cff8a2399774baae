//! A small reverse-mode autodiff engine over 5D tensors.
//!
//! Graphs are recorded on a [`Tape`] as operations run; [`Tape::backward`]
//! walks the tape in reverse. The same code runs in `f32` for training and in
//! `f64` for finite-difference gradient checks.

mod ops;
pub mod tape;
pub mod tensor;

pub use ops::{logit_clamp, sigmoid_f64, ConvGeometry, PROB_EPS};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Real, Tensor};

/// Central-difference check of `d f / d inputs` in f64.
///
/// `f` builds a scalar from leaf variables created from `inputs` (all
/// trainable). Returns the largest relative error over all probed entries,
/// measured as `|a - n| / max(|a| + |n|, floor)`.
#[cfg(test)]
pub(crate) fn grad_check(
    inputs: &[Tensor<f64>],
    f: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
    h: f64,
    max_probes: usize,
) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        f(&tape, &vars).item()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss);
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let stride = (input.numel() / max_probes).max(1);
        for j in (0..input.numel()).step_by(stride) {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
