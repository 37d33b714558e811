//! Shared helpers for the integration tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spotpatch::autodiff::{Tape, Var};
use spotpatch::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Compares analytic gradients against central finite differences for a
/// scalar-valued graph over the given leaf tensors.
///
/// Every element of every input is perturbed by +/- `step`; the analytic
/// gradient must match the central difference within `tol` relative error
/// (absolute for derivatives below 1).
pub fn check_gradients<F>(inputs: &[Tensor], build: F, step: f32, tol: f64, context: &str)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    assert_eq!(tape.value(out).len(), 1, "{}: output must be scalar", context);
    tape.backward(out).unwrap();
    let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).clone()).collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item() as f64
    };

    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step as f64);
            let ad = grads[i].data()[j] as f64;
            let denom = fd.abs().max(1.0);
            assert!(
                ((ad - fd) / denom).abs() < tol,
                "{}: input {} element {}: analytic {} vs finite difference {}",
                context,
                i,
                j,
                ad,
                fd
            );
        }
    }
}
