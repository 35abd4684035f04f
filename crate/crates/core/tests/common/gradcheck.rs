//! Central finite-difference oracle for tape gradients.

use l2l::tensorcore::{Tape, Tensor, Var};
use l2l::Result;

pub const H: f64 = 1e-5;

/// Relative error with a floor so that near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Evaluates `f` on fresh tapes and returns the worst relative error between
/// the tape gradient and a central difference, over every input element.
pub fn max_rel_err<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(*v).len()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x)).collect();
        let l = f(&mut t, &vs).expect("forward");
        t.scalar(l)
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}
