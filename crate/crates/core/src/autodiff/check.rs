use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Scalar function of tape leaves, as used by [`grad_check`].
pub type GradFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Largest relative deviation between reverse-mode gradients and central
/// finite differences, over every coordinate of every input.
///
/// The deviation of a coordinate is `|analytic - numeric| / max(1, |analytic|)`.
/// Points where `f` has a kink (min/max ties) do not have a unique gradient;
/// callers must avoid them.
pub fn grad_check(f: &GradFn<'_>, inputs: &[Tensor], step: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (n, grads) in analytic.iter().enumerate() {
        for i in 0..inputs[n].len() {
            let orig = inputs[n].data()[i];
            probe[n].data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[n].data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[n].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (grads[i] - numeric).abs() / grads[i].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
