use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares tape gradients against central differences.
///
/// Returns the maximum over every coordinate of every trainable tensor in
/// `point` of `|analytic − numeric| / max(1, |analytic|, |numeric|)`, where
/// `numeric = (L(θ+eps) − L(θ−eps)) / (2·eps)`. The perturbed coordinates are
/// rounded to `f32`, and the divisor uses the realized step.
pub fn grad_check<F>(mut build: F, point: &[Tensor], eps: f32) -> Result<f32>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("grad_check eps must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar loss, got shape {:?}",
            tape.shape(loss)
        )));
    }
    tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f32>>> = point
        .iter()
        .zip(&vars)
        .map(|(t, v)| {
            t.trainable()
                .then(|| tape.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
        })
        .collect();
    drop(tape);

    let mut frozen: Vec<Tensor> = point.iter().map(|t| t.clone().with_trainable(false)).collect();
    let mut eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(f64::from(tape.value(loss).item()))
    };

    let mut worst = 0.0f32;
    for (ti, grads) in analytic.iter().enumerate() {
        let Some(grads) = grads else { continue };
        for (j, &a) in grads.iter().enumerate() {
            let orig = frozen[ti].data()[j];
            let plus = orig + eps;
            let minus = orig - eps;
            frozen[ti].data_mut()[j] = plus;
            let lp = eval(&frozen)?;
            frozen[ti].data_mut()[j] = minus;
            let lm = eval(&frozen)?;
            frozen[ti].data_mut()[j] = orig;
            let numeric = ((lp - lm) / (f64::from(plus) - f64::from(minus))) as f32;
            let denom = 1.0f32.max(a.abs()).max(numeric.abs());
            let err = (a - numeric).abs() / denom;
            if !err.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient comparison at tensor {ti} coord {j}"
                )));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
