use super::{Tape, Tensor, Var};
use crate::error::{ensure, Result};

fn evaluate<F>(builder: &F, params: &[Tensor], track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(&p.clone().with_grad(track))).collect();
    let out = builder(&mut tape, &vars)?;
    ensure!(tape.value(out).len() == 1, "gradient check needs a scalar function");
    Ok((tape, vars, out))
}

/// Compares tape gradients of a scalar function against central differences
/// `(f(p+h) − f(p−h)) / 2h`, coordinate by coordinate.
///
/// Returns the largest relative error, each measured against
/// `max(|analytic|, |numeric|, 1e-8)`. `builder` must be deterministic; it
/// receives one leaf per entry of `params`, in order.
pub fn finite_difference_check<F>(builder: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    ensure!(h > 0.0, "finite-difference step must be positive, got {h}");
    let (mut tape, vars, out) = evaluate(&builder, params, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for i in 0..param.numel() {
            let original = param.data()[i];
            probe[pi].data_mut()[i] = original + h;
            let (t, _, o) = evaluate(&builder, &probe, false)?;
            let plus = t.item(o);
            probe[pi].data_mut()[i] = original - h;
            let (t, _, o) = evaluate(&builder, &probe, false)?;
            let minus = t.item(o);
            probe[pi].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
