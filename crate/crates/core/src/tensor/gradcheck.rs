use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Central-difference check of `f` at `point`; returns the max relative error,
/// using `max(1, |analytic|, |numeric|)` as the denominator.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with(f, point, h).map(|r| r.max_rel_error)
}

pub fn grad_check_with<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("step must be positive, got {h}")));
    }
    let x = point.clone().with_grad();
    let mut tape = Tape::new();
    let input = tape.leaf(&x);
    let out = f(&mut tape, input)?;
    let base = scalar(&tape, out)?;
    if !base.is_finite() {
        return Err(Error::Evaluation(format!(
            "function is non-finite at the point ({base})"
        )));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(input)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        scalar(&tape, out)
    };
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = point.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "function is non-finite when perturbing coordinate {i}"
            )));
        }
        numeric.push((plus - minus) / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .enumerate()
        .fold(
            (0, 0.0),
            |best, (i, e)| if e > best.1 { (i, e) } else { best },
        );
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let value = tape.value(v);
    if value.len() != 1 {
        return Err(Error::Usage(format!(
            "checked function must return a scalar, got shape {:?}",
            tape.shape(v)
        )));
    }
    Ok(value[0])
}
