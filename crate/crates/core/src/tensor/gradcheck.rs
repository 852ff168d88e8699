//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, TensorError, Var};

/// Denominator floor of [`relative_error`]; below this magnitude the
/// comparison is effectively absolute.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares the tape gradient of `f` at `x` with central differences.
pub fn grad_check<F, E>(f: F, x: &Tensor, eps: f64) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let report = grad_check_many(|tape, v| f(tape, v[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_error)
}

/// Multi-input variant of [`grad_check`]: every element of every input is
/// perturbed by `±eps` in turn.
pub fn grad_check_many<F, E>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(
            TensorError::Contract(format!("grad_check eps {eps} outside [1e-7, 1e-3]")).into(),
        );
    }
    let inputs: Vec<Tensor> = inputs.iter().cloned().map(Tensor::with_grad).collect();

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(&inputs)
            .map(|(&v, t)| {
                grads
                    .get(v)
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.clone();
    for (k, tensor) in inputs.iter().enumerate() {
        for i in 0..tensor.numel() {
            let x0 = tensor.data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[k][i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((k, i));
                }
            }
        }
    }
    Ok(report)
}
