use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Checks every coordinate of every input. See [`finite_diff_check_coords`].
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    finite_diff_check_coords(f, inputs, h, &coords)
}

/// Compares the analytic gradient of the scalar function `f` with
/// `(f(x+h·e) − f(x−h·e)) / 2h` at the listed `(input, coordinate)` pairs.
///
/// Relative error per coordinate is `|analytic − numeric| / max(|analytic|, |numeric|, 1e−8)`.
pub fn finite_diff_check_coords<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Usage(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(tape.value(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(tape.value(out))?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for &(i, j) in coords {
        let orig = inputs[i].data()[j];
        probe[i].data_mut()[j] = orig + h;
        let plus = eval(&probe)?;
        probe[i].data_mut()[j] = orig - h;
        let minus = eval(&probe)?;
        probe[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let exact = analytic[i].data()[j];
        let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-8);
        report.coords_checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((i, j));
        }
    }
    Ok(report)
}

fn scalar_of(t: &Tensor) -> Result<f64> {
    if t.is_scalar() {
        Ok(t.data()[0])
    } else {
        Err(Error::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )))
    }
}
