//! Central finite-difference verification of tape gradients.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of [`relative_error`].
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Errors above this trigger re-measurement at `step / 10` and `step / 100`.
///
/// A piecewise-linear op (ReLU) whose kink lies inside `x ± step` makes the
/// central difference average two slopes; a shorter step clears the kink
/// while a wrong gradient stays wrong at every step.
pub const RETRY_ABOVE: f64 = 1e-5;

/// Which coordinates of each input are perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coords {
    All,
    /// At most `per_input` coordinates per input, drawn without replacement.
    Sample { per_input: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub input: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn evaluate<F>(f: &F, inputs: &[Tensor], precision_tape: &Tape) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_precision(precision_tape.precision());
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "finite_diff_check" });
    }
    Ok(v)
}

fn pick(len: usize, coords: Coords, input: usize) -> Vec<usize> {
    match coords {
        Coords::All => (0..len).collect(),
        Coords::Sample { per_input, .. } if per_input >= len => (0..len).collect(),
        Coords::Sample { per_input, seed } => {
            let mut rng = StdRng::seed_from_u64(seed ^ (input as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = rand::seq::index::sample(&mut rng, len, per_input).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

fn central<F>(f: &F, inputs: &mut [Tensor], i: usize, c: usize, step: f64, reference: &Tape) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let x0 = inputs[i].data()[c];
    inputs[i].data_mut()[c] = x0 + step;
    let plus = evaluate(f, inputs, reference);
    inputs[i].data_mut()[c] = x0 - step;
    let minus = evaluate(f, inputs, reference);
    inputs[i].data_mut()[c] = x0;
    let numeric = (plus? - minus?) / (2.0 * step);
    if !numeric.is_finite() {
        return Err(TensorError::NonFinite { op: "finite_diff_check" });
    }
    Ok(numeric)
}

/// Tape gradient of the scalar `f(inputs)` with respect to every input.
pub fn analytic_gradients<F>(f: F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .map(|v| grads.take(*v).expect("leaf gradient is always populated"))
        .collect())
}

/// Compares given gradients of the scalar `f(inputs)` against central
/// differences with the given `step`, input by input.
///
/// `f` must build its output from the supplied vars only; it is re-run on a
/// fresh tape for every perturbation.
pub fn compare_gradients<F>(
    f: F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    step: f64,
    coords: Coords,
) -> Result<Vec<InputReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(TensorError::Usage(format!("finite-difference step must be > 0, got {step}")));
    }
    if analytic.len() != inputs.len() || analytic.iter().zip(inputs).any(|(a, x)| a.shape() != x.shape()) {
        return Err(TensorError::Usage("one gradient per input, of the same shape, is required".into()));
    }
    let reference = Tape::new();
    let mut reports = Vec::with_capacity(inputs.len());
    let mut perturbed = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let mut report = InputReport {
            input: i,
            checked: 0,
            max_rel_error: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for c in pick(inputs[i].len(), coords, i) {
            let a = grad.data()[c];
            if !a.is_finite() {
                return Err(TensorError::NonFinite { op: "finite_diff_check" });
            }
            let mut numeric = central(&f, &mut perturbed, i, c, step, &reference)?;
            let mut err = relative_error(a, numeric);
            for h in [step / 10.0, step / 100.0] {
                if err <= RETRY_ABOVE {
                    break;
                }
                let n = central(&f, &mut perturbed, i, c, h, &reference)?;
                let e = relative_error(a, n);
                if e < err {
                    (numeric, err) = (n, e);
                }
            }
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst_coord = c;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// [`analytic_gradients`] followed by [`compare_gradients`].
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64, coords: Coords) -> Result<Vec<InputReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    compare_gradients(&f, inputs, &analytic, step, coords)
}

/// Maximum relative error between the tape gradient of scalar `f` at `x`
/// and its central-difference estimate over every coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let reports = check_gradients(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step, Coords::All)?;
    Ok(reports[0].max_rel_error)
}
