//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Finite-difference step applied to each input scalar.
pub const STEP: f64 = 1e-5;

/// Times the step is divided by ten when a stencil straddles a kink.
pub const MAX_REFINEMENTS: u32 = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |a − n| / max(1, |a|, |n|)` over every input scalar.
    pub max_rel_error: f64,
    /// Input tensor and flat element where the maximum occurred.
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalars perturbed.
    pub checked: usize,
    /// Stencils re-evaluated with a smaller step because the full step
    /// crossed a max selection or a leaky ReLU branch.
    pub refined: usize,
    /// Scalars sitting within the smallest step of a kink, compared against
    /// the one-sided difference on the side the analytic gradient uses.
    pub one_sided: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` builds a computation from leaf vars holding `inputs`. Its output is
/// contracted with a fixed random projection (drawn from `seed`) so every
/// output element contributes to the checked scalar objective.
///
/// The difference quotient only measures the derivative when the whole
/// stencil lies on one smooth piece of the function. When a perturbed run's
/// [`Tape::branch_signature`] differs from the unperturbed one, the step is
/// shrunk by ten up to [`MAX_REFINEMENTS`] times.
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let record = |mut tape: Tape<f64>, values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = record(Tape::new(), inputs)?;
    let base_signature = tape.branch_signature();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = tape.value(out).shape().to_vec();
    let projection = Tensor::from_fn(&out_shape, |_| rng.gen_range(-1.0..1.0));
    let objective = |t: &Tensor<f64>| -> f64 {
        t.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum()
    };
    let base_value = objective(tape.value(out));

    let grads = tape.backward(out, projection.clone())?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        refined: 0,
        one_sided: 0,
    };
    let mut perturbed = inputs.to_vec();
    // Objective and branch signature with input (i, j) set to `value`.
    let mut probe = |i: usize, j: usize, value: f64| -> Result<(f64, bool)> {
        let original = perturbed[i].data()[j];
        perturbed[i].data_mut()[j] = value;
        // Only values downstream of the perturbed scalar are recomputed.
        let result = record(Tape::replaying(&tape), &perturbed);
        perturbed[i].data_mut()[j] = original;
        let (t, _, o) = result?;
        Ok((objective(t.value(o)), t.branch_signature() == base_signature))
    };
    for (i, var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(*var) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(inputs[i].shape());
                &zeros
            }
        };
        if let Err(Error::NonFinite { index, .. }) = analytic.check_finite("") {
            return Err(Error::NonFinite {
                context: format!("analytic gradient of input {i}"),
                index,
            });
        }
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            let mut step = STEP;
            let mut numeric = None;
            let mut last = (0.0, false, 0.0, false);
            for attempt in 0..=MAX_REFINEMENTS {
                let (plus, plus_same) = probe(i, j, x + step)?;
                let (minus, minus_same) = probe(i, j, x - step)?;
                if plus_same && minus_same {
                    numeric = Some((plus - minus) / (2.0 * step));
                    if attempt > 0 {
                        report.refined += 1;
                    }
                    break;
                }
                last = (plus, plus_same, minus, minus_same);
                step /= 10.0;
            }
            let numeric = match numeric {
                Some(n) => n,
                None => {
                    let step = step * 10.0;
                    report.one_sided += 1;
                    match last {
                        (plus, true, _, _) => (plus - base_value) / step,
                        (_, _, minus, true) => (base_value - minus) / step,
                        // Both neighbours leave the base piece: the point
                        // is a tie between branches with no single slope.
                        _ => continue,
                    }
                }
            };
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.input = i;
                report.index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
