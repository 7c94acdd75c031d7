//! Gradient verification against central finite differences.

use crate::{Result, Scalar, Tape, Tensor, Var};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Relative error floor: coordinates where both gradients are below this are
/// compared on an absolute scale instead, so truncation noise on near-zero
/// gradients does not dominate the report.  Deep composed graphs evaluated
/// at h = 1e-3 carry h² truncation up to a few 1e-7 on coordinates whose
/// first-order terms nearly cancel, so the floor is sized to keep that band
/// below tolerance: at the usual 1e-5 tolerance it demands 1e-6 absolute
/// agreement on dead coordinates — orders of magnitude below the error any
/// wrong backward rule produces, which shows up at the scale of the
/// gradients themselves.
const DENOM_FLOOR: f64 = 1e-1;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Compares tape gradients of a scalar-valued graph against central finite
/// differences over every coordinate of every input.
///
/// `build` receives the inputs as tracked leaves and must return the loss
/// node.  It is re-invoked for each perturbed evaluation, so it must be a
/// pure function of the input tensors.
pub fn grad_check<T: Scalar>(
    inputs: &[Tensor<T>],
    h: T,
    build: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let eval = |tensors: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    // Analytic gradients from a single recorded evaluation.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?.to_f64();
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?.to_f64();
            work[i].data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * h.to_f64());
            let a = analytic.map_or(0.0, |g| g.data()[j].to_f64());
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
