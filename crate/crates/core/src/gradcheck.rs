//! Finite-difference verification of tape gradients.
//!
//! The checker rebuilds the computation at perturbed inputs and compares
//! central differences against the analytic backward pass, element by
//! element. Relative error uses max(|analytic|, |numeric|, 1e-4) as the
//! denominator: genuinely large gradients are compared relatively, while
//! near-zero ones — where central differences bottom out at rounding
//! noise — are effectively compared absolutely (|a − n| ≤ tol·1e-4).

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error seen across all checked elements.
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at the worst element.
    pub worst_pair: (f64, f64),
    /// Total number of elements compared.
    pub checked: usize,
    /// Loss at the unperturbed point.
    pub loss: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.loss.is_finite() && self.max_rel_err <= tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Checks d(loss)/d(input) for every element of every input.
///
/// `build` must construct the same scalar-valued graph each call; inputs
/// are supplied as (shape, data) pairs and appear as leaves in the order
/// given. `eps` is the central-difference step.
pub fn central_diff_check(
    inputs: &[(Vec<usize>, Vec<f64>)],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    eps: f64,
) -> GradCheckReport {
    let eval = |xs: &[(Vec<usize>, Vec<f64>)]| -> f64 {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = xs
            .iter()
            .map(|(shape, data)| t.leaf(Tensor::new(shape.clone(), data.clone()).unwrap()))
            .collect();
        let loss = build(&mut t, &vs);
        t.val(loss).item()
    };

    // Analytic gradients at the base point.
    let mut tape = Tape::new();
    let vs: Vec<Var> = inputs
        .iter()
        .map(|(shape, data)| tape.leaf(Tensor::new(shape.clone(), data.clone()).unwrap()))
        .collect();
    let loss_var = build(&mut tape, &vs);
    let loss = tape.val(loss_var).item();
    let grads = tape.backward(loss_var);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        worst_pair: (0.0, 0.0),
        checked: 0,
        loss,
    };
    let mut work: Vec<(Vec<usize>, Vec<f64>)> = inputs.to_vec();
    for (vi, (_, data)) in inputs.iter().enumerate() {
        let analytic = grads.get(vs[vi]).to_vec();
        assert_eq!(analytic.len(), data.len(), "missing gradient for input {vi}");
        for (ei, &a) in analytic.iter().enumerate() {
            let orig = work[vi].1[ei];
            work[vi].1[ei] = orig + eps;
            let up = eval(&work);
            work[vi].1[ei] = orig - eps;
            let down = eval(&work);
            work[vi].1[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (vi, ei);
                report.worst_pair = (a, numeric);
            }
        }
    }
    report
}

/// Test helper: panics with a pointed message when any element exceeds `tol`.
pub fn check_grads_multi(
    inputs: &[(Vec<usize>, Vec<f64>)],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    let report = central_diff_check(inputs, build, eps);
    assert!(
        report.loss.is_finite(),
        "loss is not finite: {}",
        report.loss
    );
    assert!(
        report.max_rel_err <= tol,
        "gradient mismatch: rel err {:.3e} > {:.1e} at input {} elem {} (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_err,
        tol,
        report.worst.0,
        report.worst.1,
        report.worst_pair.0,
        report.worst_pair.1
    );
    report
}
