//! Finite-difference gradient verification.
//!
//! Runs a closure twice per input element (central differences in `f64`) and
//! compares against the gradients the backward pass produced. Used both by
//! the op unit tests and by the `gradcheck` CLI command, which sweeps every
//! composite block of the model.

use super::Tensor;
use crate::Result;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: {} elements, max rel err {:.3e} (tol {:.1e}) -> {}",
            self.name,
            self.checked,
            self.max_rel_err,
            self.tolerance,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= 1e-9 {
        // Both effectively zero; central differences cannot resolve finer.
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Check `f`'s analytic gradients against central finite differences.
///
/// `inputs` are (name, value) pairs; each is re-created as a `requires_grad`
/// leaf. `f` must reduce to a scalar. `h` is the perturbation step (1e-5 is a
/// good default in `f64`), `tol` the relative tolerance.
pub fn gradient_check(
    name: &str,
    inputs: &[(&str, Tensor<f64>)],
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    gradient_check_with(name, inputs, f, h, tol, false)
}

/// Same as [`gradient_check`], with an optional sign-flip fault injected into
/// the analytic gradients. The fault must make a healthy block fail — this is
/// how the harness itself is mutation-tested.
pub fn gradient_check_with(
    name: &str,
    inputs: &[(&str, Tensor<f64>)],
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    h: f64,
    tol: f64,
    inject_sign_flip: bool,
) -> Result<GradCheckReport> {
    // Analytic pass. A loss that does not depend on any input is legal —
    // its analytic gradient is identically zero.
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(_, t)| Tensor::leaf(Arc::new(t.data().to_vec()), t.shape(), true))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    if loss.requires_grad() {
        loss.backward()?;
    }
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let frozen: Vec<Tensor<f64>> = values
            .iter()
            .zip(inputs)
            .map(|(v, (_, t))| Tensor::from_vec(v.clone(), t.shape()))
            .collect::<Result<_>>()?;
        Ok(f(&frozen)?.item())
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, t)| t.data().to_vec()).collect();
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        tolerance: tol,
        passed: true,
    };

    for (ii, (iname, t)) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut hi = base.clone();
            let mut lo = base.clone();
            hi[ii][j] += h;
            lo[ii][j] -= h;
            let numeric = (eval(&hi)? - eval(&lo)?) / (2.0 * h);
            let mut a = analytic[ii][j];
            if inject_sign_flip {
                a = -a;
            }
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(GradCheckEntry {
                    input: iname.to_string(),
                    index: j,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
