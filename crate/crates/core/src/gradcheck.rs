//! Finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Step used for central differences and for the hinge guard band.
pub const FD_EPS: f64 = 1e-5;

/// Outcome of comparing analytic and numeric gradients coordinate-wise.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Coordinates within the guard band of a data-dependent branch
    /// (ReLU sign, pooling argmax, clamp boundary); excluded from the
    /// error maxima because a central difference straddling a kink is
    /// meaningless.
    pub skipped: Vec<usize>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error
    }
}

/// Relative error with the floor that keeps tiny gradients comparable.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference gradient of `f` at `x`: one `±eps` probe pair per
/// coordinate.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    assert!(eps > 0.0, "finite differences need a positive step");
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        *g = (up - down) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Compares the tape's backward pass against central differences for the
/// scalar function built by `build` (given a graph and the input node,
/// returns the output node).
///
/// Coordinates whose probes flip a recorded branch within ±10·eps of the
/// evaluation point are skipped and listed in the report; everywhere else
/// the relative error must stay within `tol`.
pub fn gradient_check<F>(build: F, x: &Tensor, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eps = FD_EPS;

    // Analytic gradient at the evaluation point.
    let mut g = Graph::new();
    let xn = g.param(x.clone());
    let out = build(&mut g, xn)?;
    let grads = g.backward(out)?;
    let analytic = grads.get_or_zeros(xn, &g);

    let eval = |probe: &Tensor| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let xn = g.leaf(probe.clone());
        let out = build(&mut g, xn)?;
        Ok((g.value(out).item(), g.branch_signature()))
    };

    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut skipped = Vec::new();
    let mut checked = 0usize;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];

        probe.data_mut()[i] = orig + eps;
        let (up, sig_up) = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (down, sig_down) = eval(&probe)?;
        probe.data_mut()[i] = orig + 10.0 * eps;
        let (_, sig_wide_up) = eval(&probe)?;
        probe.data_mut()[i] = orig - 10.0 * eps;
        let (_, sig_wide_down) = eval(&probe)?;
        probe.data_mut()[i] = orig;

        if sig_up != sig_down || sig_wide_up != sig_wide_down {
            skipped.push(i);
            continue;
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        max_abs = max_abs.max((a - numeric).abs());
        max_rel = max_rel.max(rel_error(a, numeric));
        checked += 1;
    }

    Ok(GradReport {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        skipped,
        checked,
        tol,
        passed: max_rel <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_square_matches_derivative() {
        let g = finite_difference_gradient(
            |t| Ok(t.data()[0] * t.data()[0]),
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!((g.item() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn fd_constant_is_zero() {
        let g = finite_difference_gradient(|_| Ok(42.0), &Tensor::from_vec(vec![1.0, 2.0]), 1e-5)
            .unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn fd_sum_exp_at_origin() {
        let g = finite_difference_gradient(
            |t| Ok(t.data().iter().map(|&v| v.exp()).sum()),
            &Tensor::from_vec(vec![0.0, 0.0]),
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-8);
        assert!((g.data()[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn linear_function_passes_tight() {
        let x = Tensor::from_vec(vec![0.7, -1.3, 2.2]);
        let report = gradient_check(
            |g, xn| {
                let s = g.sum(xn);
                Ok(g.scale(s, 3.5))
            },
            &x,
            1e-8,
        )
        .unwrap();
        assert!(report.passed, "max rel {}", report.max_rel_error);
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn smooth_composite_passes() {
        let x = Tensor::from_vec(vec![0.3, -0.4, 0.9, -1.1]);
        let report = gradient_check(
            |g, xn| {
                let e = g.exp(xn);
                let sq = g.mul(e, e);
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "max rel {}", report.max_rel_error);
    }

    #[test]
    fn relu_kink_coordinate_is_skipped() {
        // Second coordinate sits on the ReLU kink; its probes disagree.
        let x = Tensor::from_vec(vec![1.0, 0.0, -1.0]);
        let report = gradient_check(
            |g, xn| {
                let r = g.relu(xn);
                Ok(g.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.skipped, vec![1]);
        assert_eq!(report.checked, 2);
        assert!(report.passed);
    }

    #[test]
    fn failure_is_reported_not_swallowed() {
        // x^3 has FD truncation error around eps^2; a tolerance below
        // that must come back as a failed report, not a panic.
        let x = Tensor::from_vec(vec![2.0]);
        let report = gradient_check(
            |g, xn| {
                let sq = g.mul(xn, xn);
                let cu = g.mul(sq, xn);
                Ok(g.sum(cu))
            },
            &x,
            1e-14,
        )
        .unwrap();
        assert!(!report.passed, "cubic FD error cannot reach 1e-14");
    }
}
