use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where the maximum was observed.
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares the analytic gradient returned by `f` against central differences.
///
/// `f` maps parameters to `(value, gradient)`. The per-coordinate error is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps {eps} outside (0, 1e-2]")));
    }
    let (_, analytic) = f(params);
    if analytic.len() != params.len() {
        return Err(Error::shape("grad_check gradient", params.len(), analytic.len()));
    }
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite analytic gradient at coordinate {i}"
        )));
    }
    let mut theta = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        coordinates: params.len(),
    };
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let (plus, _) = f(&theta);
        theta[i] = orig - eps;
        let (minus, _) = f(&theta);
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite numeric gradient at coordinate {i}"
            )));
        }
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::matrix::Matrix;
    use crate::kernels::ops::{linear, softmax_cross_entropy};

    #[test]
    fn quadratic_gradient_is_exact() {
        let f = |x: &[f64]| (0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.to_vec());
        let r = grad_check(f, &[0.3, -2.0, 5.5, 12.0], 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn rejects_bad_eps_and_nan_gradients() {
        let f = |x: &[f64]| (x[0], vec![1.0]);
        assert!(grad_check(f, &[1.0], 0.0).is_err());
        assert!(grad_check(f, &[1.0], 0.1).is_err());
        let g = |_: &[f64]| (0.0, vec![f64::NAN]);
        match grad_check(g, &[1.0], 1e-4) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("coordinate 0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_softmax_linear_gradient() {
        // parameters: 3x4 weight; input fixed
        let x = [0.5, -1.0, 2.0];
        let label = 2;
        let f = |w: &[f64]| {
            let wm = Matrix::new(3, 4, w.to_vec()).unwrap();
            let logits = linear(&x, &wm, None).unwrap();
            let (loss, dlogits, _) = softmax_cross_entropy(&logits, label);
            let mut g = vec![0.0; 12];
            for i in 0..3 {
                for j in 0..4 {
                    g[i * 4 + j] = x[i] * dlogits[j];
                }
            }
            (loss, g)
        };
        let w: Vec<f64> = (0..12).map(|i| ((i as f64) * 0.37).sin()).collect();
        let r = grad_check(f, &w, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
