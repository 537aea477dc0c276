//! Central-difference gradient oracle.
//!
//! Relative error per coordinate is `|analytic - numeric| / max(1, |numeric|)`.
//! A coordinate whose one-sided differences disagree by more than the
//! tolerance sits on a kink (e.g. relu at 0); it is exempted and reported
//! when the analytic value lies between the two one-sided slopes, i.e. it is
//! a valid subgradient.

use thiserror::Error;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("eps must be positive and finite, got {0}")]
    BadEps(f64),
    #[error("non-finite {what} at coordinate {index}: {value}")]
    NonFinite {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("analytic gradient has {got} entries, expected {expected}")]
    GradientLength { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_index: usize,
    /// Coordinates skipped as non-differentiable.
    pub exempt: Vec<usize>,
    pub checked: usize,
}

/// Tolerance used to decide whether a coordinate sits on a kink.
pub const KINK_TOLERANCE: f64 = 1e-4;

/// Compares `analytic` with central differences of `value` at `point`.
pub fn grad_check_fn(
    mut value: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    eps: f64,
) -> Result<GradCheckReport, GradCheckError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(GradCheckError::BadEps(eps));
    }
    if analytic.len() != point.len() {
        return Err(GradCheckError::GradientLength {
            expected: point.len(),
            got: analytic.len(),
        });
    }
    let f0 = value(point);
    if !f0.is_finite() {
        return Err(GradCheckError::NonFinite {
            what: "function value",
            index: 0,
            value: f0,
        });
    }
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        exempt: Vec::new(),
        checked: 0,
    };
    for i in 0..x.len() {
        let a = analytic[i];
        if !a.is_finite() {
            return Err(GradCheckError::NonFinite {
                what: "analytic gradient",
                index: i,
                value: a,
            });
        }
        let orig = x[i];
        x[i] = orig + eps;
        let fp = value(&x);
        x[i] = orig - eps;
        let fm = value(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(GradCheckError::NonFinite {
                what: "function value",
                index: i,
                value: if fp.is_finite() { fm } else { fp },
            });
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (a - numeric).abs() / numeric.abs().max(1.0);
        if rel > KINK_TOLERANCE {
            let forward = (fp - f0) / eps;
            let backward = (f0 - fm) / eps;
            let (lo, hi) = (forward.min(backward), forward.max(backward));
            let kink = (hi - lo) / numeric.abs().max(1.0) > KINK_TOLERANCE;
            if kink && a >= lo - KINK_TOLERANCE && a <= hi + KINK_TOLERANCE {
                report.exempt.push(i);
                continue;
            }
        }
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Gradient check of a graph-built scalar function of one input tensor.
///
/// `build` receives a fresh graph and the input variable and must return a
/// scalar loss. Evaluation runs in `f64`.
pub fn grad_check<F>(build: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let x = g.input(point.clone(), true);
    let loss = build(&mut g, x)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .of(x)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);
    let shape = point.shape().to_vec();
    let mut err = None;
    let report = grad_check_fn(
        |xs| {
            let mut g = Graph::new();
            let t = Tensor::new(shape.clone(), xs.to_vec()).expect("shape preserved");
            let x = g.input(t, false);
            match build(&mut g, x) {
                Ok(l) => g.value(l).item(),
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &analytic,
        point.data(),
        eps,
    );
    if let Some(e) = err {
        return Err(e.into());
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = Tensor::new(vec![1], vec![3.0]).unwrap();
        let r = grad_check(|g, x| Ok(g.square(x)), &p, 1e-3).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
        assert!(r.exempt.is_empty());
    }

    #[test]
    fn softmax_cross_entropy_on_five_logits() {
        let p = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.7, -0.1]).unwrap();
        let onehot = Tensor::new(vec![5], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let s = g.softmax(x);
                let l = g.ln(s);
                let y = g.constant(onehot.clone());
                let picked = g.mul(l, y)?;
                let nll = g.sum(picked);
                Ok(g.scale(nll, -1.0))
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn relu_kink_is_exempted() {
        let p = Tensor::new(vec![3], vec![0.0, 1.5, -2.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let y = g.relu(x);
                Ok(g.sum(y))
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert_eq!(r.exempt, vec![0]);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error <= 1e-9);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = grad_check_fn(|x| x[0] * x[0], &[5.0], &[2.0], 1e-3).unwrap();
        assert!(r.max_rel_error > 0.1);
        assert!(r.exempt.is_empty());
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let err = grad_check_fn(|x| if x[1] > 1.0 { f64::NAN } else { x[0] }, &[1.0, 0.0], &[0.0, 1.0], 1e-3)
            .unwrap_err();
        match err {
            GradCheckError::NonFinite { index, .. } => assert_eq!(index, 1),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            grad_check_fn(|x| x[0], &[1.0], &[0.0], 0.0),
            Err(GradCheckError::BadEps(_))
        ));
    }
}
