use super::{Graph, Matrix, TensorError, Var};

/// Error at the base step above which smaller steps are tried.
pub const REFINE_THRESHOLD: f64 = 1e-5;

/// Smallest denominator of the per-entry relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat entry)` where the maximum was observed.
    pub worst_entry: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
    /// Entries that needed a smaller step than `h`.
    pub refined_entries: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the tape gradient of a scalar function with central
/// differences `(f(x+h) − f(x−h)) / 2h`, entry by entry.
///
/// `f` receives a fresh graph and one input node per matrix in `inputs`, and
/// must return a `1 x 1` node. The relative error of an entry is
/// `|analytic − numeric| / max(|analytic|, |numeric|, REL_ERROR_FLOOR)`;
/// the floor keeps central-difference roundoff on near-zero gradients from
/// dominating.
///
/// An entry whose error at `h` is at least [`REFINE_THRESHOLD`] is probed
/// again at `h/10` and `h/100` and the closest estimate is kept, so a probe
/// straddling a kink (ReLU, |x|, min/max) does not mask a correct rule. A
/// wrong rule disagrees at every step.
pub fn grad_check<F>(f: F, inputs: &[Matrix], h: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::Domain { op: "grad_check", msg: format!("step must be positive, got {h}") });
    }
    let eval = |values: &[Matrix]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.scalar(out).is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    let grads = g.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_entry: None, analytic: 0.0, numeric: 0.0, entries_checked: 0, refined_entries: 0 };
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(inputs[k].rows(), inputs[k].cols()));
        for e in 0..inputs[k].len() {
            let orig = inputs[k].data()[e];
            let a = analytic.data()[e];
            let mut central = |step: f64| -> Result<f64, TensorError> {
                work[k].data_mut()[e] = orig + step;
                let fp = eval(&work)?;
                work[k].data_mut()[e] = orig - step;
                let fm = eval(&work)?;
                work[k].data_mut()[e] = orig;
                Ok((fp - fm) / (2.0 * step))
            };
            let rel_of = |numeric: f64| (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let mut numeric = central(h)?;
            let mut rel = rel_of(numeric);
            if rel >= REFINE_THRESHOLD {
                report.refined_entries += 1;
                for step in [h / 10.0, h / 100.0] {
                    let n = central(step)?;
                    if rel_of(n) < rel {
                        numeric = n;
                        rel = rel_of(n);
                    }
                }
            }
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst_entry.is_none() {
                report.max_rel_error = rel;
                report.worst_entry = Some((k, e));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(|g, v| Ok(g.square(v[0])), &[Matrix::scalar(3.0)], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert!((r.analytic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_is_an_error() {
        let r = grad_check(
            |g, v| {
                let value = Matrix::scalar(f64::NAN);
                Ok(g.custom(&[v[0]], value, Box::new(|_, _, g| vec![g.clone()])))
            },
            &[Matrix::scalar(1.0)],
            1e-5,
        );
        assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(|g, v| Ok(g.square(v[0])), &[Matrix::scalar(1.0)], 0.0).is_err());
    }

    #[test]
    fn detects_wrong_backward() {
        let r = grad_check(
            |g, v| {
                let value = g.value(v[0]).scale(2.0);
                let doubled = g.custom(&[v[0]], value, Box::new(|_, _, g| vec![g.scale(3.0)]));
                Ok(g.sum_all(doubled))
            },
            &[Matrix::row_vector(&[0.5, -1.0])],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.3);
    }
}
