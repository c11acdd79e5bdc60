use super::{Graph, Tensor, TensorError, Var};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Elements whose ±ε probes crossed a relu kink or changed a max-pool winner.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Denominator floor for the relative error, so that gradients which are zero
/// up to rounding are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Relative error used by [`grad_check`]: `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64), TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.constant(t)).collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(TensorError::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok((g.value(out)[0], g.branch_signature()))
}

/// Checks the gradient of a scalar program against central differences
/// `(f(x+ε) - f(x-ε)) / 2ε`, element by element over every input.
///
/// Elements where either probe lands in a different piece of a piecewise
/// program (detected through [`Graph::branch_signature`]) are skipped and
/// counted, since the finite difference is meaningless across a kink.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64, tolerance: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            g.leaf(&t)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut g, &vars)?;
    let base_sig = g.branch_signature();
    g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        tolerance,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[ti].numel()]);
        for (ei, &a) in analytic.iter().enumerate() {
            let orig = inputs[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + epsilon;
            let (fp, sp) = eval(&f, &probe)?;
            probe[ti].data_mut()[ei] = orig - epsilon;
            let (fm, sm) = eval(&f, &probe)?;
            probe[ti].data_mut()[ei] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * epsilon);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((ti, ei));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_program_is_exact() {
        let x = Tensor::from_fn([4, 3], |i| i as f64 * 0.37 - 1.0);
        let r = grad_check(
            |g, v| {
                let s = g.scale(v[0], 3.0)?;
                g.sum(s)
            },
            &[x],
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 12);
        assert!(r.passed());
    }

    #[test]
    fn kink_crossings_are_skipped() {
        // 0.0004 is within ε of the relu kink.
        let x = Tensor::new(vec![3], vec![0.0004, 0.5, -0.5]).unwrap();
        let r = grad_check(
            |g, v| {
                let y = g.relu(v[0])?;
                g.sum(y)
            },
            &[x],
            1e-3,
            1e-4,
        )
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.passed());
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::new(vec![1], vec![1e308]).unwrap();
        let err = grad_check(
            |g, v| {
                g.set_scope("blowup");
                let y = g.scale(v[0], 1e10)?;
                g.sum(y)
            },
            &[x],
            1e-3,
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("blowup"));
    }
}
