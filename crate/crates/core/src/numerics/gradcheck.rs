use super::{NumericsError, Result, Tape, Tensor, Var};

/// Compares tape gradients against central differences.
///
/// `f` builds a scalar on a fresh tape from leaves bound to `params` (in
/// order). Returns the maximum over all coordinates of
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(NumericsError::InvalidArgument {
            op: "finite_diff_check",
            reason: format!("step must be positive, got {step}"),
        });
    }
    let eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| {
                let t = if with_grad { t.clone().requires_grad() } else { t.clone() };
                tape.leaf(t)
            })
            .collect::<Result<Vec<_>>>()?;
        let root = f(&mut tape, &vars)?;
        let y = tape.value(root).item();
        if !y.is_finite() {
            return Err(NumericsError::NonFinite { op: "finite_diff_check" });
        }
        if !with_grad {
            return Ok((y, None));
        }
        let grads = tape.backward(root)?;
        let g = vars
            .iter()
            .map(|v| grads.get(*v).map(<[f64]>::to_vec).ok_or(NumericsError::UnknownVar(v.id())))
            .collect::<Result<Vec<_>>>()?;
        Ok((y, Some(g)))
    };

    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.expect("requested gradients");
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = work[ti].values()[i];
            work[ti].values_mut()[i] = orig + step;
            let (plus, _) = eval(&work, false)?;
            work[ti].values_mut()[i] = orig - step;
            let (minus, _) = eval(&work, false)?;
            work[ti].values_mut()[i] = orig;
            let central = (plus - minus) / (2.0 * step);
            let err = (grad[i] - central).abs() / (grad[i].abs() + central.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_near_exact() {
        // f(x) = x^T A x with symmetric A
        let a = Tensor::matrix(3, 3, vec![2.0, 0.5, -1.0, 0.5, 3.0, 0.25, -1.0, 0.25, 1.5]).unwrap();
        let x = Tensor::matrix(3, 1, vec![0.3, -1.2, 0.8]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let a = tape.constant(vec![3, 3], a.values().to_vec())?;
                let ax = tape.matmul(a, v[0])?;
                let prod = tape.mul(v[0], ax)?;
                tape.sum(prod)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn zero_step_rejected() {
        let x = Tensor::scalar(1.0);
        let r = finite_diff_check(|tape, v| tape.mul(v[0], v[0]), &[x], 0.0);
        assert!(matches!(r, Err(NumericsError::InvalidArgument { .. })));
    }
}
