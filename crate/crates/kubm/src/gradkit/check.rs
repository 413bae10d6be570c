//! Central finite-difference verification of analytic gradients.

use super::tensor::Tensor;

/// Compares analytic gradients against central finite differences of
/// `loss_fn`, returning the worst relative error over all coordinates.
///
/// The relative error for a coordinate is
/// `|analytic - numeric| / max(1, |numeric|)`, so tiny gradients are judged
/// on an absolute scale and large ones relatively.
///
/// `loss_fn` must be a pure function of the parameter tensors it is handed;
/// it is evaluated `2 * total_parameter_count` times.
pub fn finite_diff_check<F>(
    params: &[Tensor],
    analytic_grads: &[Tensor],
    mut loss_fn: F,
    eps: f64,
) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert_eq!(
        params.len(),
        analytic_grads.len(),
        "one analytic gradient per parameter tensor"
    );
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        assert_eq!(
            params[pi].shape(),
            analytic_grads[pi].shape(),
            "gradient {} shape mismatch",
            pi
        );
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let up = loss_fn(&work);
            work[pi].data_mut()[j] = orig - eps;
            let down = loss_fn(&work);
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = analytic_grads[pi].data()[j];
            let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_verifies() {
        // loss = sum(x_i^2), gradient 2x.
        let params = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let grads = vec![Tensor::vector(vec![2.0, -4.0, 1.0])];
        let err = finite_diff_check(
            &params,
            &grads,
            |p| p[0].data().iter().map(|v| v * v).sum(),
            1e-5,
        );
        assert!(err < 1e-9, "relative error {}", err);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let params = vec![Tensor::vector(vec![1.0])];
        let grads = vec![Tensor::vector(vec![3.0])]; // truth is 2.0
        let err = finite_diff_check(&params, &grads, |p| p[0].data()[0].powi(2), 1e-5);
        assert!(err > 0.4, "relative error {} should flag the bad gradient", err);
    }
}
