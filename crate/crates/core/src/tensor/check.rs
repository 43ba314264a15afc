use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Compares the analytic gradient of a scalar-valued graph against central
/// differences at `point`. Returns the maximum over coordinates of
/// `|analytic - numeric| / (|analytic| + 1e-8)`.
///
/// `build` receives a fresh tape and the leaf for the (possibly perturbed)
/// point and must return the scalar output node.
pub fn finite_difference_check<F>(build: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::Usage(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(&point.clone().with_grad());
    let out = build(&mut tape, leaf)?;
    if tape.values(out).len() != 1 {
        return Err(Error::Usage(format!(
            "finite_difference_check needs a scalar-valued op, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(leaf)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |values: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let t = Tensor::new(point.shape().to_vec(), values.to_vec())?;
        let leaf = tape.leaf(&t);
        let out = build(&mut tape, leaf)?;
        tape.value_scalar(out)
    };

    let mut max_rel = 0.0f64;
    let mut values = point.values().to_vec();
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + eps;
        let up = eval(&values)?;
        values[i] = orig - eps;
        let down = eval(&values)?;
        values[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_values(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    #[test]
    fn linear_op_checks_to_machine_precision() {
        let point = Tensor::new(vec![6], rng_values(6, 3)).unwrap();
        let err = finite_difference_check(
            |tape, leaf| {
                let w = tape.leaf(&Tensor::new(vec![6, 1], rng_values(6, 9)).unwrap());
                let b = tape.leaf(&Tensor::new(vec![1], vec![0.2]).unwrap());
                let y = tape.affine(leaf, w, b)?;
                let target = tape.leaf(&Tensor::zeros(vec![1]));
                // mse of a linear map is quadratic; central differences are exact
                tape.mse(y, target)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn mse_at_random_point() {
        let point = Tensor::new(vec![8], rng_values(8, 5)).unwrap();
        let target = Tensor::new(vec![8], rng_values(8, 11)).unwrap();
        let err = finite_difference_check(
            |tape, leaf| {
                let t = tape.leaf(&target);
                tape.mse(leaf, t)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "error {err}");
    }

    #[test]
    fn composed_conv_sigmoid_mse() {
        use crate::tensor::ActivationKind;
        let point = Tensor::new(vec![10, 1], rng_values(10, 17)).unwrap();
        let kernel = Tensor::new(vec![3, 1, 2], rng_values(6, 23)).unwrap();
        let target = Tensor::new(vec![10, 2], rng_values(20, 31)).unwrap();
        let err = finite_difference_check(
            |tape, leaf| {
                let k = tape.leaf(&kernel);
                let y = tape.conv_circular(leaf, k, &[1])?;
                let a = tape.activation(y, ActivationKind::Sigmoid);
                let t = tape.leaf(&target);
                tape.mse(a, t)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "error {err}");
    }
}
