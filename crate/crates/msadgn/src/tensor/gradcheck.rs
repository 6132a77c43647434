//! Central finite-difference gradient verification.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of `loss_fn` against central differences.
///
/// `loss_fn` must rebuild the scalar loss from the current values of
/// `params`. Returns the maximum over all parameter elements of
/// `|ad − fd| / max(1e-8, |ad| + |fd|)`.
pub fn finite_diff_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    for p in params {
        p.zero_grad();
    }
    Tape::scope(|_| -> Result<()> {
        let loss = loss_fn()?;
        loss.backward()?;
        Ok(())
    })?;
    let autodiff: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = || -> Result<f64> { Tape::no_grad(|| loss_fn().map(|t| t.item())) };

    let mut max_rel = 0.0_f64;
    for (p, ad) in params.iter().zip(&autodiff) {
        let base = p.to_vec();
        let mut work = base.clone();
        for i in 0..base.len() {
            work[i] = base[i] + eps;
            p.set_data(&work);
            let plus = eval()?;
            work[i] = base[i] - eps;
            p.set_data(&work);
            let minus = eval()?;
            work[i] = base[i];
            p.set_data(&work);

            let fd = (plus - minus) / (2.0 * eps);
            let rel = (ad[i] - fd).abs() / (1e-8_f64).max(ad[i].abs() + fd.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::super::{add, conv1d, cross_entropy, matmul, relu, scale, softmax, sum};
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], requires_grad: bool) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        if requires_grad {
            Tensor::param(data, shape).unwrap()
        } else {
            Tensor::from_vec(data, shape).unwrap()
        }
    }

    #[test]
    fn quadratic_matches_analytic_gradient() {
        // f(p) = p^2 at p = 3: gradient 6 on both routes.
        let p = Tensor::param(vec![3.0], &[1]).unwrap();
        let p2 = p.clone();
        let rel = finite_diff_check(
            move || {
                let sq = matmul(
                    &super::super::reshape(&p2, &[1, 1])?,
                    &super::super::reshape(&p2, &[1, 1])?,
                )?;
                Ok(sum(&sq))
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-9, "rel err {rel}");
    }

    #[test]
    fn linear_function_is_exact_for_central_differences() {
        let p = Tensor::param(vec![0.4, -1.1, 2.2], &[3]).unwrap();
        let p2 = p.clone();
        let rel = finite_diff_check(move || Ok(sum(&scale(&p2, 3.5))), &[p], 1e-5).unwrap();
        assert!(rel < 1e-10, "rel err {rel}");
    }

    #[test]
    fn matmul_gradient_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(&mut rng, &[3, 4], true);
        let b = random_tensor(&mut rng, &[4, 2], true);
        let (a2, b2) = (a.clone(), b.clone());
        let rel =
            finite_diff_check(move || Ok(sum(&matmul(&a2, &b2)?)), &[a, b], 1e-5).unwrap();
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn conv1d_gradient_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, &[2, 3, 16], true);
        let w = random_tensor(&mut rng, &[4, 3, 3], true);
        let (x2, w2) = (x.clone(), w.clone());
        let rel = finite_diff_check(
            move || Ok(sum(&relu(&conv1d(&x2, &w2, 2, 1)?))),
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn relu_gradient_is_indicator_away_from_zero() {
        // Values kept away from 0 so the subgradient choice is irrelevant.
        let x = Tensor::param(vec![-0.9, 0.7, 1.3, -0.2], &[4]).unwrap();
        let x2 = x.clone();
        let rel = finite_diff_check(move || Ok(sum(&relu(&x2))), &[x.clone()], 1e-5).unwrap();
        assert!(rel < 1e-9, "rel err {rel}");
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_jacobian_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, &[4, 3], true);
        // Weighted sum makes every Jacobian entry matter.
        let w = random_tensor(&mut rng, &[3, 1], false);
        let (x2, w2) = (x.clone(), w.clone());
        let rel = finite_diff_check(
            move || Ok(sum(&matmul(&softmax(&x2)?, &w2)?)),
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn cross_entropy_gradient_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = random_tensor(&mut rng, &[5, 4], true);
        let targets = vec![0, 3, 1, 2, 2];
        let l2 = logits.clone();
        let rel =
            finite_diff_check(move || cross_entropy(&l2, &targets), &[logits], 1e-5).unwrap();
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn composite_mlp_loss_over_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, &[4, 6], false);
        let w1 = random_tensor(&mut rng, &[6, 5], true);
        let b1 = random_tensor(&mut rng, &[5], true);
        let w2 = random_tensor(&mut rng, &[5, 3], true);
        let b2 = random_tensor(&mut rng, &[3], true);
        let targets = vec![0, 2, 1, 1];
        let (xc, w1c, b1c, w2c, b2c) = (x, w1.clone(), b1.clone(), w2.clone(), b2.clone());
        let rel = finite_diff_check(
            move || {
                let h = relu(&super::super::add_row_bias(&matmul(&xc, &w1c)?, &b1c)?);
                let logits = super::super::add_row_bias(&matmul(&h, &w2c)?, &b2c)?;
                cross_entropy(&logits, &targets)
            },
            &[w1, b1, w2, b2],
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-5, "rel err {rel}");
    }

    #[test]
    fn reversal_pseudo_gradient_disagrees_with_finite_differences_by_minus_lambda() {
        // grad_reverse is identity on values, so central differences see the
        // true derivative while autodiff reports −λ times it. The check must
        // therefore flag a reversal path; reversal-free graphs are the ones
        // required to pass.
        let x = Tensor::param(vec![0.3, -0.8], &[2]).unwrap();
        let x2 = x.clone();
        let rel = finite_diff_check(
            move || Ok(sum(&super::super::grad_reverse(&x2, 1.0)?)),
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        assert!(rel > 0.5, "reversal path unexpectedly passed: rel err {rel}");
        assert_eq!(x.grad().unwrap(), vec![-1.0, -1.0]);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let p = Tensor::param(vec![1.0], &[1]).unwrap();
        let p2 = p.clone();
        let err = finite_diff_check(move || Ok(sum(&p2)), &[p], 0.0).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }
}
